import math

import numpy as np
import pytest

from conftest import two_bus
from distopf.case import load_case
from distopf.opf import (
    OpfContractError,
    balance_residual,
    build_dc_opf,
    line_flows,
    objective_cost,
    solve_centralized,
)
from distopf.qp import solve_qp
from oracles import economic_dispatch, ptdf_opf

# Frozen references from two independent routes (see oracles.py): price
# bisection for cases whose line ratings are all unlimited, and an angle-free
# PTDF formulation solved by cvxopt plus an active-set KKT polish.
REFERENCE_OBJECTIVE = {
    "case14": 7642.591776958498,
    "case118": 125947.88141784111,
    "case300": 706240.2906953876,
    "rts_gmlc": 225711.27311644063,
}


def test_two_bus_structure():
    qp = build_dc_opf(two_bus(limit=5.0))
    assert qp.n == 3
    assert qp.A_eq.shape == (3, 3)          # 2 balance rows + ref pin
    assert qp.A_in.shape == (1, 3)
    np.testing.assert_array_equal(qp.A_eq[2], [1.0, 0.0, 0.0])


def test_ieee14_structure(case14):
    qp = build_dc_opf(case14)
    assert qp.n == 14 + 5
    assert qp.A_eq.shape[0] == 14 + 1
    # every branch of the published file has rateA = 0 (unlimited): no flow rows
    assert qp.A_in.shape[0] == 0


def test_ieee14_structure_with_ratings(case14):
    from dataclasses import replace
    rated = replace(case14, branches=tuple(replace(b, flow_limit=9.9) for b in case14.branches))
    assert build_dc_opf(rated).A_in.shape[0] == 20


def test_zero_demand():
    sol = solve_centralized(two_bus(demand=0.0, cost=(0.0, 5.0, 0.0)))
    assert sol.status == "optimal"
    assert sol.p[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(sol.theta, 0.0, atol=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_two_bus_solution():
    sol = solve_centralized(two_bus())
    assert sol.status == "optimal"
    assert sol.p[0] == pytest.approx(1.0, abs=1e-10)
    assert sol.theta[0] == 0.0
    assert sol.theta[1] == pytest.approx(-0.1, abs=1e-10)
    assert sol.objective == pytest.approx(1.0, abs=1e-10)


def test_two_bus_limit_infeasible():
    sol = solve_centralized(two_bus(limit=0.5))
    assert sol.status == "infeasible"
    assert math.isnan(sol.objective)


def test_invalid_case_rejected():
    from dataclasses import replace
    bad = two_bus()
    bad = replace(bad, buses=tuple(replace(b, is_ref=False) for b in bad.buses))
    with pytest.raises(OpfContractError):
        build_dc_opf(bad)


def test_line_flows():
    case = two_bus()
    np.testing.assert_array_equal(line_flows(case, np.zeros(2)), [0.0])
    assert line_flows(case, np.array([0.1, 0.0]))[0] == pytest.approx(1.0)
    # antisymmetry: swapping the angles reverses the flow
    assert line_flows(case, np.array([0.0, 0.1]))[0] == pytest.approx(-1.0)
    with pytest.raises(OpfContractError):
        line_flows(case, np.zeros(3))


def test_flows_balance_when_theta_solves_network(case14):
    rng = np.random.default_rng(14)
    idx = case14.bus_index
    inj = rng.normal(size=case14.n_bus)
    inj -= inj.mean()
    # solve B theta = injections with the reference pinned
    C = np.zeros((len(case14.branches), case14.n_bus))
    for r, br in enumerate(case14.branches):
        C[r, idx[br.from_bus]], C[r, idx[br.to_bus]] = 1.0, -1.0
    b = np.array([br.susceptance for br in case14.branches])
    B = C.T @ (b[:, None] * C)
    theta = np.zeros(case14.n_bus)
    theta[1:] = np.linalg.solve(B[1:, 1:], inj[1:])
    flows = line_flows(case14, theta)
    np.testing.assert_allclose(C.T @ flows, inj, atol=1e-10)


def test_objective_cost():
    assert objective_cost(two_bus(cost=(0.0, 3.0, 0.0)), np.zeros(1)) == 0.0
    assert objective_cost(two_bus(cost=(1.0, 2.0, 3.0)), np.array([2.0])) == 11.0
    with pytest.raises(OpfContractError):
        objective_cost(two_bus(), np.zeros(2))


def test_objective_matches_qp_value(case118):
    sol = solve_centralized(case118)
    const = sum(case118.generators[k].cost[2] for k in case118.active_generators)
    qp_val = sol.qp.objective(build_dc_opf(case118)) + const
    assert sol.objective == pytest.approx(qp_val, rel=1e-6)


@pytest.mark.parametrize("name", sorted(REFERENCE_OBJECTIVE))
def test_centralized_matches_reference(name):
    case = load_case(name)
    sol = solve_centralized(case)
    assert sol.status == "optimal"
    assert abs(sol.objective - REFERENCE_OBJECTIVE[name]) / REFERENCE_OBJECTIVE[name] < 1e-6
    # solution invariants
    assert sol.theta[case.bus_index[case.ref_bus]] == 0.0
    assert np.max(np.abs(balance_residual(case, sol.theta, sol.p))) <= 1e-6
    for k in case.active_generators:
        g = case.generators[k]
        assert g.p_min - 1e-6 <= sol.p[k] <= g.p_max + 1e-6
    lim = np.array([b.flow_limit for b in case.branches])
    assert np.all(np.abs(line_flows(case, sol.theta)) <= lim + 1e-6)
    # lossless balance
    assert sol.p.sum() == pytest.approx(case.demand.sum(), abs=1e-6)


@pytest.mark.parametrize("name", ["case14", "case118", "case300"])
def test_reference_routes_agree(name):
    case = load_case(name)
    a = economic_dispatch(case)[0]
    b = ptdf_opf(case)[0]
    assert a == pytest.approx(REFERENCE_OBJECTIVE[name], rel=1e-12)
    assert b == pytest.approx(a, rel=1e-6)


@pytest.mark.parametrize("t", [0.1, 0.35, 0.8, 1.0])
def test_scaling_covariance(t):
    case = two_bus(demand=1.2)
    base = solve_centralized(case)
    scaled = solve_centralized(case.with_demand_scaled(t))
    np.testing.assert_allclose(scaled.p, t * base.p, atol=1e-10)


def test_warm_resolve_same_objective(case118):
    qp = build_dc_opf(case118)
    cold = solve_qp(qp)
    rng = np.random.default_rng(0)
    for _ in range(3):
        shifted = qp.with_objective(qp.H, qp.g * (1 + 0.2 * rng.random(qp.n)))
        other = solve_qp(shifted)
        warm = solve_qp(qp, warm_start=other)
        assert warm.objective(qp) == pytest.approx(cold.objective(qp), rel=1e-8)
