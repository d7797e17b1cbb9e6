import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import two_bus
from distopf.algorithms import (
    PRESETS,
    AlgorithmError,
    AlgorithmParams,
    admm_coordinator_update,
    admm_local_step,
    admm_multiplier_update,
    app_local_step,
    app_multiplier_update,
    atc_coordinator_update,
    atc_local_step,
    atc_multiplier_and_beta_update,
    consensus_target,
    preset,
    relative_gap,
    run_distributed,
)
from distopf.comms import ChannelModel
from distopf.opf import solve_centralized
from distopf.partition import decompose
from distopf.qp import QpSequence

EXACT = 1e-12


@pytest.fixture
def split2():
    return decompose(two_bus(), {1: 1, 2: 2})


# -- parameters -----------------------------------------------------------------

@pytest.mark.parametrize("kw, match", [
    ({"kind": "sgd", "alpha": 1.0}, "unknown"),
    ({"kind": "admm", "alpha": 0.0}, "positive"),
    ({"kind": "admm", "alpha": math.inf}, "positive"),
    ({"kind": "atc", "alpha": 0.9}, "alpha >= 1"),
    ({"kind": "atc", "alpha": 1.1, "beta": 0.0}, "beta > 0"),
    ({"kind": "app", "alpha": 2.0, "beta": 4.0, "gamma": 1.0}, "2 gamma"),
    ({"kind": "app", "alpha": 1.0, "beta": 1.0, "gamma": 1.0}, "2 gamma"),
    ({"kind": "admm", "alpha": 1.0, "tolerance": 0.0}, "tolerance"),
    ({"kind": "admm", "alpha": 1.0, "max_iterations": -1}, "max_iterations"),
])
def test_param_validation(kw, match):
    with pytest.raises(AlgorithmError, match=match):
        AlgorithmParams(**kw)


def test_app_coupling_and_atc_default():
    p = AlgorithmParams.app(10.0)
    assert (p.alpha, p.gamma, p.beta) == (10.0, 10.0, 20.0)
    assert AlgorithmParams("atc", 1.1).beta == 1.0


@pytest.mark.parametrize("name, alpha", [
    ("case118-admm", 1e6), ("case118-atc", 1.1), ("case118-app", 1e6),
    ("case14-admm", 1e4), ("case14-atc", 1.04), ("case14-app", 1e5),
    ("rts_gmlc-admm", 1e7), ("rts_gmlc-atc", 1.3), ("rts_gmlc-app", 1e7),
    ("case300-admm", 1e7), ("case300-atc", 1.2), ("case300-app", 1e7),
    ("wb5-admm", 1e3), ("wb5-atc", 1.5), ("wb5-app", 1e2), ("wb5-admm-text", 1e2),
])
def test_presets(name, alpha):
    assert name in PRESETS
    assert preset(name).alpha == alpha


def test_unknown_preset():
    with pytest.raises(AlgorithmError):
        preset("case9-admm")


def test_relative_gap_examples():
    assert relative_gap(100.0, 100.0) == 0.0
    assert relative_gap(101.0, 100.0) == pytest.approx(0.01, abs=EXACT)
    assert relative_gap(99.0, 100.0) == pytest.approx(0.01, abs=EXACT)
    with pytest.raises(AlgorithmError):
        relative_gap(1.0, 0.0)


# -- multiplier updates as affine maps -------------------------------------------

def test_admm_multiplier_update():
    lam = np.array([1.0, -2.0, 0.5])
    th = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(admm_multiplier_update(lam, th, th, 1e2), lam)
    out = admm_multiplier_update(np.zeros(1), np.array([1e-3]), np.zeros(1), 1e2)
    assert abs(out[0] - 0.1) <= EXACT
    assert admm_multiplier_update(np.zeros(1), np.array([0.1]), np.array([0.2]), 5.0)[0] < 0


def test_atc_multiplier_and_beta_update():
    lam = np.array([0.5, -0.5])
    th = np.array([0.3, 0.1])
    new, beta = atc_multiplier_and_beta_update(lam, th, th, 2.0, 1.5)
    assert np.array_equal(new, lam) and beta == 3.0
    new, _ = atc_multiplier_and_beta_update(lam, th + 1e-3, th, 2.0, 1.5)
    assert np.max(np.abs(new - (lam + 8.0 * 1e-3))) <= EXACT
    _, beta = atc_multiplier_and_beta_update(lam, th, th, 2.0, 1.0)
    assert beta == 2.0


def test_atc_beta_trajectory_is_geometric():
    beta, lam = 1.0, np.zeros(1)
    for k in range(1, 201):
        lam, beta = atc_multiplier_and_beta_update(lam, np.zeros(1), np.zeros(1), beta, 1.1)
        assert abs(beta - 1.1 ** k) <= EXACT * 1.1 ** k
        if k == 10:
            assert beta == pytest.approx(2.5937424601, rel=1e-10)


def test_app_multiplier_update():
    th = np.array([0.2, -0.1])
    assert np.array_equal(app_multiplier_update(np.ones(2), th, th, 7.0), np.ones(2))
    out = app_multiplier_update(np.zeros(1), np.array([1e-3]), np.zeros(1), 1e2)
    assert abs(out[0] - 0.1) <= EXACT
    a, b = np.array([0.31]), np.array([0.27])
    up_a = app_multiplier_update(np.zeros(1), a, b, 3.0)
    up_b = app_multiplier_update(np.zeros(1), b, a, 3.0)
    assert up_a[0] == -up_b[0]


@pytest.mark.parametrize("update", [
    lambda lam, tc, th: admm_multiplier_update(lam, tc, th, 37.0),
    lambda lam, tc, th: atc_multiplier_and_beta_update(lam, tc, th, 1.7, 1.1)[0],
    lambda lam, tc, th: app_multiplier_update(lam, tc, th, 37.0),
])
def test_updates_are_affine(update):
    rng = np.random.default_rng(0)
    x = [rng.normal(size=5) for _ in range(3)]
    y = [rng.normal(size=5) for _ in range(3)]
    a, b = 0.3, 0.7                      # affine combination: a + b = 1
    mixed = update(*(a * u + b * v for u, v in zip(x, y)))
    np.testing.assert_allclose(mixed, a * update(*x) + b * update(*y), rtol=0, atol=EXACT * 100)


# -- coordinator closed forms ------------------------------------------------------

def test_admm_coordinator_examples():
    assert admm_coordinator_update([0.2, 0.4], [0.0, 0.0], 10.0) == pytest.approx(0.3, abs=EXACT)
    a = 50.0
    assert admm_coordinator_update([0.2, 0.4], [a * 0.1, -a * 0.1], a) == pytest.approx(0.3, abs=EXACT)


def test_atc_coordinator_examples():
    assert atc_coordinator_update([0.2, 0.4], [0.0, 0.0], 3.0) == pytest.approx(0.3, abs=EXACT)
    beta = 1.3
    lam = np.array([0.4, 0.2])
    off1 = 0.3 - atc_coordinator_update([0.2, 0.4], lam, beta)
    off2 = 0.3 - atc_coordinator_update([0.2, 0.4], lam * 2.0, beta)
    assert off2 == pytest.approx(2 * off1, rel=1e-12)
    with pytest.raises(AlgorithmError):
        atc_coordinator_update([0.2, 0.4], [0.0, 0.0], 0.0)
    with pytest.raises(AlgorithmError):
        consensus_target(1.0, 2, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_coordinator_closed_forms_match_numeric_minimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    copies = rng.uniform(-0.5, 0.5, n)
    lam = rng.normal(scale=5.0, size=n)
    alpha = float(10 ** rng.uniform(0, 3))
    beta = float(10 ** rng.uniform(0, 1.5))

    def admm_obj(t):
        return float(np.sum(lam * (t - copies) + alpha / 2 * (t - copies) ** 2))

    def atc_obj(t):
        return float(np.sum(lam * (t - copies) + (beta * (t - copies)) ** 2))

    opts = dict(bracket=(-2.0, 2.0), tol=1e-14)
    num_admm = minimize_scalar(admm_obj, **opts).x
    num_atc = minimize_scalar(atc_obj, **opts).x
    assert abs(admm_coordinator_update(copies, lam, alpha) - num_admm) < 1e-8
    assert abs(atc_coordinator_update(copies, lam, beta) - num_atc) < 1e-8


# -- local steps ----------------------------------------------------------------

def _region_oracle(alpha, target, lam, cost=(1.0, 0.0, 0.0), b=10.0, p_max=2.5):
    """Region 1 of the 2-bus split solved with cvxopt: vars (th1, th2, p)."""
    from cvxopt import matrix, solvers
    solvers.options["show_progress"] = False
    solvers.options["abstol"] = 1e-12
    solvers.options["reltol"] = 1e-12
    solvers.options["feastol"] = 1e-12
    P = np.diag([alpha, alpha, 2 * cost[0]])
    q = np.array([-lam[0] - alpha * target[0], -lam[1] - alpha * target[1], cost[1]])
    A = np.array([[-b, b, 1.0], [1.0, 0.0, 0.0]])
    G = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    h = np.array([p_max, 0.0])
    sol = solvers.qp(matrix(P), matrix(q), matrix(G), matrix(h), matrix(A), matrix(np.zeros(2)))
    return np.array(sol["x"]).ravel()


def test_admm_first_step_matches_direct_qp(split2):
    r1 = split2.regions[0]
    x = admm_local_step(QpSequence(r1.qp), r1, np.zeros(2), np.zeros(2), 1e2).x
    # interior-point oracle sits ~3e-7 off the p >= 0 bound
    np.testing.assert_allclose(x, _region_oracle(1e2, [0, 0], [0, 0]), atol=1e-6)


def test_admm_step_with_target_and_multipliers(split2):
    r1 = split2.regions[0]
    tgt, lam = np.array([0.0, -0.08]), np.array([0.0, 3.0])
    x = admm_local_step(QpSequence(r1.qp), r1, tgt, lam, 50.0).x
    np.testing.assert_allclose(x, _region_oracle(50.0, tgt, lam), atol=1e-7)


def test_admm_step_fixed_point(split2):
    r1 = split2.regions[0]
    seq = QpSequence(r1.qp)
    free = admm_local_step(seq, r1, np.zeros(2), np.zeros(2), 1e-9).x
    again = admm_local_step(seq, r1, free[r1.shared_index], np.zeros(2), 1e2).x
    np.testing.assert_allclose(again[r1.shared_index], free[r1.shared_index], atol=1e-9)


def test_penalty_dominance(split2):
    r2 = split2.regions[1]
    tgt = np.array([0.05, -0.05])           # region 2 order: (bus1, bus2)
    x = admm_local_step(QpSequence(r2.qp), r2, tgt, np.zeros(2), 1e12).x
    assert np.max(np.abs(x[r2.shared_index] - tgt)) < 1e-6
    x = atc_local_step(QpSequence(r2.qp), r2, tgt, np.zeros(2), 1e8).x
    assert np.max(np.abs(x[r2.shared_index] - tgt)) < 1e-6
    x = app_local_step(QpSequence(r2.qp), r2, tgt, tgt, np.ones(2), np.zeros(2), 1e12, 5e11).x
    assert np.max(np.abs(x[r2.shared_index] - tgt)) < 1e-6


def test_atc_larger_beta_pulls_closer(split2):
    # region 1 trades generation cost against the target; region 2 has no freedom
    r1 = split2.regions[0]
    tgt = np.array([0.0, -0.3])
    d = []
    for beta in (1.0, 2.0, 4.0):
        x = atc_local_step(QpSequence(r1.qp), r1, tgt, np.zeros(2), beta).x
        d.append(np.linalg.norm(x[r1.shared_index] - tgt))
    assert d[0] > d[1] > d[2]


def test_app_first_step_equals_admm(split2):
    for r in split2.regions:
        a = admm_local_step(QpSequence(r.qp), r, np.zeros(2), np.zeros(2), 40.0).x
        b = app_local_step(QpSequence(r.qp), r, np.zeros(2), np.zeros(2), np.ones(2), np.zeros(2),
                           40.0, 20.0).x
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_app_equal_history_is_proximal_pull(split2):
    r1 = split2.regions[0]
    prev = np.array([0.0, -0.07])
    x = app_local_step(QpSequence(r1.qp), r1, prev, prev, np.ones(2), np.zeros(2), 30.0, 15.0).x
    np.testing.assert_allclose(x, _region_oracle(30.0, prev, [0.0, 0.0]), atol=1e-7)


def test_app_neighbour_centre_differs(split2):
    r1 = split2.regions[0]
    own, nb = np.array([0.0, -0.02]), np.array([0.0, -0.09])
    a = app_local_step(QpSequence(r1.qp), r1, own, nb, np.ones(2), np.zeros(2), 30.0, 15.0, "own").x
    b = app_local_step(QpSequence(r1.qp), r1, own, nb, np.ones(2), np.zeros(2), 30.0, 15.0,
                       "neighbour").x
    # own-centred: pull to own (weight beta) plus gamma (own - nb) linear term
    expect = _region_oracle(30.0, own - 15.0 / 30.0 * (own - nb), [0.0, 0.0])
    np.testing.assert_allclose(a, expect, atol=1e-7)
    assert not np.allclose(a, b)


# -- full runs --------------------------------------------------------------------

@pytest.mark.parametrize("params", [
    AlgorithmParams.admm(1e2), AlgorithmParams.atc(1.1), AlgorithmParams.app(1e2),
], ids=["admm", "atc", "app"])
def test_two_bus_runs_converge(split2, params):
    central = solve_centralized(split2.case).objective
    rec = run_distributed(split2, params, central_objective=central)
    assert rec.converged and rec.relative_gap < 0.01
    assert len(rec.mismatch) == rec.iterations == len(rec.region_objectives)
    assert rec.mismatch[-1] <= params.tolerance
    if params.kind == "admm":
        tail = rec.mismatch[5:]
        assert all(b <= a for a, b in zip(tail, tail[1:]))


def test_zero_iteration_cap(split2):
    rec = run_distributed(split2, AlgorithmParams.admm(1e2, max_iterations=0), central_objective=1.0)
    assert rec.status == "iteration_limit" and rec.iterations == 0 and rec.mismatch == []


def test_subproblem_failure_recorded():
    case = two_bus(limit=0.5)                # load needs 1.0 over a 0.5 line
    m = decompose(case, {1: 1, 2: 2})
    rec = run_distributed(m, AlgorithmParams.admm(1e2), central_objective=1.0)
    assert rec.status == "subproblem_failure" and not rec.success


def test_beta_limit_recorded(case14):
    from distopf.partition import default_partition
    m = decompose(case14, default_partition("case14"))
    rec = run_distributed(m, AlgorithmParams.atc(1.5, beta_cap=1e3), central_objective=1.0)
    assert rec.status == "beta_limit"
    assert rec.iterations == math.ceil(math.log(1e3) / math.log(1.5)) + (1.5 ** math.ceil(
        math.log(1e3) / math.log(1.5)) == 1e3)


def test_consensus_fixed_point(split2):
    """At a tightly converged point one more iteration changes nothing."""
    central = solve_centralized(split2.case).objective
    tight = AlgorithmParams.admm(1e2, tolerance=1e-11, max_iterations=5000)
    rec = run_distributed(split2, tight, central_objective=central)
    assert rec.converged and rec.relative_gap < 1e-8
    more = run_distributed(split2, AlgorithmParams.admm(1e2, tolerance=1e-11, max_iterations=rec.iterations + 1),
                           central_objective=central)
    assert more.iterations == rec.iterations


def test_runs_are_deterministic(case14):
    from distopf.partition import default_partition
    m = decompose(case14, default_partition("case14"))
    ch = ChannelModel.bad_data(0.1, 0.01)
    a = run_distributed(m, preset("case14-admm", max_iterations=60), ch, seed=3, central_objective=1.0)
    b = run_distributed(m, preset("case14-admm", max_iterations=60), ch, seed=3, central_objective=1.0)
    c = run_distributed(m, preset("case14-admm", max_iterations=60), ch, seed=4, central_objective=1.0)
    assert a.mismatch == b.mismatch
    assert a.mismatch != c.mismatch


def test_channel_mapping_with_default(case14):
    from distopf.partition import default_partition
    m = decompose(case14, default_partition("case14"))
    p = preset("case14-admm", max_iterations=30)
    noisy = ChannelModel.gaussian(1e-3)
    one = run_distributed(m, p, {(1, 2): noisy, "default": ChannelModel.ideal()}, seed=1,
                          central_objective=1.0)
    both = run_distributed(m, p, noisy, seed=1, central_objective=1.0)
    ideal = run_distributed(m, p, ChannelModel.ideal(), seed=1, central_objective=1.0)
    assert one.mismatch != both.mismatch and one.mismatch != ideal.mismatch
    with pytest.raises(AlgorithmError):
        run_distributed(m, p, ["nope"], central_objective=1.0)
