"""Centralized DC optimal power flow and the evaluators shared by all metrics.

Variable layout of :func:`build_dc_opf`: bus angles in case bus order, then
outputs of in-service generators in case order.  Equality rows are one power
balance per bus followed by the reference-angle pin; inequality rows are the
two-sided flow limits of in-service branches with a finite rating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .case import NetworkCase, validate_case
from .qp import QpProblem, QpSolution, solve_qp

__all__ = [
    "OpfSolution",
    "OpfLayout",
    "OpfContractError",
    "opf_layout",
    "build_dc_opf",
    "solve_centralized",
    "line_flows",
    "objective_cost",
    "balance_residual",
    "incidence",
]


class OpfContractError(ValueError):
    pass


class OpfLayout(NamedTuple):
    n_theta: int
    gen_positions: tuple[int, ...]   # positions into case.generators, in variable order
    limited_branches: tuple[int, ...]  # branch positions owning an inequality row

    @property
    def n_var(self):
        return self.n_theta + len(self.gen_positions)


@dataclass(frozen=True, eq=False)
class OpfSolution:
    theta: np.ndarray     # radians, one per bus in case order
    p: np.ndarray         # p.u., one per generator in case order (0 when out of service)
    objective: float      # $/h, includes constant cost terms
    status: str
    qp: QpSolution | None = None


def incidence(case: NetworkCase, branches=None) -> np.ndarray:
    """Signed branch-bus incidence (+1 at from bus, -1 at to bus)."""
    if branches is None:
        branches = case.active_branches
    idx = case.bus_index
    C = np.zeros((len(branches), case.n_bus))
    for r, k in enumerate(branches):
        br = case.branches[k]
        C[r, idx[br.from_bus]] += 1.0
        C[r, idx[br.to_bus]] -= 1.0
    return C


def opf_layout(case: NetworkCase) -> OpfLayout:
    limited = tuple(k for k in case.active_branches if np.isfinite(case.branches[k].flow_limit))
    return OpfLayout(case.n_bus, case.active_generators, limited)


def build_dc_opf(case: NetworkCase) -> QpProblem:
    report = validate_case(case)
    if not report.ok:
        raise OpfContractError(f"invalid case: {report.findings[0].message}")
    lay = opf_layout(case)
    nb, gens = lay.n_theta, lay.gen_positions
    n = lay.n_var
    idx = case.bus_index

    C = incidence(case)
    b = np.array([case.branches[k].susceptance for k in case.active_branches])
    Bbus = C.T @ (b[:, None] * C)

    A_eq = np.zeros((nb + 1, n))
    A_eq[:nb, :nb] = -Bbus
    for j, gk in enumerate(gens):
        A_eq[idx[case.generators[gk].bus], nb + j] = 1.0
    A_eq[nb, idx[case.ref_bus]] = 1.0
    b_eq = np.concatenate([case.demand, [0.0]])

    H = np.zeros((n, n))
    g = np.zeros(n)
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for j, gk in enumerate(gens):
        gen = case.generators[gk]
        c2, c1, _ = gen.cost
        H[nb + j, nb + j] = 2.0 * c2
        g[nb + j] = c1
        lb[nb + j] = gen.p_min
        ub[nb + j] = gen.p_max

    pos = {k: r for r, k in enumerate(case.active_branches)}
    A_in = np.zeros((len(lay.limited_branches), n))
    lim = np.zeros(len(lay.limited_branches))
    for r, k in enumerate(lay.limited_branches):
        A_in[r, :nb] = b[pos[k]] * C[pos[k]]
        lim[r] = case.branches[k].flow_limit
    return QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq, A_in=A_in, lb_in=-lim, ub_in=lim,
                     lb=lb, ub=ub)


def solve_centralized(case: NetworkCase, tol: float = 1e-8) -> OpfSolution:
    """Solve the centralized DC-OPF; infeasibility is reported via ``status``."""
    qp = build_dc_opf(case)
    lay = opf_layout(case)
    sol = solve_qp(qp, tol=tol)
    theta = sol.x[:lay.n_theta].copy()
    theta -= theta[case.bus_index[case.ref_bus]]  # exact pin; flows are unchanged
    p = np.zeros(len(case.generators))
    p[list(lay.gen_positions)] = sol.x[lay.n_theta:]
    obj = objective_cost(case, p) if sol.status == "optimal" else float("nan")
    return OpfSolution(theta, p, obj, sol.status, sol)


def line_flows(case: NetworkCase, theta) -> np.ndarray:
    """B_ij (theta_i - theta_j) per branch, in case branch order; 0 when out of service."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (case.n_bus,):
        raise OpfContractError(f"theta has shape {theta.shape}, expected ({case.n_bus},)")
    idx = case.bus_index
    out = np.zeros(len(case.branches))
    for k, br in enumerate(case.branches):
        if br.in_service:
            out[k] = br.susceptance * (theta[idx[br.from_bus]] - theta[idx[br.to_bus]])
    return out


def objective_cost(case: NetworkCase, p) -> float:
    """Total generation cost sum(c2 p^2 + c1 p + c0) over in-service units."""
    p = np.asarray(p, dtype=float)
    if p.shape != (len(case.generators),):
        raise OpfContractError(f"p has shape {p.shape}, expected ({len(case.generators)},)")
    total = 0.0
    for k in case.active_generators:
        c2, c1, c0 = case.generators[k].cost
        total += (c2 * p[k] + c1) * p[k] + c0
    return float(total)


def balance_residual(case: NetworkCase, theta, p) -> np.ndarray:
    """Per-bus mismatch of generation - demand - net outflow (p.u.)."""
    flows = line_flows(case, theta)
    idx = case.bus_index
    r = -case.demand.copy()
    for k in case.active_generators:
        r[idx[case.generators[k].bus]] += p[k]
    for k, br in enumerate(case.branches):
        r[idx[br.from_bus]] -= flows[k]
        r[idx[br.to_bus]] += flows[k]
    return r
