"""Dense convex quadratic programming by a primal active-set method.

Problem form::

    minimize    1/2 x'Hx + g'x
    subject to  A_eq x = b_eq
                lb_in <= A_in x <= ub_in
                lb <= x <= ub

H only needs to be positive semidefinite.  Zero-curvature directions are
handled by stepping along them until a constraint blocks, so linear costs are
fine.  A feasible starting point comes from a phase-1 LP (HiGHS); after that
every iterate stays feasible.

Sign convention for multipliers (all reported with :class:`QpSolution`)::

    H x + g - A_eq' y_eq - A_in' z_in - z_bnd = 0

with z >= 0 on an active lower side and z <= 0 on an active upper side.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "QpProblem",
    "QpSolution",
    "KktResiduals",
    "QpContractError",
    "solve_qp",
    "kkt_residuals",
    "DEFAULT_TOL",
    "QpSequence",
]

DEFAULT_TOL = 1e-8
_PSD_TOL = 1e-10

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"
UNBOUNDED = "unbounded"


class QpContractError(ValueError):
    """Raised for malformed problems (bad dimensions, non-PSD Hessian, ...)."""


def _vec(v, n, name, fill=None):
    if v is None:
        if fill is None:
            return np.zeros(n)
        return np.full(n, fill, dtype=float)
    a = np.array(v, dtype=float).reshape(-1)
    if a.shape[0] != n:
        raise QpContractError(f"{name} has length {a.shape[0]}, expected {n}")
    return a


def _mat(m, cols, name):
    if m is None:
        return np.zeros((0, cols))
    a = np.array(m, dtype=float)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, cols)
    if a.ndim != 2 or a.shape[1] != cols:
        raise QpContractError(f"{name} has shape {a.shape}, expected (*, {cols})")
    return a


@dataclass(frozen=True, eq=False)
class QpProblem:
    """Immutable convex QP.  Arrays are copied and made read-only."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self):
        H = np.array(self.H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise QpContractError(f"H must be square, got shape {H.shape}")
        n = H.shape[0]
        g = _vec(self.g, n, "g")
        A_eq = _mat(self.A_eq, n, "A_eq")
        b_eq = _vec(self.b_eq, A_eq.shape[0], "b_eq")
        A_in = _mat(self.A_in, n, "A_in")
        lb_in = _vec(self.lb_in, A_in.shape[0], "lb_in", -np.inf)
        ub_in = _vec(self.ub_in, A_in.shape[0], "ub_in", np.inf)
        lb = _vec(self.lb, n, "lb", -np.inf)
        ub = _vec(self.ub, n, "ub", np.inf)
        for name, arr in (("H", H), ("g", g), ("A_eq", A_eq), ("b_eq", b_eq), ("A_in", A_in)):
            if not np.all(np.isfinite(arr)):
                raise QpContractError(f"{name} contains non-finite entries")
        for name, arr in (("lb_in", lb_in), ("ub_in", ub_in), ("lb", lb), ("ub", ub)):
            if np.any(np.isnan(arr)):
                raise QpContractError(f"{name} contains NaN")
        if np.any(lb > ub):
            raise QpContractError("lb > ub for some variable")
        if np.any(lb_in > ub_in):
            raise QpContractError("lb_in > ub_in for some row")
        scale = max(1.0, float(np.max(np.abs(H), initial=0.0)))
        if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * scale):
            raise QpContractError("H is not symmetric")
        if self.check_psd and n:
            offdiag = H - np.diag(np.diag(H))
            if not offdiag.any():
                min_eig = float(np.min(np.diag(H)))
            else:
                min_eig = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
            if min_eig < -_PSD_TOL * scale:
                raise QpContractError(f"H is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        for name, arr in (("H", H), ("g", g), ("A_eq", A_eq), ("b_eq", b_eq), ("A_in", A_in),
                          ("lb_in", lb_in), ("ub_in", ub_in), ("lb", lb), ("ub", ub)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @cached_property
    def workspace(self) -> "_Workspace":
        return _Workspace(self)

    def with_objective(self, H, g, check_psd: bool | None = None) -> "QpProblem":
        """Same constraints, new objective; shares the factorization cache."""
        new = QpProblem(H, g, self.A_eq, self.b_eq, self.A_in, self.lb_in, self.ub_in,
                        self.lb, self.ub,
                        check_psd=self.check_psd if check_psd is None else check_psd)
        new.__dict__["workspace"] = self.workspace
        return new


@dataclass(frozen=True, eq=False)
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    z_bnd: np.ndarray
    status: str
    kkt_residual: float
    iterations: int = 0
    working_set: tuple = ()
    certificate: float | None = None  # minimum total constraint violation when infeasible

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def objective(self, p: QpProblem) -> float:
        x = self.x
        return float(0.5 * x @ p.H @ x + p.g @ x)


class KktResiduals(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float


def kkt_residuals(p: QpProblem, s: QpSolution) -> KktResiduals:
    """Absolute KKT residuals (infinity norms) of ``s`` for ``p``.

    Evaluated directly from the problem data; nothing from the solve path is
    reused.  Complementarity also absorbs multiplier sign violations.
    """
    x, y, z_in, z_b = (np.asarray(a, dtype=float) for a in (s.x, s.y_eq, s.z_in, s.z_bnd))
    if x.shape != (p.n,) or y.shape != (p.A_eq.shape[0],) or z_in.shape != (p.A_in.shape[0],) \
            or z_b.shape != (p.n,):
        raise QpContractError("solution dimensions do not match problem")
    r = p.H @ x + p.g - p.A_eq.T @ y - p.A_in.T @ z_in - z_b
    stat = float(np.max(np.abs(r), initial=0.0))

    ax = p.A_in @ x
    viol = [np.abs(p.A_eq @ x - p.b_eq),
            np.maximum(p.lb_in - ax, 0.0), np.maximum(ax - p.ub_in, 0.0),
            np.maximum(p.lb - x, 0.0), np.maximum(x - p.ub, 0.0)]
    feas = float(max((np.max(v, initial=0.0) for v in viol), default=0.0))

    def comp(z, val, lo, hi):
        # a positive z needs a finite active lower side, a negative z an upper side
        out = 0.0
        for mask, bound in ((z > 0, lo), (z < 0, hi)):
            if mask.any():
                zz, bb, vv = np.abs(z[mask]), bound[mask], val[mask]
                gap = np.where(np.isfinite(bb), np.abs(vv - np.where(np.isfinite(bb), bb, 0.0)), np.inf)
                out = max(out, float(np.max(np.where(np.isfinite(gap), zz * gap, zz))))
        return out

    cmp = max(comp(z_in, ax, p.lb_in, p.ub_in), comp(z_b, x, p.lb, p.ub))
    return KktResiduals(stat, feas, cmp)


def _scaled_residual(p: QpProblem, s: QpSolution, res: KktResiduals) -> float:
    x = s.x
    stat_scale = max(1.0, *(float(np.max(np.abs(v), initial=0.0)) for v in (
        p.H @ x, p.g, p.A_eq.T @ s.y_eq, p.A_in.T @ s.z_in, s.z_bnd)))
    finite = [np.abs(b[np.isfinite(b)]) for b in (p.b_eq, p.lb_in, p.ub_in, p.lb, p.ub)]
    feas_scale = max(1.0, float(np.max(np.abs(x), initial=0.0)),
                     float(np.max(np.abs(p.A_in @ x), initial=0.0)),
                     *(float(np.max(f, initial=0.0)) for f in finite))
    return max(res.stationarity / stat_scale, res.feasibility / feas_scale,
               res.complementarity / (stat_scale * feas_scale))


class _WCache(NamedTuple):
    A: np.ndarray      # working-set rows
    b: np.ndarray
    Z: np.ndarray      # null-space basis of A
    xp: np.ndarray     # minimum-norm particular solution of A x = b
    pinvT: np.ndarray  # maps a gradient to least-squares multipliers


class _Workspace:
    """Constraint data in solver form plus per-working-set factorizations.

    Inequalities (including finite variable bounds) are rows ``C`` with
    ``lo <= C x <= hi``.  Rows with ``lo == hi`` become equalities.  A working
    set is a sorted tuple of ``(row, side)`` with side +1 (lower) or -1 (upper).
    """

    def __init__(self, p: QpProblem, cache_size: int = 64):
        n = p.n
        self.n = n
        self.m_eq = p.A_eq.shape[0]
        self.m_in = p.A_in.shape[0]
        eye = np.eye(n)
        C = np.vstack([p.A_in, eye]) if n else np.zeros((self.m_in, 0))
        lo = np.concatenate([p.lb_in, p.lb])
        hi = np.concatenate([p.ub_in, p.ub])
        keep = ~(np.isneginf(lo) & np.isposinf(hi))
        fixed = keep & (lo == hi)
        self.fixed_rows = np.flatnonzero(fixed)
        self.ineq_rows = np.flatnonzero(keep & ~fixed)
        self.C, self.lo, self.hi = C, lo, hi
        self.E = np.vstack([p.A_eq, C[self.fixed_rows]])
        self.e = np.concatenate([p.b_eq, lo[self.fixed_rows]])
        self.Ci = C[self.ineq_rows]
        self.loi = lo[self.ineq_rows]
        self.hii = hi[self.ineq_rows]
        self.has_lo = np.isfinite(self.loi)
        self.has_hi = np.isfinite(self.hii)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._feasible_x = None
        self._phase1_done = False
        self._phase1_violation = None
        self.p = p

    # -- working set factorizations ---------------------------------------
    def factor(self, W) -> _WCache:
        hit = self._cache.get(W)
        if hit is not None:
            self._cache.move_to_end(W)
            return hit
        rows = [self.E]
        rhs = [self.e]
        if W:
            idx = np.fromiter((k for k, _ in W), dtype=int, count=len(W))
            sgn = np.fromiter((s for _, s in W), dtype=float, count=len(W))
            rows.append(self.Ci[idx] * sgn[:, None])
            rhs.append(np.where(sgn > 0, self.loi[idx], -self.hii[idx]))
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        n = self.n
        if A.shape[0] == 0:
            entry = _WCache(A, b, np.eye(n), np.zeros(n), np.zeros((0, n)))
        else:
            U, S, Vt = np.linalg.svd(A, full_matrices=True)
            tol = max(A.shape) * np.finfo(float).eps * (S[0] if S.size else 0.0)
            rank = int(np.sum(S > tol))
            Ur, Sr, Vr = U[:, :rank], S[:rank], Vt[:rank]
            Z = Vt[rank:].T.copy()
            xp = Vr.T @ ((Ur.T @ b) / Sr)
            pinvT = (Ur / Sr) @ Vr
            entry = _WCache(A, b, Z, xp, pinvT)
        self._cache[W] = entry
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return entry

    # -- phase 1 ------------------------------------------------------------
    def feasible_point(self):
        """A point satisfying all constraints, or None (cached)."""
        if self._phase1_done:
            return self._feasible_x
        p, n = self.p, self.n
        bounds = list(zip(np.where(np.isfinite(p.lb), p.lb, None),
                          np.where(np.isfinite(p.ub), p.ub, None)))
        A_ub_rows, b_ub = [], []
        fin_hi, fin_lo = np.isfinite(p.ub_in), np.isfinite(p.lb_in)
        if fin_hi.any():
            A_ub_rows.append(p.A_in[fin_hi])
            b_ub.append(p.ub_in[fin_hi])
        if fin_lo.any():
            A_ub_rows.append(-p.A_in[fin_lo])
            b_ub.append(-p.lb_in[fin_lo])
        A_ub = np.vstack(A_ub_rows) if A_ub_rows else None
        b_ub = np.concatenate(b_ub) if b_ub else None
        A_eq = p.A_eq if p.A_eq.shape[0] else None
        b_eq = p.b_eq if p.A_eq.shape[0] else None
        res = linprog(np.zeros(n), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=bounds, method="highs")
        self._phase1_done = True
        if res.status == 0:
            x = np.clip(np.asarray(res.x, dtype=float), p.lb, p.ub)
            self._feasible_x = x
        else:
            self._feasible_x = None
            self._phase1_violation = self._elastic(A_ub, b_ub, A_eq, b_eq, bounds)
        return self._feasible_x

    def _elastic(self, A_ub, b_ub, A_eq, b_eq, bounds):
        # minimize total violation of the general rows, variable bounds kept hard
        n = self.n
        m_ub = 0 if A_ub is None else A_ub.shape[0]
        m_eq = 0 if A_eq is None else A_eq.shape[0]
        nv = n + m_ub + 2 * m_eq
        c = np.concatenate([np.zeros(n), np.ones(nv - n)])
        Aub = None
        if m_ub:
            Aub = np.hstack([A_ub, -np.eye(m_ub), np.zeros((m_ub, 2 * m_eq))])
        Aeq = None
        if m_eq:
            Aeq = np.hstack([A_eq, np.zeros((m_eq, m_ub)), np.eye(m_eq), -np.eye(m_eq)])
        bnds = list(bounds) + [(0, None)] * (nv - n)
        res = linprog(c, A_ub=Aub, b_ub=b_ub, A_eq=Aeq, b_eq=b_eq, bounds=bnds, method="highs")
        if res.status == 0:
            self._elastic_x = np.asarray(res.x[:n], dtype=float)
            return float(res.fun)
        self._elastic_x = None
        return float("inf")

    # -- main loop ----------------------------------------------------------
    def is_feasible(self, x, tol):
        scale = 1.0 + np.abs(x).max(initial=0.0)
        if self.E.shape[0] and np.max(np.abs(self.E @ x - self.e)) > tol * scale:
            return False
        if self.Ci.shape[0]:
            cx = self.Ci @ x
            if np.any(cx < self.loi - tol * (1 + np.abs(self.loi))) or \
                    np.any(cx > self.hii + tol * (1 + np.abs(self.hii))):
                return False
        return True

    def eqp(self, W, H, g):
        """Minimizer over the affine set of W, or None if not strictly convex there."""
        f = self.factor(W)
        Z = f.Z
        if Z.shape[1] == 0:
            return f.xp, f
        Hr = Z.T @ H @ Z
        rhs = -(Z.T @ (H @ f.xp + g))
        try:
            L = np.linalg.cholesky(Hr)
        except np.linalg.LinAlgError:
            return None, f
        d = np.diag(L)
        if d.min() <= 1e-7 * max(d.max(), 1e-300):
            return None, f
        u = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        return f.xp + Z @ u, f

    def multipliers(self, f, grad):
        mu = f.pinvT @ grad
        return mu

    def try_working_set(self, W, H, g, tol):
        """Guess-and-verify: is the EQP solution on W a KKT point?"""
        x, f = self.eqp(W, H, g)
        if x is None or not self.is_feasible(x, tol):
            return None
        grad = H @ x + g
        mu = self.multipliers(f, grad)
        m_e = self.E.shape[0]
        mu_tol = tol * max(1.0, float(np.max(np.abs(grad), initial=0.0)))
        if W and np.min(mu[m_e:]) < -mu_tol:
            return None
        return x, mu, f

    def iterate(self, x, W, H, g, tol, max_iter):
        n = self.n
        m_e = self.E.shape[0]
        Ci, loi, hii = self.Ci, self.loi, self.hii
        W = list(W)
        in_W = {k for k, _ in W}
        it = 0
        while it < max_iter:
            it += 1
            key = tuple(sorted(W))
            f = self.factor(key)
            grad = H @ x + g
            gscale = max(1.0, float(np.max(np.abs(grad), initial=0.0)))
            Z = f.Z
            ray = False
            if Z.shape[1] == 0:
                d = np.zeros(n)
            else:
                Hr = Z.T @ H @ Z
                gr = Z.T @ grad
                w, V = np.linalg.eigh(0.5 * (Hr + Hr.T))
                wmax = max(float(w.max()), 0.0)
                flat = w <= 1e-11 * max(wmax, 1e-300) if wmax > 0 else np.ones_like(w, dtype=bool)
                Vf = V[:, flat]
                u0 = Vf @ (Vf.T @ gr)
                if np.max(np.abs(u0), initial=0.0) > 1e-11 * gscale:
                    d = -(Z @ u0)
                    ray = True
                else:
                    Vc = V[:, ~flat]
                    d = -(Z @ (Vc @ ((Vc.T @ gr) / w[~flat])))
            xscale = 1.0 + float(np.max(np.abs(x), initial=0.0))
            if not ray and np.max(np.abs(d), initial=0.0) <= 1e-13 * xscale:
                mu = f.pinvT @ grad
                if not W:
                    return x, key, mu, f, it, OPTIMAL
                ineq = mu[m_e:]
                # order in f.A follows the sorted key
                j = int(np.argmin(ineq))
                if ineq[j] >= -tol * gscale:
                    return x, key, mu, f, it, OPTIMAL
                drop = key[j]
                W.remove(drop)
                in_W.discard(drop[0])
                continue
            # ratio test
            cd = Ci @ d
            cx = Ci @ x
            t_best = np.inf if ray else 1.0
            block = None
            if cd.size:
                cand = np.ones(cd.size, dtype=bool)
                if in_W:
                    cand[list(in_W)] = False
                dn = max(float(np.max(np.abs(d))), 1e-300)
                neg = cand & self.has_lo & (cd < -1e-12 * dn * (1 + np.abs(Ci).max(axis=1, initial=0)))
                pos = cand & self.has_hi & (cd > 1e-12 * dn * (1 + np.abs(Ci).max(axis=1, initial=0)))
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_lo = np.where(neg, np.maximum(cx - loi, 0.0) / -cd, np.inf)
                    t_hi = np.where(pos, np.maximum(hii - cx, 0.0) / cd, np.inf)
                k_lo = int(np.argmin(t_lo))
                k_hi = int(np.argmin(t_hi))
                if t_lo[k_lo] <= t_hi[k_hi]:
                    if t_lo[k_lo] < t_best:
                        t_best, block = float(t_lo[k_lo]), (k_lo, 1)
                else:
                    if t_hi[k_hi] < t_best:
                        t_best, block = float(t_hi[k_hi]), (k_hi, -1)
            if not np.isfinite(t_best):
                return x, key, None, f, it, UNBOUNDED
            x = x + t_best * d
            if block is not None:
                k, s = block
                # land exactly on the blocking bound
                if s > 0 and Ci[k].nonzero()[0].size == 1:
                    j = int(Ci[k].nonzero()[0][0])
                    x[j] = loi[k] / Ci[k, j]
                elif s < 0 and Ci[k].nonzero()[0].size == 1:
                    j = int(Ci[k].nonzero()[0][0])
                    x[j] = hii[k] / Ci[k, j]
                W.append(block)
                in_W.add(k)
        key = tuple(sorted(W))
        f = self.factor(key)
        return x, key, f.pinvT @ (H @ x + g), f, it, ITERATION_LIMIT

    def unpack(self, key, mu):
        """Split working-set multipliers into (y_eq, z_in, z_bnd)."""
        p = self.p
        n, m_in = self.n, self.m_in
        y_eq = np.zeros(self.m_eq)
        z_all = np.zeros(m_in + n)
        if mu is None:
            return y_eq, z_all[:m_in], z_all[m_in:]
        y_eq[:] = mu[:self.m_eq]
        z_all[self.fixed_rows] = mu[self.m_eq:self.E.shape[0]]
        off = self.E.shape[0]
        for j, (k, s) in enumerate(key):
            z_all[self.ineq_rows[k]] = s * mu[off + j]
        del p
        return y_eq, z_all[:m_in], z_all[m_in:]


def solve_qp(p: QpProblem, tol: float = DEFAULT_TOL, warm_start: QpSolution | None = None,
             max_iter: int | None = None) -> QpSolution:
    """Solve ``p`` to KKT tolerance ``tol`` (relative, infinity norm).

    ``warm_start`` may be any earlier solution of a problem with the same
    constraints; it only changes how fast the optimum is found.
    """
    if not tol > 0:
        raise QpContractError("tol must be positive")
    ws = p.workspace
    n = p.n
    if max_iter is None:
        max_iter = 10 * (n + ws.Ci.shape[0]) + 50
    H, g = p.H, p.g

    if warm_start is not None and warm_start.status == OPTIMAL and warm_start.x.shape == (n,):
        key = tuple(warm_start.working_set)
        if all(0 <= k < ws.Ci.shape[0] for k, _ in key):
            hit = ws.try_working_set(key, H, g, tol)
            if hit is not None:
                x, mu, f = hit
                sol = _finish(p, ws, x, key, mu, OPTIMAL, 1, tol)
                if sol.status == OPTIMAL:
                    return sol
            x0 = np.array(warm_start.x, dtype=float)
            if ws.is_feasible(x0, tol) and _consistent(ws, key, x0, tol):
                x, key, mu, f, it, status = ws.iterate(x0, key, H, g, tol, max_iter)
                sol = _finish(p, ws, x, key, mu, status, it, tol)
                if sol.status == OPTIMAL:
                    return sol

    x0 = ws.feasible_point()
    if x0 is None:
        x = getattr(ws, "_elastic_x", None)
        if x is None:
            x = np.zeros(n)
        y, zi, zb = ws.unpack((), None)
        res_sol = QpSolution(x, y, zi, zb, INFEASIBLE, float("inf"), 0, (), ws._phase1_violation)
        return res_sol
    x, key, mu, f, it, status = ws.iterate(x0.copy(), (), H, g, tol, max_iter)
    return _finish(p, ws, x, key, mu, status, it, tol)


def _consistent(ws, key, x, tol):
    if not key:
        return True
    f = ws.factor(key)
    r = f.A @ x - f.b
    return float(np.max(np.abs(r))) <= tol * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def _finish(p, ws, x, key, mu, status, it, tol):
    y, zi, zb = ws.unpack(key, mu)
    sol = QpSolution(x, y, zi, zb, status, float("inf"), it, key)
    if status != OPTIMAL:
        return sol
    res = kkt_residuals(p, sol)
    r = _scaled_residual(p, sol, res)
    if r > tol:
        # polish: re-solve the equality problem on the final working set
        f = ws.factor(key)
        xe, _ = ws.eqp(key, p.H, p.g)
        if xe is not None and ws.is_feasible(xe, tol):
            mu2 = f.pinvT @ (p.H @ xe + p.g)
            y2, zi2, zb2 = ws.unpack(key, mu2)
            sol2 = QpSolution(xe, y2, zi2, zb2, status, 0.0, it, key)
            r2 = _scaled_residual(p, sol2, kkt_residuals(p, sol2))
            if r2 < r:
                sol, r = sol2, r2
    if r > tol:
        return QpSolution(sol.x, sol.y_eq, sol.z_in, sol.z_bnd, ITERATION_LIMIT, r, it, key)
    return QpSolution(sol.x, sol.y_eq, sol.z_in, sol.z_bnd, OPTIMAL, r, it, key)


class _Affine(NamedTuple):
    Mx: np.ndarray     # x = Mx g + cx
    cx: np.ndarray
    Mm: np.ndarray     # working-set multipliers = Mm g + cm
    cm: np.ndarray
    H: np.ndarray
    AT: np.ndarray     # transposed working-set rows
    A: np.ndarray
    b: np.ndarray


class QpSequence:
    """Repeated solves over one constraint set with ``H = H0 + diag(shift)``.

    Iterative schemes re-solve the same regional problem with a new linear
    term every iteration (and, for growing penalties, a new diagonal shift).
    The last optimal working set is tried first; for a fixed working set and
    shift the solution is affine in ``g``, and that map is cached once it has
    been needed twice.  Any guess that fails the KKT check at ``tol`` falls
    back to :func:`solve_qp`, so results never depend on the cache beyond
    rounding.
    """

    def __init__(self, base: QpProblem, tol: float = DEFAULT_TOL, cache_size: int = 32):
        if not tol > 0:
            raise QpContractError("tol must be positive")
        self.base = base
        self.tol = tol
        ws = self.ws = base.workspace
        self.last: QpSolution | None = None
        self._maps: OrderedDict = OrderedDict()
        self._seen: dict = {}
        self._cache_size = cache_size
        self._hess: dict = {}
        self.fast_hits = 0
        self.full_solves = 0
        self._m_e = ws.E.shape[0]
        # bounds widened by the feasibility tolerance used in is_feasible
        self._lo_t = ws.loi - tol * (1 + np.abs(ws.loi))
        self._hi_t = ws.hii + tol * (1 + np.abs(ws.hii))
        self._has_rows = ws.Ci.shape[0] > 0

    def _hessian(self, shift, skey):
        if shift is None:
            return self.base.H
        H = self._hess.get(skey)
        if H is None:
            H = np.array(self.base.H)
            H[np.diag_indices_from(H)] += shift
            if len(self._hess) > 4:
                self._hess.clear()
            self._hess[skey] = H
        return H

    def _affine(self, key, H):
        ws = self.ws
        f = ws.factor(key)
        n = ws.n
        Z = f.Z
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            try:
                L = np.linalg.cholesky(Hr)
            except np.linalg.LinAlgError:
                return None
            d = np.diag(L)
            if d.min() <= 1e-7 * max(d.max(), 1e-300):
                return None
            Ri = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(Z.shape[1])))
            P = Z @ Ri @ Z.T
            Mx = -P
            cx = f.xp - P @ (H @ f.xp)
        else:
            Mx = np.zeros((n, n))
            cx = f.xp.copy()
        Mm = f.pinvT @ (H @ Mx + np.eye(n))
        cm = f.pinvT @ (H @ cx)
        return _Affine(Mx, cx, Mm, cm, H, np.ascontiguousarray(f.A.T), f.A, f.b)

    def _check(self, H, AT, A, b, g, x, mu):
        """Scaled KKT residual of a working-set guess, or None if it is not a KKT point."""
        tol, m_e = self.tol, self._m_e
        if self._has_rows:
            cx = self.ws.Ci @ x
            if (cx < self._lo_t).any() or (cx > self._hi_t).any():
                return None
            feas = max(0.0, (self.ws.loi - cx).max(), (cx - self.ws.hii).max())
        else:
            feas = 0.0
        grad = H @ x + g
        gscale = max(1.0, np.abs(grad).max()) if grad.size else 1.0
        ineq = mu[m_e:]
        if ineq.size and ineq.min() < -tol * gscale:
            return None
        stat = np.abs(grad - AT @ mu).max() if grad.size else 0.0
        res = A @ x - b if A.shape[0] else np.zeros(0)
        if m_e:
            feas = max(feas, np.abs(res[:m_e]).max())
        comp = np.abs(ineq * res[m_e:]).max() if ineq.size else 0.0
        xs = max(1.0, np.abs(x).max()) if x.size else 1.0
        r = float(max(stat / gscale, feas / xs, comp / (gscale * xs)))
        return r if r <= tol else None

    def _pack(self, x, mu, key, r):
        ws = self.ws
        y = mu[:ws.m_eq]
        z_all = np.zeros(ws.m_in + ws.n)
        if ws.fixed_rows.size:
            z_all[ws.fixed_rows] = mu[ws.m_eq:self._m_e]
        if key:
            rows = np.fromiter((ws.ineq_rows[k] for k, _ in key), dtype=int, count=len(key))
            sides = np.fromiter((s for _, s in key), dtype=float, count=len(key))
            z_all[rows] = sides * mu[self._m_e:]
        return QpSolution(x, y, z_all[:ws.m_in], z_all[ws.m_in:], OPTIMAL, r, 1, key)

    def solve(self, g, shift=None) -> QpSolution:
        g = np.asarray(g, dtype=float)
        sb = None if shift is None else shift.tobytes()
        H = self._hessian(shift, sb)
        last = self.last
        if last is not None and last.status == OPTIMAL:
            key = last.working_set
            skey = (key, sb)
            amap = self._maps.get(skey)
            if amap is None and self._seen.get(skey, 0) >= 1:
                amap = self._affine(key, H)
                if amap is not None:
                    self._maps[skey] = amap
                    if len(self._maps) > self._cache_size:
                        self._maps.popitem(last=False)
            else:
                if len(self._seen) > 4 * self._cache_size:
                    self._seen.clear()
                self._seen[skey] = self._seen.get(skey, 0) + 1
            if amap is not None:
                x = amap.Mx @ g + amap.cx
                mu = amap.Mm @ g + amap.cm
                r = self._check(H, amap.AT, amap.A, amap.b, g, x, mu)
                if r is not None:
                    self.fast_hits += 1
                    self.last = self._pack(x, mu, key, r)
                    return self.last
            else:
                hit = self.ws.try_working_set(key, H, g, self.tol)
                if hit is not None:
                    x, mu, f = hit
                    r = self._check(H, f.A.T, f.A, f.b, g, x, mu)
                    if r is not None:
                        self.fast_hits += 1
                        self.last = self._pack(x, mu, key, r)
                        return self.last
        self.full_solves += 1
        prob = self.base.with_objective(H, g, check_psd=False)
        sol = solve_qp(prob, self.tol, warm_start=last)
        self.last = sol
        return sol
