"""Regional decomposition by tie-line duplication.

For every tie line (i, j) with i in region a and j in region b, both regions
receive a copy of both endpoint angles.  A copy of a foreign bus is a
*phantom*: it carries an angle only, with no demand, no generation and no
balance row, so the balance equations of different regions stay disjoint.
A bus that ends several tie lines is still held once per region.

Local variable layout of a region: own bus angles (case order), phantom
angles (ascending bus id), then outputs of its in-service generators.
"""
from __future__ import annotations

import sys
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .case import NetworkCase, validate_case
from .opf import OpfSolution, balance_residual, objective_cost
from .qp import QpProblem

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "PartitionError",
    "RegionAssignment",
    "SharedVariable",
    "Region",
    "PartitionedModel",
    "decompose",
    "consistency_mismatch",
    "assemble_global",
    "load_partition",
    "default_partition",
    "BUNDLED_PARTITIONS",
]

BUNDLED_PARTITIONS = ("case14", "case118", "case300", "rts_gmlc")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionAssignment:
    """Map of bus id to region id."""

    regions: Mapping[int, int]

    def __post_init__(self):
        object.__setattr__(self, "regions", {int(b): int(r) for b, r in dict(self.regions).items()})

    @property
    def region_ids(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.regions.values())))

    def buses_of(self, region: int) -> list[int]:
        return sorted(b for b, r in self.regions.items() if r == region)

    @classmethod
    def from_groups(cls, groups: Mapping[int, Sequence[int]]) -> "RegionAssignment":
        out = {}
        for r, buses in groups.items():
            for b in buses:
                if b in out:
                    raise PartitionError(f"bus {b} assigned to regions {out[b]} and {r}")
                out[b] = r
        return cls(out)


def load_partition(path) -> RegionAssignment:
    """Read a partition file.

    The file is TOML with a ``[regions]`` table whose keys are region ids and
    whose values are lists of bus ids::

        [regions]
        "1" = [1, 2, 3]
        "2" = [4, 5]
    """
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise PartitionError(f"{path}: {exc}") from None
    groups = data.get("regions")
    if not isinstance(groups, dict) or not groups:
        raise PartitionError(f"{path}: missing [regions] table")
    parsed = {}
    for key, buses in groups.items():
        try:
            rid = int(key)
        except ValueError:
            raise PartitionError(f"{path}: region id {key!r} is not an integer") from None
        if not isinstance(buses, list) or not all(isinstance(b, int) for b in buses):
            raise PartitionError(f"{path}: region {key} must list integer bus ids")
        parsed[rid] = buses
    return RegionAssignment.from_groups(parsed)


def default_partition(name: str) -> RegionAssignment:
    if name not in BUNDLED_PARTITIONS:
        raise KeyError(f"no bundled partition for {name!r}")
    return load_partition(Path(str(resources.files("distopf") / "data" / "partitions" / f"{name}.toml")))


@dataclass(frozen=True)
class SharedVariable:
    """One shared bus angle and where each region keeps its copy."""

    bus: int
    owner: int
    tie_lines: tuple[int, ...]                 # branch positions ending at this bus
    copies: tuple[tuple[int, int], ...]        # (region id, local angle index), sorted by region

    @property
    def holders(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.copies)


@dataclass(frozen=True, eq=False)
class Region:
    id: int
    own_buses: tuple[int, ...]
    phantom_buses: tuple[int, ...]
    gen_positions: tuple[int, ...]             # into case.generators (in-service only)
    branch_positions: tuple[int, ...]          # internal + tie lines, in-service only
    shared_buses: tuple[int, ...]              # ascending bus id
    shared_index: np.ndarray                   # local angle index of each shared bus
    has_ref: bool
    qp: QpProblem                              # local DC-OPF without consensus terms
    cost_constant: float

    @property
    def n_theta(self) -> int:
        return len(self.own_buses) + len(self.phantom_buses)

    @cached_property
    def local_index(self) -> dict[int, int]:
        return {b: k for k, b in enumerate(self.own_buses + self.phantom_buses)}

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        return x[:self.n_theta], x[self.n_theta:]


@dataclass(frozen=True, eq=False)
class PartitionedModel:
    case: NetworkCase
    assignment: RegionAssignment
    regions: tuple[Region, ...]
    registry: tuple[SharedVariable, ...]       # one entry per shared bus, ascending bus id
    tie_lines: tuple[int, ...]
    ref_region: int

    @cached_property
    def region_by_id(self) -> dict[int, Region]:
        return {r.id: r for r in self.regions}

    @cached_property
    def position(self) -> dict[int, int]:
        return {r.id: k for k, r in enumerate(self.regions)}

    @property
    def n_copies(self) -> int:
        return sum(len(s.copies) for s in self.registry)

    @cached_property
    def neighbours(self) -> dict[int, tuple[int, ...]]:
        out = defaultdict(set)
        for s in self.registry:
            for a in s.holders:
                out[a].update(h for h in s.holders if h != a)
        return {r.id: tuple(sorted(out[r.id])) for r in self.regions}

    @cached_property
    def link_buses(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """Shared buses carried on each directed link (sender, receiver)."""
        out = defaultdict(list)
        for s in self.registry:
            for a in s.holders:
                for b in s.holders:
                    if a != b:
                        out[(a, b)].append(s.bus)
        return {k: tuple(v) for k, v in sorted(out.items())}


def _check_assignment(case: NetworkCase, assign: RegionAssignment):
    ids = {b.id for b in case.buses}
    unknown = sorted(set(assign.regions) - ids)
    if unknown:
        raise PartitionError(f"partition names unknown bus {unknown[0]}")
    missing = sorted(ids - set(assign.regions))
    if missing:
        raise PartitionError(f"bus {missing[0]} is not assigned to a region")
    if len(assign.region_ids) < 2:
        raise PartitionError("a partition needs at least two regions")


def _components(nodes, edges):
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for u, v in edges:
        parent[find(u)] = find(v)
    groups = defaultdict(set)
    for n in nodes:
        groups[find(n)].add(n)
    return list(groups.values())


def _region_qp(case, own, phantom, gens, branches, has_ref):
    idx = {b: k for k, b in enumerate(own + phantom)}
    nt, ng = len(idx), len(gens)
    n = nt + ng
    n_own = len(own)
    gidx = case.bus_index

    A_eq = np.zeros((n_own + has_ref, n))
    b_eq = np.zeros(n_own + has_ref)
    for k, b in enumerate(own):
        b_eq[k] = case.demand[gidx[b]]
    for k in branches:
        br = case.branches[k]
        f, t = idx[br.from_bus], idx[br.to_bus]
        for row, sign in ((f, 1.0), (t, -1.0)):
            if row < n_own:       # phantom rows do not exist
                A_eq[row, f] -= sign * br.susceptance
                A_eq[row, t] += sign * br.susceptance
    H = np.zeros((n, n))
    g = np.zeros(n)
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    const = 0.0
    for j, gk in enumerate(gens):
        gen = case.generators[gk]
        A_eq[idx[gen.bus], nt + j] = 1.0
        c2, c1, c0 = gen.cost
        H[nt + j, nt + j] = 2.0 * c2
        g[nt + j] = c1
        lb[nt + j], ub[nt + j] = gen.p_min, gen.p_max
        const += c0
    if has_ref:
        A_eq[n_own, idx[case.ref_bus]] = 1.0

    limited = [k for k in branches if np.isfinite(case.branches[k].flow_limit)]
    A_in = np.zeros((len(limited), n))
    lim = np.zeros(len(limited))
    for r, k in enumerate(limited):
        br = case.branches[k]
        A_in[r, idx[br.from_bus]] = br.susceptance
        A_in[r, idx[br.to_bus]] = -br.susceptance
        lim[r] = br.flow_limit
    qp = QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq, A_in=A_in, lb_in=-lim, ub_in=lim,
                   lb=lb, ub=ub, check_psd=False)
    return qp, const


def decompose(case: NetworkCase, assign: RegionAssignment | Mapping[int, int]) -> PartitionedModel:
    """Split ``case`` into regional subproblems coupled through shared angles."""
    if not isinstance(assign, RegionAssignment):
        assign = RegionAssignment(assign)
    report = validate_case(case)
    if not report.ok:
        raise PartitionError(f"invalid case: {report.findings[0].message}")
    _check_assignment(case, assign)
    reg = assign.regions

    ties = []
    phantoms = defaultdict(set)
    tie_of_bus = defaultdict(list)
    internal = defaultdict(list)
    for k in case.active_branches:
        br = case.branches[k]
        a, b = reg[br.from_bus], reg[br.to_bus]
        if a == b:
            internal[a].append(k)
            continue
        ties.append(k)
        phantoms[a].add(br.to_bus)
        phantoms[b].add(br.from_bus)
        internal[a].append(k)
        internal[b].append(k)
        tie_of_bus[br.from_bus].append(k)
        tie_of_bus[br.to_bus].append(k)

    # every region must be tied to the rest, and the region graph connected
    rids = assign.region_ids
    region_edges = {(reg[case.branches[k].from_bus], reg[case.branches[k].to_bus]) for k in ties}
    if len(_components(rids, region_edges)) != 1:
        lonely = [r for r in rids if not phantoms[r]]
        what = f"region {lonely[0]} has no tie line" if lonely else "regions do not form a connected network"
        raise PartitionError(what)

    ref_region = reg[case.ref_bus]
    regions = []
    copies = defaultdict(list)
    for r in rids:
        own = tuple(b.id for b in case.buses if reg[b.id] == r)
        ph = tuple(sorted(phantoms[r]))
        # every island of the region must be anchored by a shared angle or the reference
        edges = [(case.branches[k].from_bus, case.branches[k].to_bus) for k in internal[r]]
        anchored = set(ph) | set(tie_of_bus) | {case.ref_bus}
        for comp in _components(own + ph, edges):
            if not comp & anchored:
                raise PartitionError(f"region {r} contains buses {sorted(comp)} with no tie to any angle reference")
        gens = tuple(k for k in case.active_generators if reg[case.generators[k].bus] == r)
        shared = tuple(sorted(set(ph) | {b for b in own if b in tie_of_bus}))
        qp, const = _region_qp(case, own, ph, gens, tuple(internal[r]), r == ref_region)
        lidx = {b: k for k, b in enumerate(own + ph)}
        for b in shared:
            copies[b].append((r, lidx[b]))
        regions.append(Region(
            id=r, own_buses=own, phantom_buses=ph, gen_positions=gens,
            branch_positions=tuple(internal[r]), shared_buses=shared,
            shared_index=np.array([lidx[b] for b in shared], dtype=int),
            has_ref=r == ref_region, qp=qp, cost_constant=const,
        ))
    registry = tuple(
        SharedVariable(b, reg[b], tuple(sorted(set(tie_of_bus[b]))), tuple(sorted(copies[b])))
        for b in sorted(copies))
    return PartitionedModel(case, assign, tuple(regions), registry, tuple(ties), ref_region)


def _shared_values(model: PartitionedModel, region_angles) -> list[np.ndarray]:
    """Per registry entry, the copies' values in holder order."""
    if len(region_angles) != len(model.regions):
        raise PartitionError(f"expected {len(model.regions)} region vectors, got {len(region_angles)}")
    vecs = []
    for reg, th in zip(model.regions, region_angles):
        th = np.asarray(th, dtype=float)
        if th.shape not in ((reg.n_theta,), (reg.qp.n,)):
            raise PartitionError(f"region {reg.id}: angle vector has shape {th.shape}, expected ({reg.n_theta},)")
        vecs.append(th)
    pos = model.position
    return [np.array([vecs[pos[r]][i] for r, i in s.copies]) for s in model.registry]


def consistency_mismatch(model: PartitionedModel, region_angles) -> float:
    """l2 norm of all pairwise differences between copies of each shared angle.

    ``region_angles`` is a sequence in ``model.regions`` order; each item may
    be the angle block or the full local variable vector.
    """
    total = 0.0
    for v in _shared_values(model, region_angles):
        d = v[:, None] - v[None, :]
        total += 0.5 * float(np.sum(d * d))
    return float(np.sqrt(total))


def assemble_global(model: PartitionedModel, region_solutions) -> OpfSolution:
    """Global point from regional results: owner-region angles, local outputs.

    ``region_solutions`` maps region id (or is a sequence in region order) to
    a full local variable vector.  The objective is the plain generation cost.
    """
    if not isinstance(region_solutions, Mapping):
        region_solutions = {r.id: x for r, x in zip(model.regions, region_solutions)}
    case = model.case
    theta = np.zeros(case.n_bus)
    p = np.zeros(len(case.generators))
    for reg in model.regions:
        if reg.id not in region_solutions or region_solutions[reg.id] is None:
            raise PartitionError(f"missing solution for region {reg.id}")
        x = np.asarray(region_solutions[reg.id], dtype=float)
        if x.shape != (reg.qp.n,):
            raise PartitionError(f"region {reg.id}: solution has shape {x.shape}, expected ({reg.qp.n},)")
        th, pg = reg.split(x)
        for k, b in enumerate(reg.own_buses):
            theta[case.bus_index[b]] = th[k]
        p[list(reg.gen_positions)] = pg
    return OpfSolution(theta, p, objective_cost(case, p), "assembled")


def global_balance_residual(model: PartitionedModel, sol: OpfSolution) -> float:
    return float(np.max(np.abs(balance_residual(model.case, sol.theta, sol.p))))
