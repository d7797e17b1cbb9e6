"""Monte-Carlo experiments over channel-parameter grids.

An experiment is a case, a partition, a list of algorithm settings and a grid
of channel models.  Every (algorithm, channel) pair is a grid point, and each
point is run ``runs`` times.  Run ``r`` at a point gets its seed from a hash
of the base seed, the point's canonical parameters and ``r``, so adding or
reordering grid points never changes the runs of the others.

Reports are plain nested data.  JSON output writes floats with 17
significant digits (NaN as ``null``), so a report read back compares equal
and re-serializes to the same bytes regardless of how many worker processes
produced it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .algorithms import AlgorithmError, AlgorithmParams, RunRecord, preset, run_distributed
from .case import load_case
from .comms import ChannelModel, CommsError
from .opf import solve_centralized
from .partition import decompose, default_partition, load_partition

__all__ = [
    "ExperimentError",
    "OracleError",
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "run_seed",
    "run_experiment",
    "success_rate",
    "point_statistics",
    "emit_report",
    "read_report",
    "dumps_report",
]

SUCCESS_GAP = 0.01


class ExperimentError(ValueError):
    """Bad experiment configuration."""


class OracleError(RuntimeError):
    """The centralized problem could not be solved."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    case: str                                   # bundled name or path to a .m file
    algorithms: tuple                           # AlgorithmParams
    channels: tuple = (ChannelModel(),)         # ChannelModel grid
    partition: str | None = None                # path; None = bundled default
    runs: int = 100
    base_seed: int = 0
    json_path: str | None = None
    csv_path: str | None = None
    name: str = "experiment"

    def __post_init__(self):
        algs = tuple(self.algorithms)
        chans = tuple(self.channels)
        object.__setattr__(self, "algorithms", algs)
        object.__setattr__(self, "channels", chans)
        if int(self.runs) != self.runs or self.runs < 1:
            raise ExperimentError("runs must be an integer >= 1")
        if not algs:
            raise ExperimentError("no algorithms given")
        if not chans:
            raise ExperimentError("channel grid is empty")
        for a in algs:
            if not isinstance(a, AlgorithmParams):
                raise ExperimentError(f"not an AlgorithmParams: {a!r}")
        for c in chans:
            if not isinstance(c, ChannelModel):
                raise ExperimentError(f"not a ChannelModel: {c!r}")

    def points(self):
        """Grid points in report order: algorithms outer, channels inner."""
        return [(a, c) for a in self.algorithms for c in self.channels]

    def describe(self) -> dict:
        """Everything that determines results (no output paths)."""
        return {
            "name": self.name,
            "case": self.case,
            "partition": self.partition,
            "runs": int(self.runs),
            "base_seed": int(self.base_seed),
        }


_CHANNEL_FIELDS = {f.name for f in dataclasses.fields(ChannelModel)}
_PARAM_FIELDS = {f.name for f in dataclasses.fields(AlgorithmParams)}


def _expand_channel(table: dict) -> list[ChannelModel]:
    unknown = set(table) - _CHANNEL_FIELDS
    if unknown:
        raise ExperimentError(f"unknown channel fields {sorted(unknown)}")
    keys = [k for k in table if isinstance(table[k], list)]
    for k in keys:
        if not table[k]:
            raise ExperimentError(f"channel sweep {k!r} is empty")
    out = []
    for combo in itertools.product(*(table[k] for k in keys)):
        kw = dict(table)
        kw.update(zip(keys, combo))
        try:
            out.append(ChannelModel(**kw))
        except (CommsError, TypeError) as exc:
            raise ExperimentError(f"bad channel {kw}: {exc}") from None
    return out


def _algorithm(entry, common: dict) -> AlgorithmParams:
    try:
        if isinstance(entry, str):
            return preset(entry, **common)
        if not isinstance(entry, dict):
            raise ExperimentError(f"bad algorithm entry {entry!r}")
        entry = dict(entry)
        name = entry.pop("preset", None)
        unknown = set(entry) - _PARAM_FIELDS
        if unknown:
            raise ExperimentError(f"unknown algorithm fields {sorted(unknown)}")
        kw = {**common, **entry}
        if name is not None:
            return preset(name, **kw)
        if "kind" not in kw or "alpha" not in kw:
            raise ExperimentError("algorithm needs either 'preset' or 'kind' and 'alpha'")
        return AlgorithmParams(**kw)
    except (AlgorithmError, TypeError) as exc:
        raise ExperimentError(str(exc)) from None


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a config from the parsed TOML structure.

    Recognised keys: ``case``, ``partition``, ``runs``, ``base_seed``,
    ``name``, ``algorithms`` (preset names or tables), ``tolerance`` and
    ``max_iterations`` (applied to every algorithm), ``channel`` (a table, or
    an array of tables; list values are swept) and an ``output`` table with
    ``json`` / ``csv`` paths.
    """
    data = dict(data)
    known = {"case", "partition", "runs", "base_seed", "name", "algorithms", "algorithm",
             "tolerance", "max_iterations", "channel", "output"}
    unknown = set(data) - known
    if unknown:
        raise ExperimentError(f"unknown config keys {sorted(unknown)}")
    if "case" not in data:
        raise ExperimentError("config needs a 'case'")

    def resolve(p):
        if p is None:
            return None
        q = Path(p)
        if base_dir is not None and not q.is_absolute() and (base_dir / q).exists():
            return str(base_dir / q)
        return str(p)

    case = data["case"]
    if isinstance(case, str) and case.endswith(".m"):
        case = resolve(case)
    common = {k: data[k] for k in ("tolerance", "max_iterations") if k in data}
    entries = list(data.get("algorithms", [])) + list(data.get("algorithm", []))
    if not entries:
        raise ExperimentError("config lists no algorithms")
    algs = tuple(_algorithm(e, common) for e in entries)

    chan = data.get("channel", {"kind": "ideal"})
    tables = chan if isinstance(chan, list) else [chan]
    chans = tuple(c for t in tables for c in _expand_channel(t))
    out = data.get("output", {})
    return ExperimentConfig(
        case=case,
        algorithms=algs,
        channels=chans,
        partition=resolve(data.get("partition")),
        runs=data.get("runs", 100),
        base_seed=data.get("base_seed", 0),
        json_path=out.get("json"),
        csv_path=out.get("csv"),
        name=data.get("name", "experiment"),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ExperimentError(f"{path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)


# --------------------------------------------------------------------------
# seeds and metrics
# --------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)


def run_seed(base_seed: int, point: dict, run: int) -> int:
    """63-bit seed for run ``run`` at the grid point described by ``point``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(_canonical([int(base_seed), point, int(run)]).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def _is_success(r) -> bool:
    if isinstance(r, RunRecord):
        return r.success
    gap = r.get("relative_gap")
    return r.get("status") == "converged" and gap is not None and gap < SUCCESS_GAP


def success_rate(records) -> float:
    """Percentage of runs that converged with relative gap below 1 %."""
    records = list(records)
    if not records:
        raise ExperimentError("success rate of an empty list")
    return 100.0 * sum(_is_success(r) for r in records) / len(records)


def _finite(values):
    return [v for v in values if v is not None and math.isfinite(v)]


def point_statistics(runs: list[dict], max_iterations: int) -> dict:
    """Aggregate per-run summaries of one grid point."""
    if not runs:
        raise ExperimentError("no runs to aggregate")
    ok = [r for r in runs if _is_success(r)]
    perceived = np.array([r["final_perceived_mismatch"] for r in runs], dtype=float)
    true = np.array([r["final_mismatch"] for r in runs], dtype=float)
    gaps = _finite(r["relative_gap"] for r in runs)
    statuses = {}
    for r in runs:
        statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    ddof = 1 if len(runs) > 1 else 0
    return {
        "runs": len(runs),
        "success_rate": success_rate(runs),
        "avg_iterations": float(np.mean([r["iterations"] for r in ok])) if ok else float(max_iterations),
        "not_converged": not ok,
        "mean_mismatch": float(np.mean(perceived)),
        "std_mismatch": float(np.std(perceived, ddof=ddof)),
        "mean_true_mismatch": float(np.mean(true)),
        "std_true_mismatch": float(np.std(true, ddof=ddof)),
        "relative_gap_min": float(min(gaps)) if gaps else float("nan"),
        "relative_gap_median": float(np.median(gaps)) if gaps else float("nan"),
        "relative_gap_mean": float(np.mean(gaps)) if gaps else float("nan"),
        "relative_gap_max": float(max(gaps)) if gaps else float("nan"),
        "status_counts": dict(sorted(statuses.items())),
    }


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

_MODELS: dict = {}


def _model(case_ref, partition_ref):
    key = (case_ref, partition_ref)
    if key not in _MODELS:
        case = load_case(case_ref)
        if partition_ref is None:
            try:
                assign = default_partition(case.name)
            except KeyError:
                raise ExperimentError(f"no bundled partition for {case.name!r}; give one") from None
        else:
            assign = load_partition(partition_ref)
        _MODELS[key] = decompose(case, assign)
    return _MODELS[key]


def _job(args):
    case_ref, partition_ref, params, channel, seed, central = args
    model = _model(case_ref, partition_ref)
    rec = run_distributed(model, AlgorithmParams(**params), ChannelModel(**channel), seed=seed,
                          central_objective=central, keep_region_objectives=False)
    return rec.summary()


@dataclass
class ExperimentReport:
    config: dict
    central_objective: float
    points: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config, "central_objective": self.central_objective,
                "points": self.points}

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return dumps_report(self) == dumps_report(other)

    def point(self, algorithm: str, **channel):
        """First point whose algorithm kind and channel fields match."""
        for p in self.points:
            if p["algorithm"]["kind"] == algorithm and all(
                    p["channel"].get(k) == v for k, v in channel.items()):
                return p
        raise KeyError((algorithm, channel))


def run_experiment(config: ExperimentConfig, workers: int = 1, progress=None) -> ExperimentReport:
    """Run every grid point ``config.runs`` times.

    ``workers > 1`` spreads runs over processes; results are gathered in a
    fixed order so the report does not depend on scheduling.
    """
    model = _model(config.case, config.partition)
    central = solve_centralized(model.case)
    if central.status != "optimal":
        raise OracleError(f"centralized problem on {config.case} is {central.status}")
    if central.objective == 0:
        raise OracleError("centralized cost is zero; relative gap is undefined")

    jobs, meta = [], []
    for params, channel in config.points():
        pdesc = params.to_dict()
        cdesc = channel.describe()
        label = {"algorithm": pdesc, "channel": cdesc}
        meta.append((pdesc, cdesc))
        for r in range(config.runs):
            jobs.append((config.case, config.partition, pdesc, dataclasses.asdict(channel),
                         run_seed(config.base_seed, label, r), central.objective))

    if workers is None or workers <= 1:
        results = []
        for k, j in enumerate(jobs):
            results.append(_job(j))
            if progress:
                progress(k + 1, len(jobs))
    else:
        chunk = max(1, len(jobs) // (8 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=chunk))

    points = []
    for k, (pdesc, cdesc) in enumerate(meta):
        runs = results[k * config.runs:(k + 1) * config.runs]
        points.append({
            "algorithm": pdesc,
            "channel": cdesc,
            **point_statistics(runs, pdesc["max_iterations"]),
            "records": runs,
        })
    return ExperimentReport(config.describe(), central.objective, points)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _dump(obj, out: list):
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_num(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for k, (key, v) in enumerate(obj.items()):
            if k:
                out.append(", ")
            out.append(json.dumps(str(key)))
            out.append(": ")
            _dump(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for k, v in enumerate(obj):
            if k:
                out.append(", ")
            _dump(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(report: ExperimentReport) -> str:
    out: list[str] = []
    _dump(report.to_dict(), out)
    return "".join(out) + "\n"


def read_report(path) -> ExperimentReport:
    """Read a JSON report; NaN values come back as ``None``."""
    data = json.loads(Path(path).read_text())
    return ExperimentReport(data["config"], data["central_objective"], data["points"])


_CSV_STATS = ("runs", "success_rate", "avg_iterations", "not_converged", "mean_mismatch",
              "std_mismatch", "mean_true_mismatch", "std_true_mismatch", "relative_gap_min",
              "relative_gap_median", "relative_gap_mean", "relative_gap_max")


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return _num(v).replace("null", "nan")
    return str(v)


def csv_text(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "algorithm", "alpha", "beta", "gamma", "channel", "channel_params",
                "statistic", "value"])
    for k, p in enumerate(report.points):
        a, c = p["algorithm"], p["channel"]
        params = ";".join(f"{key}={_cell(v)}" for key, v in c.items() if key != "kind")
        head = [k, a["kind"], _cell(a["alpha"]), _cell(a["beta"]) if a["beta"] is not None else "",
                _cell(a["gamma"]) if a["gamma"] is not None else "", c["kind"], params]
        for s in _CSV_STATS:
            w.writerow(head + [s, _cell(p[s])])
    return buf.getvalue()


def emit_report(report: ExperimentReport, fmt: str, path) -> Path:
    """Write ``report`` as ``csv`` or ``json`` to ``path``."""
    if fmt not in ("csv", "json"):
        raise ExperimentError(f"unknown report format {fmt!r}")
    path = Path(path)
    text = dumps_report(report) if fmt == "json" else csv_text(report)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True)
        path.write_text(text)
    except OSError as exc:
        raise ExperimentError(f"cannot write {path}: {exc}") from None
    return path


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
