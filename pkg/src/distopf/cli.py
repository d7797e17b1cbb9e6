"""Command line: ``distopf solve | run | experiment``.

Exit codes: 0 on success, 2 for bad arguments or configuration, 3 when the
centralized problem cannot be solved.
"""
from __future__ import annotations

import json
import sys

import click

from .algorithms import PRESETS, AlgorithmError, AlgorithmParams, preset, run_distributed
from .case import CaseError
from .comms import ChannelModel, CommsError
from .harness import (ExperimentError, OracleError, _model, dumps_report, emit_report,
                      load_config, run_experiment)
from .opf import solve_centralized
from .partition import PartitionError

EXIT_CONFIG = 2
EXIT_ORACLE = 3


def _fail(msg, code=EXIT_CONFIG):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Distributed DC-OPF under nonideal communication."""


@main.command()
@click.argument("case")
@click.option("--json", "as_json", is_flag=True, help="Print the solution as JSON.")
def solve(case, as_json):
    """Solve CASE (bundled name or .m path) centrally."""
    from .case import load_case
    try:
        net = load_case(case)
    except (CaseError, OSError) as exc:
        _fail(exc)
    sol = solve_centralized(net)
    if as_json:
        click.echo(json.dumps({"case": net.name, "status": sol.status, "objective": sol.objective,
                               "p": sol.p.tolist(), "theta": sol.theta.tolist()}))
    else:
        click.echo(f"{net.name}: {sol.status}, cost {sol.objective:.6f} $/h")
    if sol.status != "optimal":
        sys.exit(EXIT_ORACLE)


def _channel(kind, sigma, r, p_bad, per_message, lambda_f, lambda_r, symmetric):
    if kind == "ideal":
        return ChannelModel.ideal()
    if kind == "gaussian":
        return ChannelModel.gaussian(sigma)
    if kind == "bad_data":
        return ChannelModel.bad_data(r, p_bad, per_message)
    return ChannelModel.loss(lambda_f, lambda_r, symmetric)


@main.command()
@click.argument("case")
@click.option("--partition", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Partition TOML (default: bundled partition for CASE).")
@click.option("--preset", "preset_name", default=None,
              help=f"Named parameter set, e.g. case118-admm. Known: {', '.join(sorted(PRESETS))}.")
@click.option("--algorithm", type=click.Choice(["admm", "atc", "app"]), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--tolerance", type=float, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--channel", type=click.Choice(["ideal", "gaussian", "bad_data", "intermittent_loss"]),
              default="ideal")
@click.option("--sigma", type=float, default=0.0, help="Gaussian noise std (rad).")
@click.option("--bad-range", "r", type=float, default=0.0, help="Bad-data range R (rad).")
@click.option("--p-bad", type=float, default=0.0)
@click.option("--per-message", is_flag=True)
@click.option("--lambda-f", type=float, default=0.0)
@click.option("--lambda-r", type=float, default=0.0)
@click.option("--symmetric-loss", is_flag=True)
@click.option("--seed", type=int, default=0)
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None,
              help="Write the run record summary and traces here.")
def run(case, partition, preset_name, algorithm, alpha, beta, gamma, tolerance, max_iterations,
        channel, sigma, r, p_bad, per_message, lambda_f, lambda_r, symmetric_loss, seed, json_path):
    """One distributed run on CASE."""
    overrides = {k: v for k, v in (("tolerance", tolerance), ("max_iterations", max_iterations))
                 if v is not None}
    try:
        if preset_name:
            if beta is not None:
                overrides["beta"] = beta
            params = preset(preset_name, **overrides)
        elif algorithm and alpha is not None:
            kw = {k: v for k, v in (("beta", beta), ("gamma", gamma)) if v is not None}
            params = AlgorithmParams(algorithm, alpha, **kw, **overrides)
        else:
            _fail("give --preset or both --algorithm and --alpha")
        chan = _channel(channel, sigma, r, p_bad, per_message, lambda_f, lambda_r, symmetric_loss)
        model = _model(case, partition)
    except (AlgorithmError, CommsError, CaseError, PartitionError, ExperimentError, OSError) as exc:
        _fail(exc)
    central = solve_centralized(model.case)
    if central.status != "optimal":
        _fail(f"centralized problem is {central.status}", EXIT_ORACLE)
    rec = run_distributed(model, params, chan, seed=seed, central_objective=central.objective)
    s = rec.summary()
    click.echo(f"{params.kind}: {s['status']} after {s['iterations']} iterations, "
               f"mismatch {s['final_mismatch']:.3e} rad, relative gap {s['relative_gap']:.3e}")
    if json_path:
        out = {"summary": s, "params": params.to_dict(), "channel": chan.describe(),
               "mismatch": rec.mismatch, "perceived_mismatch": rec.perceived_mismatch}
        with open(json_path, "w") as fh:
            json.dump(out, fh)


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--runs", type=int, default=None, help="Override runs per grid point.")
@click.option("--workers", type=int, default=1, show_default=True, help="Worker processes.")
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
def experiment(config, runs, workers, json_path, csv_path):
    """Run the sweep described by the TOML file CONFIG."""
    import dataclasses
    try:
        cfg = load_config(config)
        if runs is not None:
            cfg = dataclasses.replace(cfg, runs=runs)
        report = run_experiment(cfg, workers=workers)
    except OracleError as exc:
        _fail(exc, EXIT_ORACLE)
    except (ExperimentError, CaseError, PartitionError, OSError) as exc:
        _fail(exc)
    json_path = json_path or cfg.json_path
    csv_path = csv_path or cfg.csv_path
    try:
        if json_path:
            emit_report(report, "json", json_path)
        if csv_path:
            emit_report(report, "csv", csv_path)
    except ExperimentError as exc:
        _fail(exc)
    for p in report.points:
        a, c = p["algorithm"], p["channel"]
        extra = " ".join(f"{k}={v}" for k, v in c.items() if k != "kind")
        click.echo(f"{a['kind']:4s} {c['kind']} {extra}: success {p['success_rate']:.0f}%  "
                   f"mean mismatch {p['mean_mismatch']:.3e}  avg iterations {p['avg_iterations']:.1f}")
    if not (json_path or csv_path):
        click.echo(dumps_report(report), nl=False)


if __name__ == "__main__":
    main()
