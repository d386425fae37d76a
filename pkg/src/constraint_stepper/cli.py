"""Command-line entry point for the integrator lab, scenario runs and solver checks.

Exit codes: 0 success, 1 solver failure or non-finite state, 2 bad input.
"""

from __future__ import annotations

import argparse
import io
import math
import os
import shlex
import sys
import tempfile
import time
from typing import Optional, Sequence, TextIO

import numpy as np

from . import msd_lab
from .constraint_assembler import StepFailure
from .scenarios import SCENARIOS, ScenarioConfig, ScenarioError, Trajectory, convergence_study, get_scenario

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2

FAMILY_ORDER = ("b", "u", "n", "r", "s")

# keys of a config file that configure the run rather than the scenario
RUN_KEYS = ("h", "duration", "record_every")


class InputError(ValueError):
    """Malformed command-line or config input."""


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def parse_config_text(text: str, source: str = "config") -> dict:
    """Flat key = value lines; '#' starts a comment; blank lines are ignored."""
    values: dict = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise InputError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise InputError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


def read_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            return parse_config_text(handle.read(), path)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc


def parse_overrides(extra: Sequence[str]) -> dict:
    """Turn leftover '--key value' or '--key=value' tokens into a parameter dict."""
    values: dict = {}
    tokens = list(extra)
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--") or len(token) == 2:
            raise InputError(f"unexpected argument {token!r}")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if index + 1 >= len(tokens):
                raise InputError(f"missing value for --{key}")
            index += 1
            value = tokens[index]
        values[key.replace("-", "_")] = value
        index += 1
    return values


def write_atomic(path: str, text: str) -> None:
    """Write text to path through a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        handle, temp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as out:
            out.write(text)
        os.replace(temp, path)
    except OSError as exc:
        if os.path.exists(temp):
            os.unlink(temp)
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc


def trajectory_csv(traj: Trajectory) -> str:
    m_q = traj.q.shape[1]
    m_v = traj.v.shape[1]
    families = [fam for fam in FAMILY_ORDER if fam in traj.lam]
    header = ["t"] + [f"q_{i}" for i in range(m_q)] + [f"v_{i}" for i in range(m_v)]
    for fam in families:
        header += [f"lambda_{fam}_{i}" for i in range(traj.lam[fam].shape[1])]
    header.append("energy")
    norm_families = [fam for fam in FAMILY_ORDER if fam in traj.phi_norm]
    header += [f"phi_norm_{fam}" for fam in norm_families]
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for k, t in enumerate(traj.times):
        row = [t, *traj.q[k], *traj.v[k]]
        for fam in families:
            row.extend(traj.lam[fam][k])
        row.append(traj.energy[k])
        row.extend(traj.phi_norm[fam][k] for fam in norm_families)
        out.write(",".join(fmt(x) for x in row) + "\n")
    return out.getvalue()


def msd_csv(states: Sequence[msd_lab.MsdState], params: msd_lab.MsdParams, h: float) -> str:
    out = io.StringIO()
    out.write("t,q_0,v_0,energy\n")
    for k, s in enumerate(states):
        energy = 0.5 * params.m * s.v * s.v + 0.5 * params.k * s.x * s.x
        out.write(",".join(fmt(x) for x in (k * h, s.x, s.v, energy)) + "\n")
    return out.getvalue()


def manifest_text(entries: dict) -> str:
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = fmt(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


PLOT_TEMPLATE = """import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else {csv!r}
with open(path, newline="") as handle:
    rows = list(csv.reader(handle))
header, data = rows[0], [[float(x) for x in row] for row in rows[1:]]
columns = {{name: [row[i] for row in data] for i, name in enumerate(header)}}
t = columns["t"]
groups = [("q_", "positions"), ("v_", "velocities"), ("lambda_", "forces"), ("energy", "energy")]
figure, axes = plt.subplots(len(groups), 1, sharex=True, figsize=(8, 10))
for axis, (prefix, title) in zip(axes, groups):
    for name, values in columns.items():
        if name.startswith(prefix):
            axis.plot(t, values, label=name)
    axis.set_ylabel(title)
axes[-1].set_xlabel("t")
figure.tight_layout()
plt.show()
"""


def write_outputs(out: str, csv_text: str, manifest: dict, plot: Optional[str], diag: TextIO, stdout: TextIO) -> None:
    if out == "-":
        stdout.write(csv_text)
        diag.write(manifest_text(manifest))
    else:
        manifest["csv"] = out
        manifest_path = os.path.splitext(out)[0] + ".manifest"
        manifest["manifest"] = manifest_path
        if plot:
            manifest["plot_script"] = plot
        write_atomic(out, csv_text)
        write_atomic(manifest_path, manifest_text(manifest))
    if plot:
        write_atomic(plot, PLOT_TEMPLATE.format(csv=out if out != "-" else "trajectory.csv"))


def residual_stats(residuals: Sequence[float]) -> dict:
    if not residuals:
        return {"solver_steps": 0}
    values = np.asarray(residuals, dtype=float)
    return {
        "solver_steps": int(values.size),
        "kkt_residual_max": float(np.max(values)),
        "kkt_residual_median": float(np.median(values)),
    }


def cmd_msd(args, diag: TextIO, stdout: TextIO) -> int:
    started = time.perf_counter()
    try:
        scheme = msd_lab.Scheme.parse(args.scheme)
        params = msd_lab.MsdParams(args.m, args.k, args.b, args.f)
        y0 = msd_lab.MsdState(args.x0, args.v0)
        verdict = msd_lab.classify_stability(scheme, params, args.h)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    diag.write(f"{verdict.label.value}\n")
    diag.write(f"spectral_radius = {fmt(verdict.spectral_radius)}\n")
    status = EXIT_OK
    try:
        states = msd_lab.simulate_msd(scheme, params, y0, args.h, args.steps)
    except msd_lab.MsdOverflowError as exc:
        diag.write(f"error: {exc}\n")
        states = exc.trajectory
        status = EXIT_FAILURE
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    simulated = time.perf_counter()
    manifest = {
        "command": "msd",
        "scheme": scheme.value,
        "m": args.m,
        "k": args.k,
        "b": args.b,
        "f": args.f,
        "h": args.h,
        "steps": args.steps,
        "x0": args.x0,
        "v0": args.v0,
        "stability": verdict.label.value,
        "spectral_radius": verdict.spectral_radius,
        "states_written": len(states),
        "wall_simulate_s": simulated - started,
    }
    write_outputs(args.out, msd_csv(states, params, args.h), manifest, args.plot, diag, stdout)
    return status


def scenario_config(args, extra: Sequence[str]) -> ScenarioConfig:
    spec = get_scenario(args.scenario)
    values = read_config(args.config) if args.config else {}
    values.update(parse_overrides(extra))
    run = {"h": spec.h, "duration": spec.duration, "record_every": 1}
    for key in RUN_KEYS:
        if key in values:
            run[key] = values.pop(key)
    for key, flag in (("h", args.h), ("duration", args.duration), ("record_every", args.record_every)):
        if flag is not None:
            run[key] = flag
    try:
        h, duration = float(run["h"]), float(run["duration"])
        record_float = float(run["record_every"])
    except ValueError as exc:
        raise InputError(f"cannot interpret run settings: {exc}") from exc
    if not record_float.is_integer():
        raise InputError(f"record_every must be an integer, got {run['record_every']}")
    cfg = ScenarioConfig(args.scenario, h, duration, values, record_every=int(record_float))
    # validate parameter names and types before any work starts
    cfg.resolved(spec.defaults)
    return cfg


def cmd_simulate(args, extra: Sequence[str], diag: TextIO, stdout: TextIO) -> int:
    started = time.perf_counter()
    cfg = scenario_config(args, extra)
    spec = get_scenario(cfg.scenario)
    configured = time.perf_counter()
    traj = spec.runner(cfg)
    simulated = time.perf_counter()
    csv_text = trajectory_csv(traj)
    manifest = {"command": "simulate", "scenario": cfg.scenario, "h": cfg.h, "duration": cfg.duration}
    manifest["record_every"] = cfg.record_every
    for key, value in traj.config.items():
        manifest[f"param.{key}"] = value
    manifest["steps"] = traj.steps
    manifest["geometry_calls"] = traj.geometry_calls
    manifest["complete"] = traj.complete
    if not traj.complete:
        manifest["truncation"] = traj.truncation_reason
    manifest.update(residual_stats(traj.kkt_residuals))
    for key, value in traj.metrics.items():
        manifest[f"metric.{key}"] = value
    manifest["wall_setup_s"] = configured - started
    manifest["wall_simulate_s"] = simulated - configured
    write_outputs(args.out or f"{cfg.scenario}.csv", csv_text, manifest, args.plot, diag, stdout)
    for key, value in traj.metrics.items():
        diag.write(f"{key} = {fmt(value) if isinstance(value, float) else value}\n")
    if not traj.complete:
        diag.write(f"error: {traj.truncation_reason}\n")
        return EXIT_FAILURE
    return EXIT_OK


def parse_grid(text: str) -> list[float]:
    try:
        grid = [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise InputError(f"malformed step-size grid {text!r}") from exc
    if len(grid) < 2 or any(not (h > 0.0 and math.isfinite(h)) for h in grid):
        raise InputError(f"grid needs at least two positive step sizes, got {text!r}")
    return grid


def cmd_convergence(args, extra: Sequence[str], diag: TextIO, stdout: TextIO) -> int:
    spec = get_scenario(args.scenario)
    values = read_config(args.config) if args.config else {}
    values.update(parse_overrides(extra))
    for key in RUN_KEYS:
        values.pop(key, None)
    if args.grid:
        grid = parse_grid(args.grid)
    elif spec.convergence_grid:
        grid = list(spec.convergence_grid)
    else:
        raise InputError(f"scenario {spec.name} has no default grid; pass --grid")
    duration = args.duration if args.duration is not None else (spec.convergence_duration or spec.duration)
    ScenarioConfig(spec.name, min(grid), duration, values).resolved(spec.defaults)
    started = time.perf_counter()
    report = convergence_study(
        spec.runner, spec.name, grid, duration, values, reference_factor=args.reference_factor, workers=args.workers
    )
    entries = {
        "command": "convergence",
        "scenario": spec.name,
        "duration": duration,
        "reference_h": report.reference_h,
    }
    for key, value in values.items():
        entries[f"param.{key}"] = value
    for index, (h, error) in enumerate(zip(report.step_sizes, report.errors)):
        entries[f"h_{index}"] = h
        entries[f"error_{index}"] = error
    for index, order in enumerate(report.pairwise_orders):
        entries[f"order_{index}_{index + 1}"] = order
    entries["observed_order"] = report.observed_order
    entries["wall_runs_s"] = time.perf_counter() - started
    text = manifest_text(entries)
    if args.out:
        write_atomic(args.out, text)
    stdout.write(text)
    return EXIT_OK


def cmd_selftest(args, diag: TextIO, stdout: TextIO) -> int:
    from .selftest import SUITES

    names = args.suite or list(SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise InputError(f"unknown suite {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    failed = False
    for name in names:
        result = SUITES[name]()
        stdout.write(result.line() + "\n")
        failed |= not result.passed
    return EXIT_FAILURE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="constraint-stepper", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    msd = sub.add_parser("msd", help="spring-mass-damper integrator lab")
    msd.add_argument("--scheme", required=True, help="explicit, semi-implicit or implicit")
    msd.add_argument("--m", type=float, default=1.0)
    msd.add_argument("--k", type=float, required=True)
    msd.add_argument("--b", type=float, default=0.0)
    msd.add_argument("--f", type=float, default=0.0, help="constant applied force")
    msd.add_argument("--h", type=float, required=True)
    msd.add_argument("--steps", type=int, required=True)
    msd.add_argument("--x0", type=float, default=1.0)
    msd.add_argument("--v0", type=float, default=0.0)
    msd.add_argument("--out", default="msd.csv", help="CSV path, '-' for standard output")
    msd.add_argument("--plot", help="also write a plotting script to this path")

    simulate = sub.add_parser(
        "simulate",
        help="run a scenario",
        description="Run a scenario. Scenario parameters are given as --name value and override the config file.",
    )
    simulate.add_argument("scenario", help=", ".join(SCENARIOS))
    simulate.add_argument("--config", help="key = value file")
    simulate.add_argument("--h", type=float)
    simulate.add_argument("--duration", type=float)
    simulate.add_argument("--record-every", type=int, dest="record_every")
    simulate.add_argument("--out", help="CSV path (default <scenario>.csv), '-' for standard output")
    simulate.add_argument("--plot", help="also write a plotting script to this path")

    convergence = sub.add_parser("convergence", help="observed order against a fine reference run")
    convergence.add_argument("scenario", help=", ".join(SCENARIOS))
    convergence.add_argument("--config", help="key = value file")
    convergence.add_argument("--grid", help="comma-separated step sizes")
    convergence.add_argument("--duration", type=float)
    convergence.add_argument("--reference-factor", type=float, default=100.0, dest="reference_factor")
    convergence.add_argument("--workers", type=int, default=1)
    convergence.add_argument("--out", help="also write the report to this path")

    selftest = sub.add_parser("selftest", help="fixed-seed solver equivalence suites")
    selftest.add_argument("suite", nargs="*", help="suites to run (default all)")
    return parser


def run(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None, diag: Optional[TextIO] = None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    diag = diag if diag is not None else sys.stderr
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_BAD_INPUT
    try:
        if args.command in ("msd", "selftest") and extra:
            raise InputError(f"unexpected arguments: {shlex.join(extra)}")
        if args.command == "msd":
            return cmd_msd(args, diag, stdout)
        if args.command == "simulate":
            return cmd_simulate(args, extra, diag, stdout)
        if args.command == "convergence":
            return cmd_convergence(args, extra, diag, stdout)
        return cmd_selftest(args, diag, stdout)
    except (InputError, ScenarioError) as exc:
        diag.write(f"error: {exc}\n")
        return EXIT_BAD_INPUT
    except StepFailure as exc:
        diag.write(f"solver failure: {exc}\n")
        return EXIT_FAILURE


def main() -> int:
    return run()
