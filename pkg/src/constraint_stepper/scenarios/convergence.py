"""Observed convergence order of a scenario against a fine reference run."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..convex_solver import SolverOptions
from .common import ScenarioConfig, ScenarioError, Trajectory

Runner = Callable[[ScenarioConfig], Trajectory]


@dataclass
class ConvergenceReport:
    """Final-state errors of a step-size grid against a reference run.

    ``errors[i]`` is the max-norm of (q, v) at the final time for ``step_sizes[i]``
    minus the reference.  ``pairwise_orders[i]`` compares grid i with grid i + 1;
    ``observed_order`` is the least-squares slope of log error against log h.
    """

    scenario: str
    duration: float
    step_sizes: list[float]
    reference_h: float
    errors: list[float]
    pairwise_orders: list[float] = field(default_factory=list)
    observed_order: float = math.nan


def final_state_error(run: Trajectory, reference: Trajectory) -> float:
    dq = np.max(np.abs(run.q[-1] - reference.q[-1]))
    dv = np.max(np.abs(run.v[-1] - reference.v[-1]))
    return float(max(dq, dv))


def observed_order(step_sizes: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) over log(h)."""
    h = np.asarray(step_sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.size < 2 or np.any(e <= 0.0) or np.any(h <= 0.0):
        return math.nan
    slope, _ = np.polyfit(np.log(h), np.log(e), 1)
    return float(slope)


def pairwise_orders(step_sizes: Sequence[float], errors: Sequence[float]) -> list[float]:
    out = []
    for (h0, e0), (h1, e1) in zip(zip(step_sizes, errors), zip(step_sizes[1:], errors[1:])):
        if e0 > 0.0 and e1 > 0.0 and h0 != h1:
            out.append(math.log(e0 / e1) / math.log(h0 / h1))
        else:
            out.append(math.nan)
    return out


def _run(args: tuple[Runner, ScenarioConfig]) -> Trajectory:
    runner, cfg = args
    return runner(cfg)


def convergence_study(
    runner: Runner,
    scenario: str,
    step_sizes: Sequence[float],
    duration: float,
    params: Optional[dict] = None,
    reference_factor: float = 100.0,
    solver: Optional[SolverOptions] = None,
    workers: int = 1,
) -> ConvergenceReport:
    """Run each step size plus a reference at min(step_sizes) / reference_factor.

    Every step size must divide the duration into a whole number of steps so
    that all runs end at the same time.  With workers > 1 the runs execute in
    separate processes.
    """
    sizes = [float(h) for h in step_sizes]
    if len(sizes) < 2:
        raise ScenarioError("a convergence study needs at least two step sizes")
    if reference_factor <= 1.0:
        raise ScenarioError(f"reference factor must exceed 1, got {reference_factor}")
    reference_h = min(sizes) / reference_factor
    for h in sizes + [reference_h]:
        steps = duration / h
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ScenarioError(f"step size {h} does not divide duration {duration}")
    options = solver if solver is not None else SolverOptions()
    configs = [
        ScenarioConfig(scenario, h, duration, dict(params or {}), record_every=10**9, solver=options)
        for h in sizes + [reference_h]
    ]
    jobs = [(runner, cfg) for cfg in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run, jobs))
    else:
        runs = [_run(job) for job in jobs]
    for cfg, run in zip(configs, runs):
        if not run.complete:
            raise ScenarioError(f"run at h = {cfg.h} did not complete: {run.truncation_reason}")
    reference = runs[-1]
    errors = [final_state_error(run, reference) for run in runs[:-1]]
    return ConvergenceReport(
        scenario=scenario,
        duration=duration,
        step_sizes=sizes,
        reference_h=reference_h,
        errors=errors,
        pairwise_orders=pairwise_orders(sizes, errors),
        observed_order=observed_order(sizes, errors),
    )
