"""Benchmark scenarios built on the constraint stepper."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .common import (
    GRAVITY,
    Geometry,
    GeometryCounter,
    HertzFoot,
    ScenarioConfig,
    ScenarioError,
    Trajectory,
    hertz_constraint_value,
    hertz_normal,
    integrate,
)
from .convergence import ConvergenceReport, convergence_study, observed_order
from .foundation import DEFAULTS as FOUNDATION_DEFAULTS
from .foundation import ElasticFoundation, run_elastic_foundation
from .incline import DEFAULTS as INCLINE_DEFAULTS
from .incline import InclineBox, run_incline_box
from .pendulum import BILATERAL_DEFAULTS, ROM_DEFAULTS, LimitedPendulum, PinnedPendulum, run_pendulum_bilateral, run_pendulum_rom
from .stack import DEFAULTS as STACK_DEFAULTS
from .stack import SphereStack, hessian_nonzeros, run_sphere_stack


@dataclass(frozen=True)
class ScenarioSpec:
    """Runner, parameter defaults and default step size and horizon of one scenario."""

    name: str
    runner: Callable[[ScenarioConfig], Trajectory]
    defaults: dict
    h: float
    duration: float
    # step sizes and horizon of the default convergence study (empty when not offered)
    convergence_grid: tuple = ()
    convergence_duration: float = 0.0


SCENARIOS = {
    "pendulum": ScenarioSpec(
        "pendulum", run_pendulum_bilateral, BILATERAL_DEFAULTS, 0.01, 1.0, (0.04, 0.02, 0.01), 1.0
    ),
    "rom": ScenarioSpec("rom", run_pendulum_rom, ROM_DEFAULTS, 1e-5, 0.2),
    "foundation": ScenarioSpec(
        "foundation", run_elastic_foundation, FOUNDATION_DEFAULTS, 0.01, 1.0, (0.04, 0.02, 0.01), 0.2
    ),
    "incline": ScenarioSpec("incline", run_incline_box, INCLINE_DEFAULTS, 0.01, 1.0),
    "stack": ScenarioSpec("stack", run_sphere_stack, STACK_DEFAULTS, 0.01, 5.0),
}


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {', '.join(sorted(SCENARIOS))}") from None


def run_scenario(cfg: ScenarioConfig) -> Trajectory:
    return get_scenario(cfg.scenario).runner(cfg)


__all__ = [
    "GRAVITY",
    "SCENARIOS",
    "ConvergenceReport",
    "ElasticFoundation",
    "Geometry",
    "GeometryCounter",
    "HertzFoot",
    "InclineBox",
    "LimitedPendulum",
    "PinnedPendulum",
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioSpec",
    "SphereStack",
    "Trajectory",
    "convergence_study",
    "get_scenario",
    "hertz_constraint_value",
    "hertz_normal",
    "hessian_nonzeros",
    "integrate",
    "observed_order",
    "run_elastic_foundation",
    "run_incline_box",
    "run_pendulum_bilateral",
    "run_pendulum_rom",
    "run_scenario",
    "run_sphere_stack",
]
