"""Scenario configuration, trajectory records, Hertz contact law and the generic run loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol

import numpy as np

from ..constraint_assembler import StepConfig, StepResult, solve_step
from ..convex_solver import SolverOptions
from ..dynamics_core import ConstraintBlock, ContactSet, Family, GeneralizedState, SystemModel

GRAVITY = 9.81


class ScenarioError(ValueError):
    """Unknown scenario or malformed scenario parameters."""


@dataclass
class ScenarioConfig:
    """Run settings plus scenario-specific parameters.

    ``params`` holds values keyed by name; missing keys take the scenario
    defaults.  ``record_every`` thins the stored trajectory (the final state
    is always kept).
    """

    scenario: str
    h: float
    duration: float
    params: dict = field(default_factory=dict)
    record_every: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.h) and self.h > 0.0):
            raise ScenarioError(f"h must be positive and finite, got {self.h}")
        if not (math.isfinite(self.duration) and self.duration > 0.0):
            raise ScenarioError(f"duration must be positive and finite, got {self.duration}")
        if int(self.record_every) < 1:
            raise ScenarioError(f"record_every must be at least 1, got {self.record_every}")
        self.record_every = int(self.record_every)

    @property
    def steps(self) -> int:
        # round rather than floor so that 1.0 / 0.1 gives 10 steps
        return max(1, int(round(self.duration / self.h)))

    def resolved(self, defaults: Mapping[str, Any]) -> dict:
        """Merge params over defaults, coercing each value to the default's type."""
        unknown = sorted(set(self.params) - set(defaults))
        if unknown:
            raise ScenarioError(f"unknown parameters for {self.scenario}: {', '.join(unknown)}")
        merged = dict(defaults)
        for key, value in self.params.items():
            merged[key] = coerce_like(defaults[key], value, key)
        return merged


def coerce_like(template: Any, value: Any, key: str = "value") -> Any:
    """Convert ``value`` (often a string from a config file) to the type of ``template``."""
    try:
        if isinstance(template, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(template, int):
            as_float = float(value)
            if not as_float.is_integer():
                raise ValueError(value)
            return int(as_float)
        if isinstance(template, float):
            result = float(value)
            if not math.isfinite(result):
                raise ValueError(value)
            return result
        if isinstance(template, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"parameter {key}: cannot interpret {value!r} as {type(template).__name__}") from exc
    raise ScenarioError(f"parameter {key}: unsupported type {type(template).__name__}")


@dataclass(frozen=True)
class HertzFoot:
    """Rigid sphere of radius r pressed into an elastic halfspace of modulus E_star."""

    r: float
    E_star: float

    def __post_init__(self) -> None:
        if not (self.r > 0.0 and math.isfinite(self.r)):
            raise ValueError(f"foot radius must be positive, got {self.r}")
        if not (self.E_star > 0.0 and math.isfinite(self.E_star)):
            raise ValueError(f"effective modulus must be positive, got {self.E_star}")

    @property
    def stiffness(self) -> float:
        """K_n entry E* sqrt(r), in N / m^1.5."""
        return self.E_star * math.sqrt(self.r)


def hertz_normal(d: float, foot: HertzFoot) -> tuple[float, float]:
    """Return (d^1.5, E* sqrt(r d^3)) for penetration depth d >= 0."""
    if not d >= 0.0:
        raise ValueError(f"penetration depth must be nonnegative, got {d}")
    depth_power = d**1.5
    return depth_power, foot.stiffness * depth_power


def hertz_constraint_value(d: float, foot: HertzFoot) -> float:
    """Normal constraint value: -d^1.5 when penetrating, the separation -d otherwise."""
    if d >= 0.0:
        return -hertz_normal(d, foot)[0]
    return -d


@dataclass
class Geometry:
    """Constraint rows evaluated at the start of a step, plus their raw values for metrics."""

    blocks: list[ConstraintBlock]
    contacts: Optional[ContactSet] = None


class GeometryCounter:
    """Wraps a geometry query and counts its invocations."""

    def __init__(self, query: Callable[[float, GeneralizedState], Geometry]):
        self._query = query
        self.calls = 0

    def __call__(self, t: float, state: GeneralizedState) -> Geometry:
        self.calls += 1
        return self._query(t, state)


class ScenarioSystem(Protocol):
    model: SystemModel
    initial_state: GeneralizedState

    def geometry(self, t: float, state: GeneralizedState) -> Geometry: ...

    def energy(self, state: GeneralizedState) -> float: ...


@dataclass
class Trajectory:
    """Recorded trajectory of one scenario run with its metrics.

    Row k of the per-row arrays is the state at ``times[k]`` together with the
    forces of the step that ended there (zeros for the initial row).
    ``phi_norm`` holds, per family, the norm of the constraint values (the
    penetrating part for one-sided families).
    """

    scenario: str
    config: dict
    times: np.ndarray
    q: np.ndarray
    v: np.ndarray
    lam: dict
    energy: np.ndarray
    phi_norm: dict
    metrics: dict = field(default_factory=dict)
    step_data: dict = field(default_factory=dict)
    steps: int = 0
    geometry_calls: int = 0
    truncated_at: Optional[int] = None
    truncation_reason: str = ""
    # KKT residual of every step that went through the convex solver
    kkt_residuals: list = field(default_factory=list)

    @property
    def final_state(self) -> GeneralizedState:
        return GeneralizedState(self.q[-1], self.v[-1])

    @property
    def complete(self) -> bool:
        return self.truncated_at is None


def phi_norms(geom: Geometry) -> dict:
    """Per-family deviation norms: full norm for bilateral rows, penetration norm otherwise."""
    out = {}
    for block in geom.blocks:
        values = block.phi0 if block.family is Family.BILATERAL else np.minimum(block.phi0, 0.0)
        out[block.family.value] = out.get(block.family.value, 0.0) + float(values @ values)
    if geom.contacts is not None:
        pen = np.minimum(geom.contacts.normal.phi0, 0.0)
        out[Family.NORMAL.value] = out.get(Family.NORMAL.value, 0.0) + float(pen @ pen)
    return {key: math.sqrt(value) for key, value in out.items()}


def family_rows(geom: Geometry) -> dict:
    """Row count per family present in a geometry evaluation."""
    rows: dict = {}
    for block in geom.blocks:
        rows[block.family.value] = rows.get(block.family.value, 0) + block.size
    if geom.contacts is not None:
        rows[Family.NORMAL.value] = geom.contacts.size
        rows[Family.TANGENT_R.value] = geom.contacts.size
        if not geom.contacts.planar:
            rows[Family.TANGENT_S.value] = geom.contacts.size
    return rows


StepObserver = Callable[[int, float, GeneralizedState, Geometry, StepResult], None]


class _Recorder:
    def __init__(self, families: dict, stride: int):
        self.families = families
        self.stride = stride
        self.times: list[float] = []
        self.q: list[np.ndarray] = []
        self.v: list[np.ndarray] = []
        self.lam: dict = {fam: [] for fam in families}
        self.energy: list[float] = []
        self.phi_norm: dict = {fam: [] for fam in families if fam in ("b", "u", "n")}

    def add(self, t: float, state: GeneralizedState, lam: Optional[dict], energy: float, norms: dict) -> None:
        self.times.append(t)
        self.q.append(state.q.copy())
        self.v.append(state.v.copy())
        for fam, rows in self.families.items():
            values = np.zeros(rows) if lam is None else np.asarray(lam[Family(fam)], dtype=float)
            self.lam[fam].append(values.copy())
        self.energy.append(energy)
        for fam in self.phi_norm:
            self.phi_norm[fam].append(norms.get(fam, 0.0))

    def build(self, scenario: str, config: dict) -> Trajectory:
        return Trajectory(
            scenario=scenario,
            config=config,
            times=np.array(self.times),
            q=np.array(self.q),
            v=np.array(self.v),
            lam={fam: np.array(vals).reshape(len(self.times), self.families[fam]) for fam, vals in self.lam.items()},
            energy=np.array(self.energy),
            phi_norm={fam: np.array(vals) for fam, vals in self.phi_norm.items()},
        )


def integrate(
    system: ScenarioSystem,
    cfg: ScenarioConfig,
    resolved: dict,
    observer: Optional[StepObserver] = None,
    step_config: Optional[StepConfig] = None,
) -> Trajectory:
    """Run ``cfg.steps`` steps with one geometry query per step.

    The query at the end of step k serves as the start-of-step query of step
    k + 1, and the last one supplies the metrics of the final state, so a run
    of n steps makes n + 1 queries.  A non-finite state ends the run with a
    truncation record; solver failures propagate.
    """
    h = cfg.h
    stepper = step_config if step_config is not None else StepConfig(h, solver=cfg.solver)
    counter = GeometryCounter(system.geometry)
    state = system.initial_state.copy()
    geom = counter(0.0, state)
    families = family_rows(geom)
    rec = _Recorder(families, cfg.record_every)
    rec.add(0.0, state, None, system.energy(state), phi_norms(geom))
    steps = cfg.steps
    truncated_at = None
    reason = ""
    residuals: list[float] = []
    for k in range(steps):
        t0 = k * h
        result = solve_step(system.model, state, t0, geom.blocks, geom.contacts, stepper)
        if result.solver_report is not None:
            residuals.append(result.solver_report.kkt_residual)
        if observer is not None:
            observer(k, t0, state, geom, result)
        state = result.state
        t1 = (k + 1) * h
        if not state.is_finite():
            truncated_at = k + 1
            reason = f"non-finite state after step {k + 1}"
            break
        geom = counter(t1, state)
        if family_rows(geom) != families:
            raise ScenarioError("constraint row counts changed during the run")
        if (k + 1) % cfg.record_every == 0 or k + 1 == steps:
            rec.add(t1, state, result.lam, system.energy(state), phi_norms(geom))
    traj = rec.build(cfg.scenario, resolved)
    traj.steps = steps if truncated_at is None else truncated_at
    traj.geometry_calls = counter.calls
    traj.truncated_at = truncated_at
    traj.truncation_reason = reason
    traj.kkt_residuals = residuals
    return traj
