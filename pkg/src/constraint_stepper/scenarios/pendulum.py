"""Planar pendulum experiments: a stiff pin joint and a soft range-of-motion limit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..constraint_assembler import StepConfig, solve_step
from ..dynamics_core import ConstraintBlock, Family, GeneralizedState, SystemModel
from .common import GRAVITY, Geometry, ScenarioConfig, ScenarioError, Trajectory, integrate

BILATERAL_DEFAULTS = {
    "k": 1e15,
    "b": 1.0,
    "length": 1.0,
    "mass": 1.0,
    "inertia": 0.01,
    "theta0": 0.0,
}

# the bob starts horizontal when theta = 0; the joint sits at the origin
ROM_DEFAULTS = {
    "k": 1e12,
    "b": 0.0,
    "length": 0.1,
    "mass": 1.0,
    "theta0": math.pi / 2,
    "omega0": 0.0,
}


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_derivative(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


@dataclass
class PinnedPendulum:
    """Bob with coordinates (x, y, theta) held at the origin by a stiff pin.

    phi = (x, y) + R(theta) u, where u points from the bob to the joint in the
    bob frame.
    """

    k: float
    b: float
    length: float
    mass: float
    inertia: float
    theta0: float

    def __post_init__(self) -> None:
        for name in ("length", "mass", "inertia"):
            if not getattr(self, name) > 0.0:
                raise ScenarioError(f"pendulum {name} must be positive")
        if self.k < 0.0 or self.b < 0.0:
            raise ScenarioError("pendulum stiffness and damping must be nonnegative")
        self.offset = np.array([-self.length, 0.0])
        self.model = SystemModel(
            lambda q: np.diag([self.mass, self.mass, self.inertia]),
            lambda q: np.eye(3),
            lambda t, q, v: np.array([0.0, -self.mass * GRAVITY, 0.0]),
        )
        position = -rotation(self.theta0) @ self.offset
        self.initial_state = GeneralizedState([position[0], position[1], self.theta0], np.zeros(3))

    def joint_error(self, q: np.ndarray) -> np.ndarray:
        return q[:2] + rotation(q[2]) @ self.offset

    def geometry(self, t: float, state: GeneralizedState) -> Geometry:
        q, v = state.q, state.v
        G = np.hstack([np.eye(2), (rotation_derivative(q[2]) @ self.offset)[:, None]])
        block = ConstraintBlock(
            Family.BILATERAL,
            self.joint_error(q),
            G @ v,
            G,
            -rotation(q[2]) @ self.offset * v[2] ** 2,
            self.k,
            self.b,
        )
        return Geometry([block])

    def energy(self, state: GeneralizedState) -> float:
        """Kinetic plus gravitational energy, zero potential at the lowest bob height."""
        v = state.v
        kinetic = 0.5 * self.mass * float(v[:2] @ v[:2]) + 0.5 * self.inertia * v[2] ** 2
        return kinetic + self.mass * GRAVITY * (state.q[1] + self.length)


def run_pendulum_bilateral(cfg: ScenarioConfig) -> Trajectory:
    """Pinned pendulum released from horizontal; every step takes the linear path.

    Metrics: largest joint deviation, and largest relative energy change
    |E - E0| / E0 over the run.
    """
    params = cfg.resolved(BILATERAL_DEFAULTS)
    system = PinnedPendulum(**params)
    traj = integrate(system, cfg, params)
    deviation = traj.phi_norm["b"]
    e0 = traj.energy[0]
    traj.metrics["max_deviation"] = float(np.max(deviation))
    traj.metrics["final_deviation"] = float(deviation[-1])
    traj.metrics["energy_drift"] = float(np.max(np.abs(traj.energy - e0)) / abs(e0))
    traj.metrics["final_energy_drift"] = float(abs(traj.energy[-1] - e0) / abs(e0))
    return traj


@dataclass
class LimitedPendulum:
    """Minimal-coordinate pendulum, theta = 0 at the lowest bob position, limit theta >= 0."""

    k: float
    b: float
    length: float
    mass: float
    theta0: float
    omega0: float

    def __post_init__(self) -> None:
        if not (self.length > 0.0 and self.mass > 0.0):
            raise ScenarioError("pendulum length and mass must be positive")
        if self.k < 0.0 or self.b < 0.0:
            raise ScenarioError("pendulum stiffness and damping must be nonnegative")
        self.inertia = self.mass * self.length**2
        self.model = SystemModel(
            lambda q: np.array([[self.inertia]]),
            lambda q: np.eye(1),
            lambda t, q, v: np.array([self.torque(q[0])]),
        )

    def torque(self, theta: float) -> float:
        return -self.mass * GRAVITY * self.length * math.sin(theta)

    def block(self, theta: float, omega: float) -> ConstraintBlock:
        return ConstraintBlock(Family.UNILATERAL, [theta], [omega], [[1.0]], [0.0], self.k, self.b)

    def energy(self, theta: float, omega: float) -> float:
        return 0.5 * self.inertia * omega**2 + self.mass * GRAVITY * self.length * (1.0 - math.cos(theta))

    def amplitude(self, theta: float, omega: float) -> float:
        """Peak angle of a free swing with the given mechanical energy."""
        height = self.energy(theta, omega) / (self.mass * GRAVITY * self.length)
        return math.acos(max(-1.0, 1.0 - height))


def run_pendulum_rom(cfg: ScenarioConfig) -> Trajectory:
    """Pendulum falling onto a soft limit at theta = 0.

    Steps where the limit is inactive (theta > 0) apply the semi-explicit
    update directly, which is what solve_step computes there; active steps go
    through solve_step on the QP path.  Metrics: largest |theta|, number of
    impacts, the rebound amplitude implied by the mechanical energy on the
    first free step after the first impact, and the largest angle observed
    after that impact.
    """
    params = cfg.resolved(ROM_DEFAULTS)
    system = LimitedPendulum(**params)
    h = cfg.h
    stepper = StepConfig(h, solver=cfg.solver)
    steps = cfg.steps
    inertia = system.inertia
    theta, omega = float(system.theta0), float(system.omega0)
    times, qs, vs, lams, energies, norms = [0.0], [theta], [omega], [0.0], [system.energy(theta, omega)], [0.0]
    max_abs = abs(theta)
    impacts = 0
    in_contact = False
    rebound = math.nan
    peak_after = 0.0
    geometry_calls = 1
    qp_steps = 0
    residuals: list[float] = []
    truncated_at = None
    reason = ""
    for k in range(steps):
        # the start-of-step query is theta itself
        if theta > 0.0:
            omega = omega + h * system.torque(theta) / inertia
            theta = theta + h * omega
            force = 0.0
            if in_contact:
                in_contact = False
                if math.isnan(rebound):
                    rebound = system.amplitude(theta, omega)
        else:
            if not in_contact:
                impacts += 1
                in_contact = True
            result = solve_step(
                system.model, GeneralizedState([theta], [omega]), k * h, [system.block(theta, omega)], None, stepper
            )
            theta, omega = float(result.state.q[0]), float(result.state.v[0])
            force = float(result.lam[Family.UNILATERAL][0])
            qp_steps += 1
            if result.solver_report is not None:
                residuals.append(result.solver_report.kkt_residual)
        geometry_calls += 1
        if not (math.isfinite(theta) and math.isfinite(omega)):
            truncated_at = k + 1
            reason = f"non-finite state after step {k + 1}"
            break
        max_abs = max(max_abs, abs(theta))
        if impacts:
            peak_after = max(peak_after, theta)
        if (k + 1) % cfg.record_every == 0 or k + 1 == steps:
            times.append((k + 1) * h)
            qs.append(theta)
            vs.append(omega)
            lams.append(force)
            energies.append(system.energy(theta, omega))
            norms.append(abs(min(theta, 0.0)))
    traj = Trajectory(
        scenario=cfg.scenario,
        config=params,
        times=np.array(times),
        q=np.array(qs).reshape(-1, 1),
        v=np.array(vs).reshape(-1, 1),
        lam={"u": np.array(lams).reshape(-1, 1)},
        energy=np.array(energies),
        phi_norm={"u": np.array(norms)},
        steps=steps if truncated_at is None else truncated_at,
        geometry_calls=geometry_calls,
        truncated_at=truncated_at,
        truncation_reason=reason,
        kkt_residuals=residuals,
    )
    traj.metrics.update(
        max_abs_theta=max_abs,
        impacts=impacts,
        rebound_amplitude=rebound,
        peak_after_impact=peak_after,
        qp_steps=qp_steps,
        initial_amplitude=system.amplitude(system.theta0, system.omega0),
    )
    return traj
