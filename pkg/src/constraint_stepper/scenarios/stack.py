"""Vertical stack of spheres dropped onto the ground."""

from __future__ import annotations

import numpy as np

from ..dynamics_core import ConstraintBlock, ContactSet, Family, GeneralizedState
from .common import Geometry, HertzFoot, ScenarioConfig, ScenarioError, Trajectory, hertz_constraint_value, integrate
from .rigid import RigidBodies, tangent_basis

# gap is the initial clearance between neighbouring surfaces and below the lowest sphere
DEFAULTS = {
    "spheres": 10,
    "radius": 0.1,
    "mass": 1.0,
    "youngs_modulus": 1e11,
    "damping": 1.0,
    "mu": 0.5,
    "gap": 0.01,
}

# entries below this fraction of the largest |H| entry count as structural zeros
HESSIAN_ZERO_RATIO = 1e-12


def hessian_nonzeros(H: np.ndarray) -> int:
    if H.size == 0:
        return 0
    magnitude = np.abs(H)
    return int(np.count_nonzero(magnitude > HESSIAN_ZERO_RATIO * float(np.max(magnitude))))


class SphereStack:
    """Spheres in vertical alignment with candidate contacts ground-0 and i-(i+1).

    Ground contact uses the Hertz stiffness E sqrt(r); sphere pairs use the
    effective radius r / 2.  Candidates that are separated carry their
    separation as a positive normal value and stay inactive.
    """

    def __init__(self, spheres, radius, mass, youngs_modulus, damping, mu, gap):
        if spheres < 1:
            raise ScenarioError(f"need at least one sphere, got {spheres}")
        if not (radius > 0.0 and mass > 0.0 and youngs_modulus > 0.0):
            raise ScenarioError("radius, mass and modulus must be positive")
        if damping < 0.0 or mu < 0.0 or gap < 0.0:
            raise ScenarioError("damping, friction and gap must be nonnegative")
        self.count = spheres
        self.radius = radius
        self.mu = mu
        self.damping = damping
        self.ground_foot = HertzFoot(radius, youngs_modulus)
        self.pair_foot = HertzFoot(radius / 2.0, youngs_modulus)
        inertia = 0.4 * mass * radius**2 * np.eye(3)
        self.bodies = RigidBodies([mass] * spheres, [inertia] * spheres)
        self.model = self.bodies.model()
        heights = radius + gap + np.arange(spheres) * (2.0 * radius + gap)
        positions = [np.array([0.0, 0.0, z]) for z in heights]
        quats = [np.array([1.0, 0.0, 0.0, 0.0])] * spheres
        q, v = self.bodies.pack(positions, quats)
        self.initial_state = GeneralizedState(q, v)

    def centers(self, q: np.ndarray) -> np.ndarray:
        return np.array([q[7 * i : 7 * i + 3] for i in range(self.count)])

    def _contact(self, lower, upper, normal, lower_offset, upper_offset):
        """Jacobian rows (n, t1, t2) of the relative point velocity, upper minus lower."""
        t1, t2 = tangent_basis(normal)
        rows = []
        for direction in (normal, t1, t2):
            row = self.bodies.point_row_full(upper, upper_offset, direction)
            if lower is not None:
                row -= self.bodies.point_row_full(lower, lower_offset, direction)
            rows.append(row)
        return rows

    def geometry(self, t: float, state: GeneralizedState) -> Geometry:
        q, v = state.q, state.v
        bodies = [self.bodies.body(q, v, i) for i in range(self.count)]
        up = np.array([0.0, 0.0, 1.0])
        phi, bias, stiffness = [], [], []
        rows_n, rows_r, rows_s = [], [], []
        base = bodies[0]
        depth = self.radius - base.position[2]
        n_row, r_row, s_row = self._contact(None, base, up, None, -self.radius * up)
        phi.append(hertz_constraint_value(depth, self.ground_foot))
        bias.append(0.0)
        stiffness.append(self.ground_foot.stiffness)
        rows_n.append(n_row), rows_r.append(r_row), rows_s.append(s_row)
        for i in range(self.count - 1):
            lower, upper = bodies[i], bodies[i + 1]
            delta = upper.position - lower.position
            distance = float(np.linalg.norm(delta))
            normal = delta / distance
            n_row, r_row, s_row = self._contact(lower, upper, normal, self.radius * normal, -self.radius * normal)
            depth = 2.0 * self.radius - distance
            relative = upper.velocity - lower.velocity
            perpendicular = relative - (relative @ normal) * normal
            phi.append(hertz_constraint_value(depth, self.pair_foot))
            bias.append(float(perpendicular @ perpendicular) / distance)
            stiffness.append(self.pair_foot.stiffness)
            rows_n.append(n_row), rows_r.append(r_row), rows_s.append(s_row)
        count = self.count
        zeros = np.zeros(count)
        damping = np.full(count, self.damping)
        G_n, G_r, G_s = np.array(rows_n), np.array(rows_r), np.array(rows_s)
        normal_block = ConstraintBlock(Family.NORMAL, phi, G_n @ v, G_n, bias, stiffness, damping)
        tangent_r = ConstraintBlock(Family.TANGENT_R, zeros, G_r @ v, G_r, zeros, zeros, damping)
        tangent_s = ConstraintBlock(Family.TANGENT_S, zeros, G_s @ v, G_s, zeros, zeros, damping)
        return Geometry([], ContactSet(normal_block, tangent_r, tangent_s, np.full(count, self.mu)))

    def energy(self, state: GeneralizedState) -> float:
        return self.bodies.kinetic_energy(state.v) + self.bodies.potential_energy(state.q)


def run_sphere_stack(cfg: ScenarioConfig) -> Trajectory:
    """Drop the stack and let it settle.

    Metrics: largest horizontal drift of any centre, largest per-step Hessian
    nonzero count and the largest number of contacts touching one sphere,
    final ground normal force.
    """
    params = cfg.resolved(DEFAULTS)
    system = SphereStack(**params)
    nonzeros: list[int] = []
    touching: list[int] = []

    def observe(k, t0, state, geom, result):
        if result.reduced is not None:
            nonzeros.append(hessian_nonzeros(result.reduced.problem.H))
        else:
            nonzeros.append(0)
        active = result.active[Family.NORMAL]
        per_sphere = np.zeros(system.count, dtype=int)
        for c in active:
            per_sphere[c] += 1
            if c > 0:
                per_sphere[c - 1] += 1
        touching.append(int(per_sphere.max()) if active.size else 0)

    traj = integrate(system, cfg, params, observer=observe)
    initial = system.centers(traj.q[0])
    drift = 0.0
    for row in traj.q:
        centers = system.centers(row)
        drift = max(drift, float(np.max(np.linalg.norm(centers[:, :2] - initial[:, :2], axis=1))))
    traj.metrics["max_horizontal_drift"] = drift
    traj.metrics["max_hessian_nonzeros"] = max(nonzeros) if nonzeros else 0
    traj.metrics["max_contacts_per_sphere"] = max(touching) if touching else 0
    traj.metrics["ground_normal_force"] = float(traj.lam["n"][-1, 0])
    traj.metrics["final_speed"] = float(np.linalg.norm(traj.v[-1]))
    traj.step_data["hessian_nonzeros"] = np.array(nonzeros)
    traj.step_data["contacts_per_sphere"] = np.array(touching)
    return traj
