"""Box with four spherical feet on a ramp, Hertz normal law and damper friction."""

from __future__ import annotations

import math

import numpy as np

from ..dynamics_core import ConstraintBlock, ContactSet, Family, GeneralizedState
from .common import (
    GRAVITY,
    Geometry,
    HertzFoot,
    ScenarioConfig,
    ScenarioError,
    Trajectory,
    hertz_constraint_value,
    integrate,
)
from .rigid import RigidBodies, tangent_basis

# The simulation frame is aligned with the ramp: the ramp surface is z = 0 and
# gravity is tilted so that the box slides toward -x.  A tangential damping of
# None means 1e6 / h.
DEFAULTS = {
    "mu": 0.25,
    "angle_deg": 15.0,
    "mass": 1.0,
    "length": 0.2,
    "width": 0.1,
    "height": 0.05,
    "foot_radius": 0.01,
    "E_star": 1e11,
    "normal_damping": 1.0,
    "tangent_damping_h": 1e6,
}

# tangential speed below which a foot counts as sticking
STICK_SPEED = 1e-9


class InclineBox:
    """Box whose bottom corners carry rigid spherical feet pressed into an elastic ramp.

    Foot i has normal value -d^1.5 when it penetrates by d (its separation
    otherwise), a unit-normal Jacobian at its lowest point, K_n = E* sqrt(r),
    and tangential rows with K = 0 and B = tangent_damping_h / h.
    """

    def __init__(self, h, mu, angle_deg, mass, length, width, height, foot_radius, E_star, normal_damping, tangent_damping_h):
        if mu < 0.0:
            raise ScenarioError(f"friction coefficient must be nonnegative, got {mu}")
        if not (mass > 0.0 and length > 0.0 and width > 0.0 and height > 0.0):
            raise ScenarioError("box mass and dimensions must be positive")
        self.h = h
        self.mu = mu
        self.foot = HertzFoot(foot_radius, E_star)
        self.normal_damping = normal_damping
        self.tangent_damping = tangent_damping_h / h
        angle = math.radians(angle_deg)
        gravity = GRAVITY * np.array([-math.sin(angle), 0.0, -math.cos(angle)])
        inertia = mass / 12.0 * np.diag([width**2 + height**2, length**2 + height**2, length**2 + width**2])
        self.bodies = RigidBodies([mass], [inertia], gravity=gravity)
        self.model = self.bodies.model()
        self.feet = np.array(
            [[sx * length / 2, sy * width / 2, -height / 2] for sx in (1.0, -1.0) for sy in (1.0, -1.0)]
        )
        self.normal = np.array([0.0, 0.0, 1.0])
        self.tangents = tangent_basis(self.normal)
        # at rest, each foot pressed to the depth where the Hertz force carries a quarter of the normal weight
        self.rest_depth = (mass * GRAVITY * math.cos(angle) / 4.0 / self.foot.stiffness) ** (2.0 / 3.0)
        start = np.array([0.0, 0.0, height / 2 + foot_radius - self.rest_depth])
        q, v = self.bodies.pack([start], [np.array([1.0, 0.0, 0.0, 0.0])])
        self.initial_state = GeneralizedState(q, v)

    def contact_offsets(self, rotation: np.ndarray) -> np.ndarray:
        """World offsets from the box centre to each foot's lowest point."""
        return self.feet @ rotation.T - self.foot.r * self.normal

    def geometry(self, t: float, state: GeneralizedState) -> Geometry:
        body = self.bodies.body(state.q, state.v, 0)
        offsets = self.contact_offsets(body.rotation)
        centers = body.position + self.feet @ body.rotation.T
        depth = self.foot.r - centers[:, 2]
        phi_n = np.array([hertz_constraint_value(d, self.foot) for d in depth])
        rows = {key: [] for key in ("n", "r", "s")}
        bias = []
        for a in offsets:
            rows["n"].append(self.bodies.point_row(body, a, self.normal))
            rows["r"].append(self.bodies.point_row(body, a, self.tangents[0]))
            rows["s"].append(self.bodies.point_row(body, a, self.tangents[1]))
            bias.append(self.bodies.point_bias(body, a, self.normal))
        count = len(offsets)
        zeros = np.zeros(count)
        G_n, G_r, G_s = (np.array(rows[key]) for key in ("n", "r", "s"))
        normal = ConstraintBlock(
            Family.NORMAL, phi_n, G_n @ state.v, G_n, np.array(bias),
            np.full(count, self.foot.stiffness), np.full(count, self.normal_damping),
        )
        tangent_r = ConstraintBlock(
            Family.TANGENT_R, zeros, G_r @ state.v, G_r, zeros, zeros, np.full(count, self.tangent_damping)
        )
        tangent_s = ConstraintBlock(
            Family.TANGENT_S, zeros, G_s @ state.v, G_s, zeros, zeros, np.full(count, self.tangent_damping)
        )
        return Geometry([], ContactSet(normal, tangent_r, tangent_s, np.full(count, self.mu)))

    def energy(self, state: GeneralizedState) -> float:
        return self.bodies.kinetic_energy(state.v) + self.bodies.potential_energy(state.q)


def run_incline_box(cfg: ScenarioConfig) -> Trajectory:
    """Box released at rest on the ramp.

    Metrics: slide distance of the centre along the ramp, largest tangential
    force, mean per-foot normal force at the final step, and the largest
    friction power sum_i lambda_t,i . v_t,i over sliding steps (nonpositive
    when friction opposes sliding).
    """
    params = cfg.resolved(DEFAULTS)
    system = InclineBox(cfg.h, **params)
    friction_power: list[float] = []
    sliding_steps = [0]

    def observe(k, t0, state, geom, result):
        contacts = geom.contacts
        v1 = result.state.v
        tangential = np.column_stack([contacts.tangent_r.G @ v1, contacts.tangent_s.G @ v1])
        forces = np.column_stack([result.lam[Family.TANGENT_R], result.lam[Family.TANGENT_S]])
        active = result.active[Family.NORMAL]
        sliding = [i for i in active if np.linalg.norm(tangential[i]) > STICK_SPEED]
        if sliding:
            sliding_steps[0] += 1
            friction_power.append(float(sum(forces[i] @ tangential[i] for i in sliding)))

    traj = integrate(system, cfg, params, observer=observe)
    displacement = traj.q[:, :2] - traj.q[0, :2]
    tangential = np.hypot(traj.lam["r"], traj.lam["s"])
    traj.metrics["slide_distance"] = float(np.linalg.norm(displacement[-1]))
    traj.metrics["max_tangent_force"] = float(np.max(tangential))
    traj.metrics["foot_normal_force"] = float(np.mean(traj.lam["n"][-1]))
    traj.metrics["sliding_steps"] = sliding_steps[0]
    traj.metrics["max_friction_power"] = max(friction_power) if friction_power else 0.0
    traj.step_data["friction_power"] = np.array(friction_power)
    return traj
