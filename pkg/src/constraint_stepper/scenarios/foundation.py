"""Rigid cube resting on a Winkler foundation of independent vertical springs."""

from __future__ import annotations

import math

import numpy as np

from ..dynamics_core import ConstraintBlock, Family, GeneralizedState
from .common import Geometry, ScenarioConfig, ScenarioError, Trajectory, integrate
from .rigid import RigidBodies

# The load point (side/2)(cos 10t, sin 10t, 1) lies on the top face in the
# cube frame; the force always points along world -z.
DEFAULTS = {
    "side": 1.0,
    "density": 8.0,
    "depth": 1.0,
    "elements": 100,
    "youngs_modulus": 1e7,
    "damping": 1.0,
    "load": 5.0,
    "load_rate": 10.0,
}


class ElasticFoundation:
    """Cube whose bottom face carries one body-fixed sample point per foundation element.

    Element i contributes the unilateral row phi_i = height of its sample point
    above the undeformed foundation top (z = 0), with K = E * area / depth.
    """

    def __init__(self, side, density, depth, elements, youngs_modulus, damping, load, load_rate):
        per_side = int(round(math.sqrt(elements)))
        if per_side * per_side != elements or elements < 1:
            raise ScenarioError(f"element count must be a positive square, got {elements}")
        if not (side > 0.0 and density > 0.0 and depth > 0.0 and youngs_modulus > 0.0):
            raise ScenarioError("side, density, depth and modulus must be positive")
        if damping < 0.0:
            raise ScenarioError("damping must be nonnegative")
        self.side = side
        self.mass = density * side**3
        self.load = load
        self.load_rate = load_rate
        self.element_stiffness = youngs_modulus * (side * side / elements) / depth
        self.damping = damping
        centers = (np.arange(per_side) + 0.5) / per_side * side - 0.5 * side
        gx, gy = np.meshgrid(centers, centers, indexing="ij")
        self.samples = np.column_stack([gx.ravel(), gy.ravel(), np.full(elements, -0.5 * side)])
        inertia = self.mass * side * side / 6.0 * np.eye(3)
        self.bodies = RigidBodies([self.mass], [inertia], external=self.external_force)
        self.model = self.bodies.model()
        q, v = self.bodies.pack([np.array([0.0, 0.0, 0.5 * side])], [np.array([1.0, 0.0, 0.0, 0.0])])
        self.initial_state = GeneralizedState(q, v)

    def load_point(self, t: float) -> np.ndarray:
        angle = self.load_rate * t
        return 0.5 * self.side * np.array([math.cos(angle), math.sin(angle), 1.0])

    def external_force(self, t: float, q: np.ndarray, v: np.ndarray) -> np.ndarray:
        body = self.bodies.body(q, v, 0)
        force = np.array([0.0, 0.0, -self.load])
        f = np.zeros(6)
        f[:3] = force
        f[3:] = np.cross(self.load_point(t), body.rotation.T @ force)
        return f

    def geometry(self, t: float, state: GeneralizedState) -> Geometry:
        body = self.bodies.body(state.q, state.v, 0)
        up = np.array([0.0, 0.0, 1.0])
        offsets = self.samples @ body.rotation.T
        heights = body.position[2] + offsets[:, 2]
        G = np.array([self.bodies.point_row(body, a, up) for a in offsets])
        bias = np.array([self.bodies.point_bias(body, a, up) for a in offsets])
        count = heights.size
        block = ConstraintBlock(
            Family.UNILATERAL,
            heights,
            G @ state.v,
            G,
            bias,
            np.full(count, self.element_stiffness),
            np.full(count, self.damping),
        )
        return Geometry([block])

    def energy(self, state: GeneralizedState) -> float:
        return self.bodies.kinetic_energy(state.v) + self.bodies.potential_energy(state.q)


def run_elastic_foundation(cfg: ScenarioConfig) -> Trajectory:
    """Cube on the foundation under a rotating downward load.

    Metrics: final velocity norm, largest penetration of any element, final
    centre height and largest tilt angle.
    """
    params = cfg.resolved(DEFAULTS)
    system = ElasticFoundation(**params)
    traj = integrate(system, cfg, params)
    traj.metrics["element_stiffness"] = system.element_stiffness
    traj.metrics["final_speed"] = float(np.linalg.norm(traj.v[-1]))
    traj.metrics["max_penetration"] = float(np.max(traj.phi_norm["u"]))
    traj.metrics["final_height"] = float(traj.q[-1, 2])
    tilt = 2.0 * np.arccos(np.clip(np.abs(traj.q[:, 3]), 0.0, 1.0))
    traj.metrics["max_tilt"] = float(np.max(tilt))
    return traj
