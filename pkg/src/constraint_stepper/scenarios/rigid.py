"""Free rigid bodies with quaternion orientation and body-frame angular velocity.

Each body contributes q = (position, quaternion w x y z) and
v = (linear velocity, body-frame angular velocity).  Quaternion rates are
(1/2) quat * (0, omega), and quaternions are renormalized after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from ..dynamics_core import SystemModel
from .common import GRAVITY

Q_SIZE = 7
V_SIZE = 6


def quat_to_matrix(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = quat / np.linalg.norm(quat)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_rate_matrix(quat: np.ndarray) -> np.ndarray:
    """4x3 map from body angular velocity to quaternion rate."""
    w, x, y, z = quat
    return 0.5 * np.array([[-x, -y, -z], [w, -z, y], [z, w, -x], [-y, x, w]])


def tangent_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (t1, t2) with (t1, t2, normal) right-handed.

    t1 is the normal crossed with the world axis of smallest absolute normal
    component (lowest index on ties).
    """
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    t1 = np.cross(normal, axis)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return t1, t2


@dataclass
class BodyView:
    """Pose and velocity of one body extracted from the generalized state."""

    index: int
    position: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    omega_body: np.ndarray

    @property
    def omega_world(self) -> np.ndarray:
        return self.rotation @ self.omega_body

    @property
    def v_slice(self) -> slice:
        return slice(V_SIZE * self.index, V_SIZE * (self.index + 1))


class RigidBodies:
    """A set of unconnected rigid bodies sharing one generalized state."""

    def __init__(
        self,
        masses: Sequence[float],
        inertias: Sequence[np.ndarray],
        gravity: np.ndarray = np.array([0.0, 0.0, -GRAVITY]),
        external: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None,
    ):
        self.masses = np.asarray(masses, dtype=float)
        self.inertias = [np.asarray(J, dtype=float) for J in inertias]
        if len(self.inertias) != self.masses.size:
            raise ValueError("one inertia per body is required")
        self.count = self.masses.size
        self.gravity = np.asarray(gravity, dtype=float)
        self.external = external
        blocks = []
        for m, J in zip(self.masses, self.inertias):
            blocks.append(np.diag([m, m, m]))
            blocks.append(J)
        self._mass = block_diag(*blocks)

    @property
    def m_q(self) -> int:
        return Q_SIZE * self.count

    @property
    def m_v(self) -> int:
        return V_SIZE * self.count

    def pack(self, positions, quats, velocities=None, omegas=None) -> tuple[np.ndarray, np.ndarray]:
        q = np.zeros(self.m_q)
        v = np.zeros(self.m_v)
        for i in range(self.count):
            q[Q_SIZE * i : Q_SIZE * i + 3] = positions[i]
            q[Q_SIZE * i + 3 : Q_SIZE * (i + 1)] = quats[i]
            if velocities is not None:
                v[V_SIZE * i : V_SIZE * i + 3] = velocities[i]
            if omegas is not None:
                v[V_SIZE * i + 3 : V_SIZE * (i + 1)] = omegas[i]
        return q, v

    def body(self, q: np.ndarray, v: np.ndarray, index: int) -> BodyView:
        qi = q[Q_SIZE * index : Q_SIZE * (index + 1)]
        vi = v[V_SIZE * index : V_SIZE * (index + 1)]
        return BodyView(index, qi[:3].copy(), quat_to_matrix(qi[3:]), vi[:3].copy(), vi[3:].copy())

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        return self._mass

    def kinematic_map(self, q: np.ndarray) -> np.ndarray:
        N = np.zeros((self.m_q, self.m_v))
        for i in range(self.count):
            N[Q_SIZE * i : Q_SIZE * i + 3, V_SIZE * i : V_SIZE * i + 3] = np.eye(3)
            N[Q_SIZE * i + 3 : Q_SIZE * (i + 1), V_SIZE * i + 3 : V_SIZE * (i + 1)] = quat_rate_matrix(
                q[Q_SIZE * i + 3 : Q_SIZE * (i + 1)]
            )
        return N

    def applied_force(self, t: float, q: np.ndarray, v: np.ndarray) -> np.ndarray:
        f = np.zeros(self.m_v)
        for i in range(self.count):
            omega = v[V_SIZE * i + 3 : V_SIZE * (i + 1)]
            f[V_SIZE * i : V_SIZE * i + 3] = self.masses[i] * self.gravity
            f[V_SIZE * i + 3 : V_SIZE * (i + 1)] = -np.cross(omega, self.inertias[i] @ omega)
        if self.external is not None:
            f += self.external(t, q, v)
        return f

    def normalize(self, q: np.ndarray) -> np.ndarray:
        out = q.copy()
        for i in range(self.count):
            quat = out[Q_SIZE * i + 3 : Q_SIZE * (i + 1)]
            out[Q_SIZE * i + 3 : Q_SIZE * (i + 1)] = quat / np.linalg.norm(quat)
        return out

    def model(self) -> SystemModel:
        return SystemModel(self.mass_matrix, self.kinematic_map, self.applied_force, project=self.normalize)

    def kinetic_energy(self, v: np.ndarray) -> float:
        return 0.5 * float(v @ (self._mass @ v))

    def potential_energy(self, q: np.ndarray) -> float:
        total = 0.0
        for i in range(self.count):
            total -= self.masses[i] * float(self.gravity @ q[Q_SIZE * i : Q_SIZE * i + 3])
        return total

    def point_row(self, body: BodyView, offset_world: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Jacobian row (over this body's 6 velocities) of direction . (velocity of the point)."""
        row = np.zeros(V_SIZE)
        row[:3] = direction
        row[3:] = body.rotation.T @ np.cross(offset_world, direction)
        return row

    def point_row_full(self, body: BodyView, offset_world: np.ndarray, direction: np.ndarray) -> np.ndarray:
        row = np.zeros(self.m_v)
        row[body.v_slice] = self.point_row(body, offset_world, direction)
        return row

    @staticmethod
    def point_velocity(body: BodyView, offset_world: np.ndarray) -> np.ndarray:
        return body.velocity + np.cross(body.omega_world, offset_world)

    @staticmethod
    def point_bias(body: BodyView, offset_world: np.ndarray, direction: np.ndarray) -> float:
        """Velocity-product acceleration of a body point along a fixed world direction."""
        omega = body.omega_world
        return float(direction @ np.cross(omega, np.cross(omega, offset_world)))

