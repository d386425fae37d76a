"""Multibody data model, constraint blocks, Delassus operator and the state update.

Generalized coordinates q evolve by q' = N(q) v, and the momentum balance is
M(q) v' = sum_j G_j^T lambda_j + f(t, q, v).  Every constraint family carries
its value phi, rate phi' = G v, Jacobian G and the velocity product Gdot v,
together with diagonal stiffness K and damping B that define the force law
lambda = -K phi - B phi' - Mhat Gdot v.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla


class Family(enum.Enum):
    BILATERAL = "b"
    UNILATERAL = "u"
    NORMAL = "n"
    TANGENT_R = "r"
    TANGENT_S = "s"


class MassMatrixError(np.linalg.LinAlgError):
    """The mass matrix could not be factored as symmetric positive definite."""


@dataclass
class GeneralizedState:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v)))

    def copy(self) -> "GeneralizedState":
        return GeneralizedState(self.q.copy(), self.v.copy())


@dataclass
class SystemModel:
    """Callbacks describing the unconstrained dynamics.

    ``project`` is an optional map applied to q after each step, used for
    example to renormalize quaternions.
    """

    mass_matrix: Callable[[np.ndarray], np.ndarray]
    kinematic_map: Callable[[np.ndarray], np.ndarray]
    applied_force: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None


class MassFactor:
    """Cholesky factorization of M; applies M^-1 without forming it."""

    def __init__(self, M: np.ndarray):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise MassMatrixError(f"mass matrix must be square, got {M.shape}")
        self.M = M
        self.size = M.shape[0]
        try:
            self._factor = sla.cho_factor(M, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise MassMatrixError(f"mass matrix is not positive definite: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.size == 0:
            return np.zeros(rhs.shape)
        return sla.cho_solve(self._factor, rhs, check_finite=False)


@dataclass
class StepContext:
    """Dynamics quantities evaluated once at (t0, q0, v0) and shared by a step."""

    t0: float
    state: GeneralizedState
    mass: MassFactor
    N: np.ndarray
    f: np.ndarray

    @classmethod
    def evaluate(cls, model: SystemModel, state: GeneralizedState, t0: float) -> "StepContext":
        mass = MassFactor(model.mass_matrix(state.q))
        N = np.atleast_2d(np.asarray(model.kinematic_map(state.q), dtype=float))
        f = np.asarray(model.applied_force(t0, state.q, state.v), dtype=float).reshape(-1)
        m_v = mass.size
        if N.shape != (state.q.size, m_v):
            raise ValueError(f"kinematic map has shape {N.shape}, expected {(state.q.size, m_v)}")
        if f.size != m_v or state.v.size != m_v:
            raise ValueError("force and velocity lengths must match the mass matrix")
        return cls(t0, state, mass, N, f)


def _diag_vector(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        if arr.shape != (n, n) or np.any(arr - np.diag(np.diag(arr))):
            raise ValueError(f"{name} must be a diagonal {n}x{n} matrix")
        arr = np.diag(arr).copy()
    arr = np.broadcast_to(arr.reshape(-1) if arr.ndim else arr, (n,)).astype(float)
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} entries must be finite and nonnegative")
    return arr


@dataclass
class ConstraintBlock:
    """Rows of one constraint family evaluated at the start of a step.

    K and B are stored as their diagonal entries.
    """

    family: Family
    phi0: np.ndarray
    dphi0: np.ndarray
    G: np.ndarray
    gdot_v: np.ndarray
    K: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        self.phi0 = np.asarray(self.phi0, dtype=float).reshape(-1)
        n = self.phi0.size
        self.dphi0 = np.asarray(self.dphi0, dtype=float).reshape(-1)
        self.gdot_v = np.asarray(self.gdot_v, dtype=float).reshape(-1)
        self.G = np.asarray(self.G, dtype=float)
        if self.G.ndim == 1:
            self.G = self.G.reshape(1, -1) if n == 1 else self.G.reshape(n, -1)
        if self.dphi0.size != n or self.gdot_v.size != n or self.G.shape[0] != n:
            raise ValueError(
                f"{self.family.name} block rows disagree: phi0 {n}, dphi0 {self.dphi0.size}, "
                f"G {self.G.shape}, gdot_v {self.gdot_v.size}"
            )
        self.K = _diag_vector(self.K, n, "K")
        self.B = _diag_vector(self.B, n, "B")

    @property
    def size(self) -> int:
        return self.phi0.size

    @property
    def dofs(self) -> int:
        return self.G.shape[1]

    @classmethod
    def empty(cls, family: Family, m_v: int) -> "ConstraintBlock":
        z = np.zeros(0)
        return cls(family, z, z, np.zeros((0, m_v)), z, z, z)

    def rows(self, index: Sequence[int] | np.ndarray) -> "ConstraintBlock":
        idx = np.asarray(index, dtype=int)
        return ConstraintBlock(
            self.family,
            self.phi0[idx],
            self.dphi0[idx],
            self.G[idx, :],
            self.gdot_v[idx],
            self.K[idx],
            self.B[idx],
        )

    @staticmethod
    def stack(family: Family, blocks: Sequence["ConstraintBlock"], m_v: int) -> "ConstraintBlock":
        blocks = [b for b in blocks if b.size]
        if not blocks:
            return ConstraintBlock.empty(family, m_v)
        return ConstraintBlock(
            family,
            np.concatenate([b.phi0 for b in blocks]),
            np.concatenate([b.dphi0 for b in blocks]),
            np.vstack([b.G for b in blocks]),
            np.concatenate([b.gdot_v for b in blocks]),
            np.concatenate([b.K for b in blocks]),
            np.concatenate([b.B for b in blocks]),
        )


@dataclass
class ContactSet:
    """Frictional contacts; row i of every block refers to contact point i.

    ``tangent_s`` is None for planar problems.
    """

    normal: ConstraintBlock
    tangent_r: ConstraintBlock
    tangent_s: Optional[ConstraintBlock]
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        n = self.normal.size
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n,)).copy()
        if self.tangent_r.size != n or (self.tangent_s is not None and self.tangent_s.size != n):
            raise ValueError("contact blocks must have one row per contact point")
        if np.any(self.mu < 0.0) or not np.all(np.isfinite(self.mu)):
            raise ValueError("friction coefficients must be finite and nonnegative")
        if self.normal.family is not Family.NORMAL or self.tangent_r.family is not Family.TANGENT_R:
            raise ValueError("contact blocks carry the wrong families")
        if self.tangent_s is not None and self.tangent_s.family is not Family.TANGENT_S:
            raise ValueError("contact s block carries the wrong family")

    @property
    def size(self) -> int:
        return self.normal.size

    @property
    def planar(self) -> bool:
        return self.tangent_s is None

    def rows(self, index) -> "ContactSet":
        idx = np.asarray(index, dtype=int)
        return ContactSet(
            self.normal.rows(idx),
            self.tangent_r.rows(idx),
            None if self.tangent_s is None else self.tangent_s.rows(idx),
            self.mu[idx],
        )

    @classmethod
    def empty(cls, m_v: int, planar: bool = False) -> "ContactSet":
        return cls(
            ConstraintBlock.empty(Family.NORMAL, m_v),
            ConstraintBlock.empty(Family.TANGENT_R, m_v),
            None if planar else ConstraintBlock.empty(Family.TANGENT_S, m_v),
            np.zeros(0),
        )


def delassus_from_factor(G: np.ndarray, mass: MassFactor, G_other: Optional[np.ndarray] = None) -> np.ndarray:
    """W = G M^-1 G_other^T (G_other defaults to G), symmetrized when square."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Go = G if G_other is None else np.atleast_2d(np.asarray(G_other, dtype=float))
    if G.shape[0] == 0 or Go.shape[0] == 0:
        return np.zeros((G.shape[0], Go.shape[0]))
    W = G @ mass.solve(Go.T)
    if G_other is None:
        W = 0.5 * (W + W.T)
    return W


def delassus(G: np.ndarray, model: SystemModel, q: np.ndarray) -> np.ndarray:
    """Delassus operator W = G M(q)^-1 G^T via a Cholesky factor of M."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    mass = MassFactor(model.mass_matrix(q))
    if G.shape[1] != mass.size:
        raise ValueError(f"Jacobian has {G.shape[1]} columns but M is {mass.size}x{mass.size}")
    return delassus_from_factor(G, mass)


# relative singular-value cutoff separating the range of W from round-off
MHAT_RCOND = 1e-12


def mhat_apply(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply Mhat = W^-1; minimum-norm least-squares when W is singular."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        return np.zeros(0)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(x):
        return np.zeros_like(x)
    y, *_ = np.linalg.lstsq(W, x, rcond=MHAT_RCOND)
    return y


def semi_explicit_update(
    state0: GeneralizedState,
    model: SystemModel,
    t0: float,
    lambda_blocks: Sequence[tuple[np.ndarray, np.ndarray]],
    h: float,
    context: Optional[StepContext] = None,
) -> GeneralizedState:
    """v1 = v0 + h M0^-1 (sum G^T lambda + f0), then q1 = q0 + h N0 v1."""
    if not h > 0.0:
        raise ValueError(f"timestep must be positive, got {h}")
    ctx = context if context is not None else StepContext.evaluate(model, state0, t0)
    total = ctx.f.copy()
    for G, lam in lambda_blocks:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        if lam.size == 0:
            continue
        if not np.all(np.isfinite(lam)):
            raise ValueError("constraint forces must be finite")
        total += np.atleast_2d(G).T @ lam
    v1 = state0.v + h * ctx.mass.solve(total)
    q1 = state0.q + h * (ctx.N @ v1)
    if model.project is not None:
        q1 = np.asarray(model.project(q1), dtype=float)
    return GeneralizedState(q1, v1)
