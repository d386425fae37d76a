"""One-solve update for systems whose constraints are all bilateral.

With P = h^2 K + h B and W = G M^-1 G^T the next constraint rate solves

    (I + W P) phi1' = phi0' - h W K phi0 + h G M^-1 f,

followed by phi1 = phi0 + h phi1' and lambda1 = -K phi1 - B phi1' - Mhat Gdot v0.
The matrix I + W P has eigenvalues 1 + eig(P^1/2 W P^1/2) >= 1, so it is always
invertible; it is not symmetric in general and is solved by LU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .dynamics_core import ConstraintBlock, Family, StepContext, delassus_from_factor, mhat_apply


@dataclass
class BilateralSolution:
    phi1: np.ndarray
    dphi1: np.ndarray
    lambda1: np.ndarray
    # I + W(h^2 K + h B); Y is its inverse
    y_inverse: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        n = self.y_inverse.shape[0]
        if n == 0:
            return np.zeros((0, 0))
        return sla.lu_solve(sla.lu_factor(self.y_inverse), np.eye(n))


def solve_bilateral(block: ConstraintBlock, W: np.ndarray, gminv_f: np.ndarray, h: float) -> BilateralSolution:
    """Closed-form bilateral step given W = G M^-1 G^T and the product G M^-1 f."""
    if not h > 0.0:
        raise ValueError(f"timestep must be positive, got {h}")
    if block.family is not Family.BILATERAL:
        raise ValueError(f"expected a bilateral block, got {block.family.name}")
    n = block.size
    if n == 0:
        z = np.zeros(0)
        return BilateralSolution(z, z, z, np.zeros((0, 0)))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    gminv_f = np.asarray(gminv_f, dtype=float).reshape(-1)
    K, B = block.K, block.B
    y_inverse = np.eye(n) + W * (h * h * K + h * B)[None, :]
    rhs = block.dphi0 - h * (W @ (K * block.phi0)) + h * gminv_f
    dphi1 = sla.lu_solve(sla.lu_factor(y_inverse), rhs)
    phi1 = block.phi0 + h * dphi1
    lambda1 = -K * phi1 - B * dphi1 - mhat_apply(W, block.gdot_v)
    return BilateralSolution(phi1, dphi1, lambda1, y_inverse)


def solve_bilateral_step(block: ConstraintBlock, context: StepContext, h: float) -> BilateralSolution:
    """Convenience wrapper computing W and G M^-1 f from an evaluated step context."""
    W = delassus_from_factor(block.G, context.mass)
    gminv_f = block.G @ context.mass.solve(context.f) if block.size else np.zeros(0)
    return solve_bilateral(block, W, gminv_f, h)
