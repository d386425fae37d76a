"""Scalar spring-mass-damper lab for comparing first-order Euler schemes.

The system is m*x'' + b*x' + k*x = f with state y = (x, v).  Each scheme is a
linear map y1 = A y0 + c, and its stability is read off the spectral radius
of A.  Eigenvalues come from the characteristic quadratic
p(z) = z^2 - tr(A) z + det(A); the quantities tr, det, p(1) and p(-1) are
written per scheme in closed form so that the distance of the spectral radius
from one is resolved without cancellation even when it is far below machine
epsilon relative to one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Scheme(enum.Enum):
    EXPLICIT_EULER = "explicit"
    SEMI_IMPLICIT_EULER = "semi-implicit"
    IMPLICIT_EULER = "implicit"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        key = name.strip().lower().replace("_", "-")
        aliases = {
            "explicit": cls.EXPLICIT_EULER,
            "explicit-euler": cls.EXPLICIT_EULER,
            "semi-implicit": cls.SEMI_IMPLICIT_EULER,
            "semi-implicit-euler": cls.SEMI_IMPLICIT_EULER,
            "symplectic": cls.SEMI_IMPLICIT_EULER,
            "implicit": cls.IMPLICIT_EULER,
            "implicit-euler": cls.IMPLICIT_EULER,
        }
        if key not in aliases:
            raise ValueError(f"unknown scheme {name!r}")
        return aliases[key]


class Stability(enum.Enum):
    STABLE = "Stable"
    MARGINAL = "Marginal"
    UNSTABLE = "Unstable"


@dataclass(frozen=True)
class MsdParams:
    m: float
    k: float
    b: float
    f: float = 0.0

    def __post_init__(self) -> None:
        if not self.m > 0.0:
            raise ValueError(f"mass must be positive, got {self.m}")
        if not self.k >= 0.0:
            raise ValueError(f"stiffness must be nonnegative, got {self.k}")
        if not self.b >= 0.0:
            raise ValueError(f"damping must be nonnegative, got {self.b}")


@dataclass(frozen=True)
class MsdState:
    x: float
    v: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.v)):
            raise ValueError("state entries must be finite")

    def norm(self) -> float:
        return math.hypot(self.x, self.v)


@dataclass(frozen=True)
class StabilityClass:
    label: Stability
    spectral_radius: float
    # 1 - rho, computed without cancellation
    contraction_margin: float


class MsdOverflowError(ArithmeticError):
    """Raised when a simulated trajectory leaves the finite floating-point range."""

    def __init__(self, step: int, trajectory: list[MsdState]):
        super().__init__(f"state became non-finite at step {step}")
        self.step = step
        self.trajectory = trajectory


def _check_step(h: float) -> None:
    if not h > 0.0 or not math.isfinite(h):
        raise ValueError(f"timestep must be positive and finite, got {h}")


def iteration_matrix(scheme: Scheme, p: MsdParams, h: float) -> np.ndarray:
    """Homogeneous update matrix A with y1 = A y0 + forcing."""
    _check_step(h)
    m, k, b = p.m, p.k, p.b
    if scheme is Scheme.EXPLICIT_EULER:
        return np.array([[1.0, h], [-h * k / m, 1.0 - h * b / m]])
    if scheme is Scheme.SEMI_IMPLICIT_EULER:
        c = 1.0 / (1.0 + h * b / m)
        return np.array(
            [[1.0 - h * h * k * c / m, h * c], [-h * k * c / m, c]]
        )
    if scheme is Scheme.IMPLICIT_EULER:
        den = 1.0 + h * b / m + h * h * k / m
        return np.array(
            [[1.0 - h * h * k / (m * den), h / den], [-h * k / (m * den), 1.0 / den]]
        )
    raise ValueError(f"unsupported scheme {scheme}")


def forcing_vector(scheme: Scheme, p: MsdParams, h: float) -> np.ndarray:
    """Affine term c of y1 = A y0 + c contributed by the constant force f."""
    _check_step(h)
    m, k, b, f = p.m, p.k, p.b, p.f
    if scheme is Scheme.EXPLICIT_EULER:
        return np.array([0.0, h * f / m])
    if scheme is Scheme.SEMI_IMPLICIT_EULER:
        dv = (h * f / m) / (1.0 + h * b / m)
        return np.array([h * dv, dv])
    if scheme is Scheme.IMPLICIT_EULER:
        dv = (h * f / m) / (1.0 + h * b / m + h * h * k / m)
        return np.array([h * dv, dv])
    raise ValueError(f"unsupported scheme {scheme}")


def _characteristic_terms(scheme: Scheme, p: MsdParams, h: float):
    """Return (tr, det, 1 - det, tr^2/4 - det, p(1), p(-1)) without cancellation."""
    a = h * p.b / p.m
    s = h * h * p.k / p.m
    if scheme is Scheme.EXPLICIT_EULER:
        return 2.0 - a, 1.0 - a + s, a - s, 0.25 * a * a - s, s, 4.0 - 2.0 * a + s
    if scheme is Scheme.SEMI_IMPLICIT_EULER:
        den = 1.0 + a
        disc = (0.25 * (a - s) ** 2 - s) / (den * den)
        return (2.0 + a - s) / den, 1.0 / den, a / den, disc, s / den, (4.0 + 2.0 * a - s) / den
    if scheme is Scheme.IMPLICIT_EULER:
        den = 1.0 + a + s
        disc = (0.25 * a * a - s) / (den * den)
        return (2.0 + a) / den, 1.0 / den, (a + s) / den, disc, s / den, (4.0 + 2.0 * a + s) / den
    raise ValueError(f"unsupported scheme {scheme}")


def spectral_radius(scheme: Scheme, p: MsdParams, h: float) -> tuple[float, float]:
    """Spectral radius rho of the iteration matrix and the margin 1 - rho."""
    _check_step(h)
    tr, det, one_minus_det, disc, p_plus, p_minus = _characteristic_terms(scheme, p, h)
    half = 0.5 * tr
    if disc < 0.0:
        # complex pair on the circle of radius sqrt(det)
        rho = math.sqrt(det)
        return rho, one_minus_det / (1.0 + rho)
    root = math.sqrt(disc)
    if half >= 0.0:
        hi = half + root
        # smaller root from the product of roots, free of cancellation
        lo = det / hi if hi != 0.0 else half - root
    else:
        lo = half - root
        hi = det / lo
    if abs(hi) >= abs(lo):
        if hi < 0.0:
            return abs(hi), 1.0 + hi
        # (1 - hi)(1 - lo) = p(1), and 1 - lo > 0 fixes the sign
        margin = p_plus / (1.0 - lo) if lo < 1.0 else 1.0 - hi
        return hi, margin
    # dominant root is negative: (1 + lo)(1 + hi) = p(-1)
    margin = p_minus / (1.0 + hi) if hi > -1.0 else 1.0 + lo
    return abs(lo), margin


def classify_stability(
    scheme: Scheme, p: MsdParams, h: float, band: float = 0.0
) -> StabilityClass:
    """Classify the scheme by spectral radius.

    Stable iff 1 - rho > band, Marginal iff |1 - rho| <= band, else Unstable.
    With the default band of zero the decision rests on the exactly resolved
    margin, so undamped symplectic Euler (margin identically zero) is Marginal
    while lightly damped implicit Euler with a margin of 1e-17 is Stable.
    """
    rho, margin = spectral_radius(scheme, p, h)
    if margin > band:
        label = Stability.STABLE
    elif margin >= -band:
        label = Stability.MARGINAL
    else:
        label = Stability.UNSTABLE
    return StabilityClass(label, rho, margin)


def simulate_msd(
    scheme: Scheme, p: MsdParams, y0: MsdState, h: float, n: int
) -> list[MsdState]:
    """Apply the chosen update rule n times; returns n + 1 states.

    Raises MsdOverflowError carrying the finite prefix when a state overflows.
    """
    _check_step(h)
    if n < 1:
        raise ValueError(f"step count must be at least 1, got {n}")
    m, k, b, f = p.m, p.k, p.b, p.f
    x, v = y0.x, y0.v
    out = [y0]
    for i in range(1, n + 1):
        if scheme is Scheme.EXPLICIT_EULER:
            x, v = x + h * v, v + (h / m) * (f - b * v - k * x)
        elif scheme is Scheme.SEMI_IMPLICIT_EULER:
            v = (v + (h / m) * (f - k * x)) / (1.0 + h * b / m)
            x = x + h * v
        else:
            v = (v + (h / m) * (f - k * x)) / (1.0 + h * b / m + h * h * k / m)
            x = x + h * v
        if not (math.isfinite(x) and math.isfinite(v)):
            raise MsdOverflowError(i, out)
        out.append(MsdState(x, v))
    return out


def trajectory_norms(trajectory: list[MsdState]) -> np.ndarray:
    return np.array([s.norm() for s in trajectory])
