"""Strictly convex QP / QCQP solver for the per-step force programs.

Problem form:

    minimize    1/2 x^T H x + g^T x
    subject to  A x >= q,
                x_i >= 0            for i in ``nonneg``,
                mu^2 x_n^2 >= x_r^2 + x_s^2,  x_n >= 0   for every cone.

The method is a primal log-barrier interior point: starting from a strictly
feasible point (found by the doubling construction in
``initial_feasible_point``) it minimizes ``F(x)/sigma - t * sum(log slack)``
with damped Newton steps while t shrinks by a constant factor per outer
iteration.  ``sigma`` rescales the objective so that t is meaningful in
relative terms.  Cones enter through the smooth quadratic
mu^2 x_n^2 - x_r^2 - x_s^2, whose negative logarithm is the standard
self-concordant barrier of the Lorentz cone after scaling x_n by mu.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog, nnls


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"


class InfeasibleStartError(RuntimeError):
    """The doubling construction did not reach a strictly feasible point."""


@dataclass(frozen=True)
class Cone:
    """Friction cone mu^2 x_n^2 >= x_r^2 + x_s^2 on the given indices (s optional)."""

    n: int
    r: int
    s: Optional[int]
    mu: float

    def indices(self) -> list[int]:
        return [self.n, self.r] + ([] if self.s is None else [self.s])


@dataclass
class ConvexProblem:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    q: np.ndarray
    nonneg: tuple[int, ...] = ()
    cones: tuple[Cone, ...] = ()
    # entries held at zero by the feasible-start construction besides cone tangentials
    tangential: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.size
        self.H = np.asarray(self.H, dtype=float).reshape(n, n)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.A = np.asarray(self.A, dtype=float).reshape(self.q.size, n)
        self.nonneg = tuple(int(i) for i in self.nonneg)
        self.tangential = tuple(int(i) for i in self.tangential)
        self.cones = tuple(self.cones)
        for i in self.nonneg:
            if not 0 <= i < n:
                raise ValueError(f"nonnegativity index {i} out of range")
        seen: set[int] = set()
        for c in self.cones:
            idx = c.indices()
            if len(set(idx)) != len(idx) or any(not 0 <= i < n for i in idx):
                raise ValueError(f"malformed cone {c}")
            if seen.intersection(idx):
                raise ValueError("cones must use disjoint indices")
            seen.update(idx)
            if not (c.mu >= 0.0 and math.isfinite(c.mu)):
                raise ValueError("friction coefficients must be finite and nonnegative")

    @property
    def size(self) -> int:
        return self.g.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.H @ x) + self.g @ x)


@dataclass
class SolverOptions:
    barrier_start: float = 1.0
    barrier_min: float = 1e-12
    barrier_factor: float = 10.0
    max_outer: int = 100
    max_inner: int = 50
    kkt_tol: float = 1e-8
    # Newton decrement threshold for centering (scaled objective units)
    centering_tol: float = 1e-14
    # barrier weight below which active-set polishing may end the solve early
    polish_from: float = 1e-1


@dataclass
class KktReport:
    stationarity: float
    primal: float
    complementarity: float
    scale: float
    multipliers: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def residual(self) -> float:
        """Largest residual relative to 1 + ||g||_inf."""
        return max(self.stationarity, self.primal, self.complementarity) / self.scale


@dataclass
class SolveReport:
    x: np.ndarray
    kkt_residual: float
    iterations: int
    status: SolveStatus
    outer_iterations: int = 0
    objective_history: list[float] = field(default_factory=list)
    kkt: Optional[KktReport] = None
    message: str = ""

    @property
    def lam(self) -> np.ndarray:
        return self.x


# ---------------------------------------------------------------------------
# feasibility


def _constraint_margins(prob: ConvexProblem, x: np.ndarray):
    lin = prob.A @ x - prob.q
    nn = x[list(prob.nonneg)] if prob.nonneg else np.zeros(0)
    cone = np.array([_cone_value(c, x) for c in prob.cones])
    cone_n = np.array([x[c.n] for c in prob.cones])
    return lin, nn, cone, cone_n


def _cone_value(c: Cone, x: np.ndarray) -> float:
    t2 = x[c.r] ** 2 + (0.0 if c.s is None else x[c.s] ** 2)
    return c.mu * c.mu * x[c.n] ** 2 - t2


def _start_scale(prob: ConvexProblem) -> float:
    return 1.0 + (float(np.max(np.abs(prob.q))) if prob.q.size else 0.0)


def is_strictly_feasible(prob: ConvexProblem, x: np.ndarray, margin: float = 0.0) -> bool:
    lin, nn, cone, cone_n = _constraint_margins(prob, x)
    return bool(
        np.all(lin > margin)
        and np.all(nn > margin)
        and np.all(cone > 0.0)
        and np.all(cone_n > margin)
    )


def initial_feasible_point(prob: ConvexProblem, max_doublings: int = 200) -> np.ndarray:
    """Strictly feasible start: tangential entries 0, all others lifted along a positive direction.

    Tangential entries are the cone r/s indices plus ``prob.tangential``.  The
    lifted entries start at a common value of 1 that doubles until
    A x >= q + margin with margin = 1e-6 * (1 + max|q|).  When the common value
    cannot work because some row of A has a nonpositive sum over the lifted
    columns, the direction is replaced by a positive vector d with A d > 0
    found by a small linear program; one exists whenever that block of A is a
    P-matrix, as I + P W is for diagonal P >= 0 and W positive semidefinite.
    """
    x = np.zeros(prob.size)
    if prob.q.size == 0 and not prob.nonneg and not prob.cones:
        return x
    if not _cones_open(prob):
        raise InfeasibleStartError("a zero-friction cone has an empty interior; eliminate its tangential entries first")
    held = set(prob.tangential)
    for c in prob.cones:
        held.update(c.indices()[1:])
    lifted = [i for i in range(prob.size) if i not in held]
    margin = 1e-6 * _start_scale(prob)
    directions = [np.ones(len(lifted))]
    lifted_rows = prob.A[:, lifted]
    if prob.q.size and np.any(lifted_rows @ directions[0] <= 0.0):
        direction = _positive_direction(lifted_rows)
        if direction is not None:
            directions = [direction]
    for direction in directions:
        level = 1.0
        for _ in range(max_doublings + 1):
            x[:] = 0.0
            x[lifted] = level * direction
            if is_strictly_feasible(prob, x, margin):
                return x
            level *= 2.0
    raise InfeasibleStartError(
        f"no strictly feasible point after {max_doublings} doublings; the inequality matrix is malformed"
    )


def _positive_direction(rows: np.ndarray) -> Optional[np.ndarray]:
    """d in [1e-3, 1]^k maximizing min_i (rows d)_i; None unless that minimum is positive."""
    m, k = rows.shape
    # variables (d, t): maximize t subject to t - rows d <= 0
    cost = np.zeros(k + 1)
    cost[-1] = -1.0
    a_ub = np.hstack([-rows, np.ones((m, 1))])
    bounds = [(1e-3, 1.0)] * k + [(None, 1.0)]
    res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(m), bounds=bounds, method="highs")
    if res.status != 0 or -res.fun <= 0.0:
        return None
    return res.x[:k]


def _cones_open(prob: ConvexProblem) -> bool:
    return all(c.mu > 0.0 for c in prob.cones)


# ---------------------------------------------------------------------------
# barrier machinery


class _Barrier:
    """Vectorized log-barrier terms of a problem without degenerate cones."""

    def __init__(self, prob: ConvexProblem):
        self.prob = prob
        self.A = prob.A
        self.q = prob.q
        self.nn = np.array(prob.nonneg, dtype=int)
        cones = prob.cones
        self.cn = np.array([c.n for c in cones], dtype=int)
        self.cr = np.array([c.r for c in cones], dtype=int)
        self.has_s = np.array([c.s is not None for c in cones], dtype=bool)
        self.cs = np.array([c.s if c.s is not None else c.r for c in cones], dtype=int)
        self.mu2 = np.array([c.mu * c.mu for c in cones])
        self.count = prob.q.size + self.nn.size + 2 * len(cones)

    def slacks(self, x):
        lin = self.A @ x - self.q
        nn = x[self.nn]
        if self.cn.size:
            n, r, s = x[self.cn], x[self.cr], np.where(self.has_s, x[self.cs], 0.0)
            cone = self.mu2 * n * n - r * r - s * s
        else:
            n = cone = np.zeros(0)
        return lin, nn, cone, n

    def feasible(self, x) -> bool:
        lin, nn, cone, n = self.slacks(x)
        return bool(np.all(lin > 0) and np.all(nn > 0) and np.all(cone > 0) and np.all(n > 0))

    def value(self, x) -> float:
        lin, nn, cone, _ = self.slacks(x)
        return -float(np.sum(np.log(lin)) + np.sum(np.log(nn)) + np.sum(np.log(cone)))

    def derivatives(self, x):
        """Gradient and Hessian of -sum(log slack)."""
        lin, nn, cone, n = self.slacks(x)
        size = x.size
        grad = np.zeros(size)
        hess = np.zeros((size, size))
        if lin.size:
            inv = 1.0 / lin
            grad -= self.A.T @ inv
            hess += self.A.T @ (self.A * (inv * inv)[:, None])
        if nn.size:
            inv = 1.0 / nn
            np.add.at(grad, self.nn, -inv)
            np.add.at(hess, (self.nn, self.nn), inv * inv)
        for k in range(self.cn.size):
            idx = [self.cn[k], self.cr[k]] + ([self.cs[k]] if self.has_s[k] else [])
            xi = x[idx]
            grad_c = -2.0 * xi
            grad_c[0] = 2.0 * self.mu2[k] * xi[0]
            curv = -2.0 * np.ones(len(idx))
            curv[0] = 2.0 * self.mu2[k]
            c = cone[k]
            grad[idx] -= grad_c / c
            hess[np.ix_(idx, idx)] += np.outer(grad_c, grad_c) / (c * c) - np.diag(curv) / c
        return grad, hess

    def max_step(self, x, d) -> float:
        """Largest alpha keeping x + alpha d strictly feasible (inf if unbounded)."""
        alpha = math.inf
        lin, nn, cone, n = self.slacks(x)
        if lin.size:
            rate = self.A @ d
            neg = rate < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-lin[neg] / rate[neg])))
        if nn.size:
            rate = d[self.nn]
            neg = rate < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-nn[neg] / rate[neg])))
        for k in range(self.cn.size):
            i, j, l = self.cn[k], self.cr[k], self.cs[k]
            s_on = self.has_s[k]
            dn, dr, ds = d[i], d[j], (d[l] if s_on else 0.0)
            xn, xr, xs = x[i], x[j], (x[l] if s_on else 0.0)
            a2 = self.mu2[k] * dn * dn - dr * dr - ds * ds
            a1 = 2.0 * (self.mu2[k] * xn * dn - xr * dr - xs * ds)
            alpha = min(alpha, _first_positive_root(a2, a1, cone[k]))
        return alpha


def _first_positive_root(a2: float, a1: float, a0: float) -> float:
    """Smallest alpha > 0 with a2 alpha^2 + a1 alpha + a0 = 0, given a0 > 0."""
    if a2 == 0.0:
        return -a0 / a1 if a1 < 0.0 else math.inf
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc < 0.0:
        return math.inf  # a2 > 0 here: the quadratic stays positive
    sq = math.sqrt(disc)
    # numerically stable pair of roots
    qv = -0.5 * (a1 + math.copysign(sq, a1))
    roots = []
    if qv != 0.0:
        roots.append(qv / a2)
        roots.append(a0 / qv)
    positive = [r for r in roots if r > 0.0]
    return min(positive) if positive else math.inf


def _newton_direction(hess: np.ndarray, grad: np.ndarray) -> Optional[np.ndarray]:
    """Solve hess d = -grad by Cholesky after symmetric diagonal equilibration."""
    diag = np.diag(hess)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        return None
    scale = 1.0 / np.sqrt(diag)
    balanced = hess * scale[:, None] * scale[None, :]
    rhs = grad * scale
    try:
        factor = sla.cho_factor(balanced, lower=True, check_finite=True)
        return -scale * sla.cho_solve(factor, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        pass
    # a tiny shift absorbs round-off loss of definiteness; anything larger is a failure
    try:
        factor = sla.cho_factor(balanced + 1e-13 * np.eye(hess.shape[0]), lower=True)
        return -scale * sla.cho_solve(factor, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None


def _barrier_minimize(prob: ConvexProblem, x0: np.ndarray, opts: SolverOptions, finisher=None):
    """Run the outer/inner barrier loop; returns (x, status, iterations, outers, history, message).

    ``finisher(x, t)`` is tried after each stage once t <= opts.polish_from; a
    non-None return ends the loop with that point.
    """
    H, g = prob.H, prob.g
    bar = _Barrier(prob)
    x = x0.astype(float).copy()
    if not bar.feasible(x):
        return x, SolveStatus.NUMERICAL_FAILURE, 0, 0, [], "starting point is not strictly feasible"
    if bar.count == 0:
        # unconstrained: one Newton step is exact
        d = _newton_direction(H, H @ x + g)
        if d is None:
            return x, SolveStatus.NUMERICAL_FAILURE, 0, 0, [], "objective Hessian is not positive definite"
        return x + d, SolveStatus.OPTIMAL, 1, 1, [prob.objective(x + d)], ""

    t = opts.barrier_start
    total = 0
    history: list[float] = []
    outer = 0
    while outer < opts.max_outer:
        outer += 1
        final_stage = t <= opts.barrier_min * (1.0 + 1e-9)

        def merit(z):
            return 0.5 * z @ (H @ z) + g @ z + t * bar.value(z)

        phi = merit(x)
        at = None
        for _ in range(opts.max_inner):
            bgrad, bhess = bar.derivatives(x)
            hess = H + t * bhess
            at = x
            grad = H @ x + g + t * bgrad
            d = _newton_direction(hess, grad)
            total += 1
            if d is None or not np.all(np.isfinite(d)):
                return x, SolveStatus.NUMERICAL_FAILURE, total, outer, history, "Newton system is not positive definite"
            decrement = -float(grad @ d)
            floor = max(1.0, abs(phi))
            if final_stage:
                if decrement <= 2.0 * opts.centering_tol * floor:
                    break
            elif decrement <= 1e-2 * t:
                # intermediate centers only need to be approximate
                break
            alpha = min(1.0, 0.99 * bar.max_step(x, d))
            accepted = False
            while alpha > 1e-14:
                trial = x + alpha * d
                if bar.feasible(trial):
                    val = merit(trial)
                    if not np.isfinite(val):
                        pass
                    elif val <= phi - 0.25 * alpha * decrement:
                        accepted = True
                    elif decrement <= 1e-8 * floor:
                        # merit differences are below round-off: trust the local Newton model
                        accepted = True
                    if accepted:
                        break
                alpha *= 0.5
            if not accepted:
                break
            x, phi = trial, val
        history.append(prob.objective(x))
        if final_stage:
            return x, SolveStatus.OPTIMAL, total, outer, history, ""
        if finisher is not None and t <= opts.polish_from:
            done = finisher(x, t)
            if done is not None:
                history.append(prob.objective(done))
                return done, SolveStatus.OPTIMAL, total, outer, history, ""
        t_next = max(t / opts.barrier_factor, opts.barrier_min)
        # predictor along the central path tangent: (H + t B'') dx/dt = -B'
        if at is not x:
            bgrad, bhess = bar.derivatives(x)
            hess = H + t * bhess
        tangent = _newton_direction(hess, bgrad)
        if tangent is not None and np.all(np.isfinite(tangent)):
            step = (t - t_next) * tangent
            alpha = min(1.0, 0.9 * bar.max_step(x, step))
            trial = x + alpha * step
            if bar.feasible(trial):
                x = trial
        t = t_next
    return x, SolveStatus.MAX_ITERATIONS, total, outer, history, "outer iteration cap reached"


def _split_degenerate(prob: ConvexProblem):
    """Pin tangential entries of zero-friction cones to 0 and drop those variables."""
    pinned: list[int] = []
    extra_nonneg: list[int] = []
    kept_cones: list[Cone] = []
    for c in prob.cones:
        if c.mu == 0.0:
            pinned += c.indices()[1:]
            extra_nonneg.append(c.n)
        else:
            kept_cones.append(c)
    if not pinned:
        return prob, None
    keep = np.array([i for i in range(prob.size) if i not in set(pinned)], dtype=int)
    remap = {int(old): new for new, old in enumerate(keep)}
    reduced = ConvexProblem(
        prob.H[np.ix_(keep, keep)],
        prob.g[keep],
        prob.A[:, keep],
        prob.q,
        tuple(sorted({remap[i] for i in list(prob.nonneg) + extra_nonneg if i in remap})),
        tuple(Cone(remap[c.n], remap[c.r], None if c.s is None else remap[c.s], c.mu) for c in kept_cones),
        tuple(remap[i] for i in prob.tangential if i in remap),
    )
    return reduced, keep


def _jacobi_scaling(prob: ConvexProblem) -> np.ndarray:
    """Per-variable scale d with unit diagonal for D H D; cone tangentials share one scale."""
    diag = np.abs(np.diag(prob.H)) if prob.size else np.zeros(0)
    d = 1.0 / np.sqrt(np.where(diag > 0.0, diag, 1.0))
    for c in prob.cones:
        tang = c.indices()[1:]
        d[tang] = float(np.min(d[tang]))
    return d


def _scaled(prob: ConvexProblem, d: np.ndarray, y0: np.ndarray) -> tuple[ConvexProblem, float]:
    """Problem in y = x / d with the objective divided by its gradient size at y0.

    The objective division makes the barrier weight t a relative quantity.
    """
    cones = tuple(Cone(c.n, c.r, c.s, c.mu * d[c.n] / d[c.r]) for c in prob.cones)
    H = prob.H * d[:, None] * d[None, :]
    g = prob.g * d
    sigma = 1.0 + (float(np.max(np.abs(H @ y0 + g))) if y0.size else 0.0)
    scaled = ConvexProblem(H / sigma, g / sigma, prob.A * d[None, :], prob.q, prob.nonneg, cones, prob.tangential)
    return scaled, sigma


def _kkt_solve(kkt: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """LU solve with a least-squares fallback for singular or ill-posed systems."""
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = None
    if sol is not None and np.all(np.isfinite(sol)):
        residual = float(np.max(np.abs(kkt @ sol - rhs))) if rhs.size else 0.0
        if residual <= 1e-10 * (1.0 + float(np.max(np.abs(rhs))) + float(np.max(np.abs(kkt) @ np.abs(sol)))):
            return sol
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol


def _polish(prob: ConvexProblem, x: np.ndarray, weight: float, max_rounds: int = 20) -> Optional[np.ndarray]:
    """Refine a barrier solution by solving the equality QP on its active set.

    Active constraints are guessed from slacks small against the barrier
    weight, then adjusted: a
    negative multiplier drops its constraint, a violated inactive constraint
    joins.  Cones on their boundary are handled by Newton steps on the
    Lagrangian until the boundary equation holds.  Returns None when no consistent set is found.
    """
    n = prob.size
    if n == 0:
        return None
    xmag = 1.0 + float(np.max(np.abs(x)))
    # a slack below its barrier multiplier estimate weight / slack marks the constraint active
    tau = max(np.sqrt(weight), 1e-6)
    lin = prob.A @ x - prob.q
    row_scale = 1.0 + np.abs(prob.q) + np.abs(prob.A) @ np.abs(x)
    act_lin = set(np.nonzero(lin <= tau * row_scale)[0].tolist())
    act_nn = {i for i in prob.nonneg if x[i] <= tau * xmag}
    apex: set[int] = set()
    boundary: set[int] = set()
    for k, c in enumerate(prob.cones):
        xc = x[c.indices()]
        tn = float(np.linalg.norm(xc[1:]))
        if float(np.linalg.norm(xc)) <= tau * xmag:
            apex.add(k)
        elif c.mu * xc[0] - tn <= tau * xmag * (1.0 + c.mu):
            boundary.add(k)
    act_nn -= {prob.cones[k].n for k in apex}
    current = x.copy()
    cone_mult: dict[int, float] = {}
    previous_move = np.inf
    for _ in range(max_rounds):
        rows, rhs, kinds = [], [], []
        curvature = np.zeros((n, n))
        for i in sorted(act_lin):
            rows.append(prob.A[i])
            rhs.append(prob.q[i])
            kinds.append(("lin", i))
        for i in sorted(act_nn):
            e = np.zeros(n)
            e[i] = 1.0
            rows.append(e)
            rhs.append(0.0)
            kinds.append(("nn", i))
        for k in sorted(apex):
            for j in prob.cones[k].indices():
                e = np.zeros(n)
                e[j] = 1.0
                rows.append(e)
                rhs.append(0.0)
                kinds.append(("apex", k))
        for k in sorted(boundary):
            c = prob.cones[k]
            tvec = current[c.indices()[1:]]
            tn = float(np.linalg.norm(tvec))
            if tn == 0.0:
                return None
            grad = np.zeros(n)
            grad[c.n] = c.mu
            grad[c.indices()[1:]] = -tvec / tn
            gap = c.mu * current[c.n] - tn
            # Lagrangian Hessian of -nu * (mu n - |t|) makes the re-linearization a Newton step
            tang = c.indices()[1:]
            unit = tvec / tn
            curvature[np.ix_(tang, tang)] += cone_mult.get(k, 0.0) / tn * (np.eye(len(tang)) - np.outer(unit, unit))
            rows.append(grad)
            rhs.append(grad @ current - gap)
            kinds.append(("cone", k))
        m = len(rows)
        C = np.array(rows).reshape(m, n)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = prob.H + curvature
        kkt[:n, n:] = -C.T
        kkt[n:, :n] = C
        # solve for the increment so that round-off scales with the step, not with x
        top = -(prob.H @ current + prob.g)
        sol = _kkt_solve(kkt, np.concatenate([top, np.array(rhs) - C @ current]))
        new, nu = current + sol[:n], sol[n:]
        if not np.all(np.isfinite(new)):
            return None
        mult_scale = 1e-10 * (1.0 + float(np.max(np.abs(prob.g))) + float(np.max(np.abs(prob.H @ new))))
        # sign checks on inequality multipliers; every wrong-signed one leaves the set
        negative = [(kind, idx) for j, (kind, idx) in enumerate(kinds) if kind in ("lin", "nn", "cone") and nu[j] < -mult_scale]
        for k in apex:
            c = prob.cones[k]
            yy = np.array([nu[j] for j, (kind, idx) in enumerate(kinds) if kind == "apex" and idx == k])
            if yy[0] < c.mu * float(np.linalg.norm(yy[1:])) - mult_scale:
                return None
        cone_mult = {idx: float(nu[j]) for j, (kind, idx) in enumerate(kinds) if kind == "cone"}
        if negative:
            for kind, idx in negative:
                {"lin": act_lin, "nn": act_nn, "cone": boundary}[kind].discard(idx)
            current = new
            continue
        # feasibility of the constraints left out
        lin = prob.A @ new - prob.q
        viol_scale = 1e-12 * (1.0 + np.abs(prob.q) + np.abs(prob.A) @ np.abs(new))
        bad_lin = [i for i in range(lin.size) if i not in act_lin and lin[i] < -viol_scale[i]]
        bad_nn = [i for i in prob.nonneg if i not in act_nn and new[i] < -1e-12 * xmag]
        bad_cone = []
        for k, c in enumerate(prob.cones):
            if k in apex:
                continue
            gap = c.mu * new[c.n] - float(np.linalg.norm(new[c.indices()[1:]]))
            if gap < -1e-12 * xmag * (1.0 + c.mu):
                bad_cone.append((gap, k))
        moved = float(np.max(np.abs(new - current)))
        # Newton on the cone boundary has converged once steps stop shrinking near round-off
        settled = moved <= 1e-13 * xmag or (moved <= 1e-9 * xmag and moved >= 0.5 * previous_move)
        previous_move = moved
        current = new
        if bad_lin or bad_nn:
            act_lin.update(bad_lin)
            act_nn.update(bad_nn)
            continue
        if bad_cone:
            if any(k in boundary for _, k in bad_cone) and not settled:
                continue  # re-linearize the active cones
            boundary.add(min(bad_cone)[1])
            continue
        if boundary and not settled:
            continue
        return current
    return None


def _solve(prob: ConvexProblem, x0: Optional[np.ndarray], opts: SolverOptions) -> SolveReport:
    reduced, keep = _split_degenerate(prob)
    if x0 is None:
        start = initial_feasible_point(reduced)
    else:
        start = np.asarray(x0, dtype=float).reshape(-1)
        if keep is not None:
            start = start[keep]
    d = _jacobi_scaling(reduced)
    scaled, sigma = _scaled(reduced, d, start / d)
    def expand(yv: np.ndarray) -> np.ndarray:
        xv = yv * d
        if keep is None:
            return xv
        full = np.zeros(prob.size)
        full[keep] = xv
        return full

    def finisher(yv: np.ndarray, weight: float) -> Optional[np.ndarray]:
        polished = _polish(scaled, yv, weight)
        if polished is None:
            return None
        return polished if check_kkt(prob, expand(polished), opts.kkt_tol).residual <= opts.kkt_tol else None

    y, status, iters, outers, history, message = _barrier_minimize(scaled, start / d, opts, finisher)
    history = [sigma * value for value in history]
    x = expand(y)
    kkt = check_kkt(prob, x, opts.kkt_tol)
    if status is not SolveStatus.NUMERICAL_FAILURE and kkt.residual > 0.0:
        polished = _polish(scaled, y, opts.barrier_min)
        if polished is not None:
            xp = expand(polished)
            kp = check_kkt(prob, xp, opts.kkt_tol)
            if kp.residual < kkt.residual:
                x, kkt = xp, kp
    if status is SolveStatus.OPTIMAL and not kkt.residual <= opts.kkt_tol:
        status = SolveStatus.NUMERICAL_FAILURE
        message = f"KKT residual {kkt.residual:.3e} above tolerance {opts.kkt_tol:.1e}"
    return SolveReport(x, kkt.residual, iters, status, outers, history, kkt, message)


def solve_qp(prob: ConvexProblem, x0: Optional[np.ndarray] = None, options: Optional[SolverOptions] = None) -> SolveReport:
    """Solve a problem with linear and nonnegativity constraints only."""
    if prob.cones:
        raise ValueError("solve_qp received cone constraints; use solve_qcqp")
    return _solve(prob, x0, options or SolverOptions())


def solve_qcqp(prob: ConvexProblem, x0: Optional[np.ndarray] = None, options: Optional[SolverOptions] = None) -> SolveReport:
    """Solve a problem that may include friction cones."""
    return _solve(prob, x0, options or SolverOptions())


# ---------------------------------------------------------------------------
# KKT verification


def _project_dual_cone(a: float, b: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    """Euclidean projection of (a, b) onto {(a, b): a >= mu ||b||}."""
    if mu == 0.0:
        return max(a, 0.0), b.copy()
    kappa = 1.0 / mu
    rho = float(np.linalg.norm(b))
    if rho <= kappa * a:
        return a, b.copy()
    if kappa * rho <= -a:
        return 0.0, np.zeros_like(b)
    scale = (a + kappa * rho) / (1.0 + kappa * kappa)
    direction = b / rho if rho > 0 else np.zeros_like(b)
    return scale, scale * kappa * direction


def check_kkt(prob: ConvexProblem, x: np.ndarray, tol: float = 1e-8, active_tol: Optional[float] = None) -> KktReport:
    """KKT residuals of x with multipliers recovered on the active constraints.

    Active linear rows, bounds and smooth cone boundaries contribute gradient
    columns with nonnegative multipliers found by nonnegative least squares.
    A cone at its apex contributes a multiplier restricted to the dual cone,
    found by alternating the least-squares fit with exact dual-cone
    projection.  Linear rows are measured after scaling each to unit largest
    coefficient, and the multipliers refer to those scaled rows.
    ``KktReport.residual`` divides the largest residual by
    1 + max(||g||_inf, || |H| |x| ||_inf).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    n = prob.size
    # |H||x| bounds the round-off in H x, so stationarity below eps times it is unobservable
    scale = 1.0 + (max(float(np.max(np.abs(prob.g))), float(np.max(np.abs(prob.H) @ np.abs(x)))) if n else 0.0)
    if n == 0:
        return KktReport(0.0, 0.0, 0.0, scale)
    grad = prob.H @ x + prob.g
    # rows scaled to unit max coefficient; A x carries round-off eps |A_i| |x| otherwise
    row_norm = np.max(np.abs(prob.A), axis=1) if prob.A.size else np.ones(prob.q.size)
    row_norm = np.where(row_norm > 0.0, row_norm, 1.0)
    A_rows = prob.A / row_norm[:, None]
    lin = A_rows @ x - prob.q / row_norm
    xmag = 1.0 + float(np.max(np.abs(x)))
    if active_tol is None:
        active_tol = 1e-7
    primal = 0.0
    columns: list[np.ndarray] = []
    slacks: list[float] = []

    if lin.size:
        primal = max(primal, float(np.max(-lin)))
        row_scale = 1.0 + np.abs(prob.q / row_norm) + np.abs(A_rows) @ np.abs(x)
        for i in np.nonzero(lin <= active_tol * row_scale)[0]:
            columns.append(A_rows[i].copy())
            slacks.append(max(lin[i], 0.0))
    apex: list[Cone] = []
    free_tangent: set[int] = set()
    cone_normals_at_apex: set[int] = set()
    for c in prob.cones:
        t = np.array([x[c.r]] + ([] if c.s is None else [x[c.s]]))
        tn = float(np.linalg.norm(t))
        gap = c.mu * x[c.n] - tn
        primal = max(primal, -gap, -x[c.n])
        if c.mu == 0.0:
            free_tangent.update(c.indices()[1:])
            continue
        if tn + abs(x[c.n]) <= active_tol * xmag:
            apex.append(c)
            cone_normals_at_apex.add(c.n)
        elif gap <= active_tol * xmag:
            col = np.zeros(n)
            col[c.n] = c.mu
            col[c.r] = -x[c.r] / tn
            if c.s is not None:
                col[c.s] = -x[c.s] / tn
            columns.append(col)
            slacks.append(max(gap, 0.0))
    for i in prob.nonneg:
        primal = max(primal, -x[i])
        if x[i] <= active_tol * xmag:
            col = np.zeros(n)
            col[i] = 1.0
            columns.append(col)
            slacks.append(max(x[i], 0.0))
    for c in prob.cones:
        if c.mu == 0.0 and x[c.n] <= active_tol * xmag:
            col = np.zeros(n)
            col[c.n] = 1.0
            columns.append(col)
            slacks.append(max(x[c.n], 0.0))
    primal = max(primal, 0.0)

    mask = np.ones(n, dtype=bool)
    mask[list(free_tangent)] = False
    target = grad.copy()
    Cmat = np.array(columns).T if columns else np.zeros((n, 0))
    apex_part = np.zeros(n)
    nu = np.zeros(Cmat.shape[1])
    for _ in range(200 if apex else 1):
        rhs = (target - apex_part)[mask]
        if Cmat.shape[1]:
            nu, _ = nnls(Cmat[mask], rhs, maxiter=50 * max(1, Cmat.shape[1]))
        resid = target - apex_part - Cmat @ nu
        if not apex:
            break
        change = 0.0
        for c in apex:
            idx = c.indices()
            cur = apex_part[idx]
            want = resid[idx] + cur
            a, b = _project_dual_cone(want[0], want[1:], c.mu)
            new = np.concatenate([[a], b])
            change = max(change, float(np.max(np.abs(new - cur))))
            apex_part[idx] = new
        if change <= 1e-15 * scale:
            break
    resid = target - apex_part - Cmat @ nu
    resid[~mask] = 0.0
    stationarity = float(np.max(np.abs(resid)))
    comp = float(np.max(np.abs(nu * np.array(slacks)))) if slacks else 0.0
    for c in apex:
        idx = c.indices()
        comp = max(comp, abs(float(apex_part[idx] @ x[idx])))
    return KktReport(stationarity, primal, comp, scale, nu)


# ---------------------------------------------------------------------------
# plain-text dump format


def dump_problem(prob: ConvexProblem, stream: Optional[TextIO] = None) -> str:
    """Write the problem as labelled blocks of whitespace-separated numbers.

    Layout: ``H rows cols`` followed by the rows, then ``g n``, ``A rows cols``,
    ``q m``, ``nonneg k`` with the indices, ``cones k`` with one
    ``n r s mu`` line per cone (s = -1 when absent) and ``tangential k``.
    """
    out = io.StringIO()
    n, m = prob.size, prob.q.size
    out.write("% convex problem dump\n")
    out.write(f"H {n} {n}\n")
    for row in prob.H:
        out.write(" ".join(repr(float(v)) for v in row) + "\n")
    out.write(f"g {n}\n")
    out.write(" ".join(repr(float(v)) for v in prob.g) + "\n")
    out.write(f"A {m} {n}\n")
    for row in prob.A:
        out.write(" ".join(repr(float(v)) for v in row) + "\n")
    out.write(f"q {m}\n")
    out.write(" ".join(repr(float(v)) for v in prob.q) + "\n")
    out.write(f"nonneg {len(prob.nonneg)}\n")
    out.write(" ".join(str(i) for i in prob.nonneg) + "\n")
    out.write(f"cones {len(prob.cones)}\n")
    for c in prob.cones:
        out.write(f"{c.n} {c.r} {-1 if c.s is None else c.s} {c.mu!r}\n")
    out.write(f"tangential {len(prob.tangential)}\n")
    out.write(" ".join(str(i) for i in prob.tangential) + "\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def load_problem(text: str) -> ConvexProblem:
    """Inverse of ``dump_problem``."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("%")]
    pos = 0

    def header(tag: str) -> list[int]:
        nonlocal pos
        parts = lines[pos].split()
        if parts[0] != tag:
            raise ValueError(f"expected block {tag!r}, found {parts[0]!r}")
        pos += 1
        return [int(p) for p in parts[1:]]

    def numbers(count_rows: int) -> list[list[float]]:
        nonlocal pos
        rows = []
        for _ in range(count_rows):
            rows.append([float(v) for v in lines[pos].split()])
            pos += 1
        return rows

    def vector(length: int) -> np.ndarray:
        nonlocal pos
        if length == 0:
            # an empty vector is written as an empty line, which was filtered out
            return np.zeros(0)
        vals = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        return vals

    r, c = header("H")
    H = np.array(numbers(r)).reshape(r, c)
    (n,) = header("g")
    g = vector(n)
    r, c = header("A")
    A = np.array(numbers(r)).reshape(r, c)
    (m,) = header("q")
    q = vector(m)
    (k,) = header("nonneg")
    nonneg = tuple(int(v) for v in vector(k)) if k else ()
    (k,) = header("cones")
    cones = []
    for row in numbers(k):
        cones.append(Cone(int(row[0]), int(row[1]), None if int(row[2]) < 0 else int(row[2]), float(row[3])))
    tangential: tuple[int, ...] = ()
    if pos < len(lines):
        (k,) = header("tangential")
        tangential = tuple(int(v) for v in vector(k)) if k else ()
    return ConvexProblem(H, g, A, q, nonneg, tuple(cones), tangential)


def stack_problems(problems: Sequence[ConvexProblem]) -> ConvexProblem:
    """Block-diagonal combination of independent problems (used by tests)."""
    sizes = [p.size for p in problems]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    H = sla.block_diag(*[p.H for p in problems]) if problems else np.zeros((0, 0))
    g = np.concatenate([p.g for p in problems]) if problems else np.zeros(0)
    A = sla.block_diag(*[p.A for p in problems]) if problems else np.zeros((0, 0))
    q = np.concatenate([p.q for p in problems]) if problems else np.zeros(0)
    nonneg = tuple(int(o + i) for p, o in zip(problems, offsets) for i in p.nonneg)
    cones = tuple(
        Cone(int(o + c.n), int(o + c.r), None if c.s is None else int(o + c.s), c.mu)
        for p, o in zip(problems, offsets)
        for c in p.cones
    )
    tangential = tuple(int(o + i) for p, o in zip(problems, offsets) for i in p.tangential)
    return ConvexProblem(H, g, A.reshape(q.size, g.size), q, nonneg, cones, tangential)
