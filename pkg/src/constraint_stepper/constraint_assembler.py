"""Reduced convex program for one step over every constraint family.

The step is posed over all constraint forces, next-step constraint values and
rates, and friction slack forces.  Eliminating everything except the vector
lam* = (lambda_n, lambda_r, lambda_s, lambda_u) leaves

    minimize 1/2 lam*^T H lam* + g^T lam*
    subject to A lam* >= q, lambda_u >= 0, lambda_n >= 0, friction cones,

after which the bilateral forces, slack forces and next-step constraint state
are recovered in closed form.  Every right-hand side uses the acceleration
offset a0 = M^-1 (G_b^T C^-1 c + f) so that the reduction is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .bilateral_solver import BilateralSolution, solve_bilateral
from .convex_solver import (
    Cone,
    ConvexProblem,
    SolverOptions,
    SolveReport,
    SolveStatus,
    dump_problem,
    solve_qcqp,
    solve_qp,
)
from .dynamics_core import (
    ConstraintBlock,
    ContactSet,
    Family,
    GeneralizedState,
    StepContext,
    SystemModel,
    delassus_from_factor,
    mhat_apply,
    semi_explicit_update,
)

log = logging.getLogger(__name__)

CONTACT_FAMILIES = (Family.NORMAL, Family.TANGENT_R, Family.TANGENT_S)
ALL_FAMILIES = (Family.NORMAL, Family.TANGENT_R, Family.TANGENT_S, Family.UNILATERAL, Family.BILATERAL)


class StepFailure(RuntimeError):
    """A step could not be completed; carries the solver report when there is one."""

    def __init__(self, message: str, report: Optional[SolveReport] = None, problem: Optional[ConvexProblem] = None):
        super().__init__(message)
        self.report = report
        self.problem = problem


@dataclass
class StepConfig:
    h: float
    # normal and unilateral force weight; None means 1/h
    zeta: Optional[float] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    # allowed negative excursion of lambda_n, lambda_u and cone residuals, relative to 1 + max|lambda|
    sign_tol: float = 1e-8
    # verbosity >= 2 with dump_path set appends each assembled problem and its solution
    verbosity: int = 0
    dump_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not (self.h > 0.0 and np.isfinite(self.h)):
            raise ValueError(f"timestep must be positive and finite, got {self.h}")
        if self.zeta is None:
            self.zeta = 1.0 / self.h
        if not (self.zeta > 0.0 and np.isfinite(self.zeta)):
            raise ValueError(f"zeta must be positive and finite, got {self.zeta}")


@dataclass
class ReducedProblem:
    problem: ConvexProblem
    h: float
    # index layout of lam* = (n, r, s, u)
    slices: dict
    planar: bool
    # entries of lam* held at zero and removed from ``problem`` (planar contacts with mu = 0)
    pinned: np.ndarray
    free: np.ndarray
    c: np.ndarray
    D: np.ndarray
    C: np.ndarray
    Lam: np.ndarray
    E: np.ndarray
    F: np.ndarray
    d: np.ndarray
    e: np.ndarray
    eta: np.ndarray
    chi: np.ndarray
    G_star: np.ndarray
    # M^-1 (G_b^T C^-1 c + f)
    accel_offset: np.ndarray
    q_u: np.ndarray
    q_n: np.ndarray
    H_full: np.ndarray
    g_full: np.ndarray
    A_full: np.ndarray
    blocks: dict

    @property
    def size(self) -> int:
        return self.G_star.shape[0]

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Map a solution of ``problem`` back to the full lam* vector."""
        full = np.zeros(self.size)
        full[self.free] = x
        return full

    def split(self, lam_star: np.ndarray) -> dict:
        return {fam: lam_star[sl] for fam, sl in self.slices.items()}


@dataclass
class StepResult:
    state: GeneralizedState
    # per-family forces over every input row (zero for inactive rows)
    lam: dict
    beta_r: np.ndarray
    beta_s: np.ndarray
    phi1: dict
    dphi1: dict
    # active row indices per family
    active: dict
    path: str
    solver_report: Optional[SolveReport] = None
    bilateral: Optional[BilateralSolution] = None
    reduced: Optional[ReducedProblem] = None

    @property
    def q1(self) -> np.ndarray:
        return self.state.q

    @property
    def v1(self) -> np.ndarray:
        return self.state.v


def _as_block(block: Optional[ConstraintBlock], family: Family, m_v: int) -> ConstraintBlock:
    if block is None:
        return ConstraintBlock.empty(family, m_v)
    if block.family is not family:
        raise ValueError(f"expected a {family.name} block, got {block.family.name}")
    if block.size and block.dofs != m_v:
        raise ValueError(f"{family.name} Jacobian has {block.dofs} columns, expected {m_v}")
    return block


def gather_blocks(blocks: Sequence[ConstraintBlock], m_v: int) -> tuple[ConstraintBlock, ConstraintBlock]:
    """Stack the bilateral and unilateral blocks of a mixed list."""
    bil, uni = [], []
    for b in blocks:
        if b.size and b.dofs != m_v:
            raise ValueError(f"{b.family.name} Jacobian has {b.dofs} columns, expected {m_v}")
        if b.family is Family.BILATERAL:
            bil.append(b)
        elif b.family is Family.UNILATERAL:
            uni.append(b)
        else:
            raise ValueError(f"contact rows belong in a ContactSet, got a {b.family.name} block")
    return ConstraintBlock.stack(Family.BILATERAL, bil, m_v), ConstraintBlock.stack(Family.UNILATERAL, uni, m_v)


def _rhs_piece(block: ConstraintBlock, W: np.ndarray, accel: np.ndarray, h: float) -> np.ndarray:
    """Mhat Gdot v + K phi0 + (hK + B)(phi0' + h (G accel + Gdot v))."""
    if block.size == 0:
        return np.zeros(0)
    rate = block.dphi0 + h * (block.G @ accel + block.gdot_v)
    return mhat_apply(W, block.gdot_v) + block.K * block.phi0 + (h * block.K + block.B) * rate


def assemble_reduced(
    blocks: Sequence[ConstraintBlock],
    contacts: Optional[ContactSet],
    model: SystemModel,
    state0: GeneralizedState,
    t0: float,
    cfg: StepConfig,
    unilateral_weight: Optional[float] = None,
) -> ReducedProblem:
    """Build the reduced program from every given row (no activity filtering)."""
    ctx = StepContext.evaluate(model, state0, t0)
    bil, uni = gather_blocks(blocks, ctx.mass.size)
    return assemble_from_context(bil, uni, contacts, ctx, cfg, unilateral_weight)


def assemble_from_context(
    bilateral: Optional[ConstraintBlock],
    unilateral: Optional[ConstraintBlock],
    contacts: Optional[ContactSet],
    context: StepContext,
    cfg: StepConfig,
    unilateral_weight: Optional[float] = None,
) -> ReducedProblem:
    """Build H, g, A, q and the elimination intermediates for the given rows.

    ``unilateral_weight`` overrides the objective weight of lambda_u (zeta by
    default).
    """
    h = cfg.h
    mass = context.mass
    m_v = mass.size
    bil = _as_block(bilateral, Family.BILATERAL, m_v)
    uni = _as_block(unilateral, Family.UNILATERAL, m_v)
    if contacts is None:
        contacts = ContactSet.empty(m_v)
    normal = _as_block(contacts.normal, Family.NORMAL, m_v)
    tan_r = _as_block(contacts.tangent_r, Family.TANGENT_R, m_v)
    planar = contacts.planar
    tan_s = ConstraintBlock.empty(Family.TANGENT_S, m_v) if planar else _as_block(contacts.tangent_s, Family.TANGENT_S, m_v)
    f = context.f
    v0 = context.state.v

    # bilateral elimination
    n_b = bil.size
    Minv_Gbt = mass.solve(bil.G.T) if n_b else np.zeros((m_v, 0))
    W_b = delassus_from_factor(bil.G, mass)
    P_b = h * h * bil.K + h * bil.B
    a_f = mass.solve(f)
    if n_b:
        c = -mhat_apply(W_b, bil.gdot_v) - bil.K * bil.phi0 - (h * bil.K + bil.B) * (
            bil.dphi0 + h * (bil.G @ a_f + bil.gdot_v)
        )
        D = -P_b[:, None] * Minv_Gbt.T
        C = np.eye(n_b) - D @ bil.G.T
        C_lu = sla.lu_factor(C)
        Cinv_c = sla.lu_solve(C_lu, c)
        Cinv_D = sla.lu_solve(C_lu, D)
        Lam = mass.solve(bil.G.T @ Cinv_D + np.eye(m_v))
        accel = mass.solve(bil.G.T @ Cinv_c + f)
    else:
        c = np.zeros(0)
        D = np.zeros((0, m_v))
        C = np.zeros((0, 0))
        Lam = mass.solve(np.eye(m_v))
        accel = a_f
    Lam = 0.5 * (Lam + Lam.T)

    sizes = [normal.size, tan_r.size, tan_s.size, uni.size]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    slices = {
        Family.NORMAL: slice(offsets[0], offsets[1]),
        Family.TANGENT_R: slice(offsets[1], offsets[2]),
        Family.TANGENT_S: slice(offsets[2], offsets[3]),
        Family.UNILATERAL: slice(offsets[3], offsets[4]),
    }
    N = int(offsets[-1])
    G_star = np.vstack([normal.G, tan_r.G, tan_s.G, uni.G]).reshape(N, m_v)
    Lam_Gst = Lam @ G_star.T

    def selector(sl: slice) -> np.ndarray:
        S = np.zeros((sl.stop - sl.start, N))
        S[np.arange(sl.stop - sl.start), np.arange(sl.start, sl.stop)] = 1.0
        return S

    S_r, S_s = selector(slices[Family.TANGENT_R]), selector(slices[Family.TANGENT_S])
    S_n, S_u = selector(slices[Family.NORMAL]), selector(slices[Family.UNILATERAL])

    E = (h * h * tan_r.K + h * tan_r.B)[:, None] * (tan_r.G @ Lam_Gst) if tan_r.size else np.zeros((0, N))
    F = (h * h * tan_s.K + h * tan_s.B)[:, None] * (tan_s.G @ Lam_Gst) if tan_s.size else np.zeros((0, N))
    d = _rhs_piece(tan_r, delassus_from_factor(tan_r.G, mass), accel, h)
    e = _rhs_piece(tan_s, delassus_from_factor(tan_s.G, mass), accel, h)
    eta = h * h * uni.K + h * uni.B
    chi = h * h * normal.K + h * normal.B

    weight_u = cfg.zeta if unilateral_weight is None else unilateral_weight
    diag = np.concatenate([np.full(normal.size, cfg.zeta), np.ones(tan_r.size + tan_s.size), np.full(uni.size, weight_u)])
    Xr = S_r + E
    Xs = S_s + F
    H = np.diag(diag) + Xr.T @ Xr + Xs.T @ Xs
    H = 0.5 * (H + H.T)
    g = Xr.T @ d + Xs.T @ e

    A_u = eta[:, None] * (uni.G @ Lam_Gst) + S_u if uni.size else np.zeros((0, N))
    A_n = S_n + chi[:, None] * (normal.G @ Lam_Gst) if normal.size else np.zeros((0, N))
    q_u = -_rhs_piece(uni, delassus_from_factor(uni.G, mass), accel, h)
    q_n = -_rhs_piece(normal, delassus_from_factor(normal.G, mass), accel, h)
    A_full = np.vstack([A_u, A_n]).reshape(uni.size + normal.size, N)
    q_full = np.concatenate([q_u, q_n])

    n_idx = np.arange(slices[Family.NORMAL].start, slices[Family.NORMAL].stop)
    r_idx = np.arange(slices[Family.TANGENT_R].start, slices[Family.TANGENT_R].stop)
    s_idx = np.arange(slices[Family.TANGENT_S].start, slices[Family.TANGENT_S].stop)
    u_idx = np.arange(slices[Family.UNILATERAL].start, slices[Family.UNILATERAL].stop)
    mu = contacts.mu
    pinned = r_idx[mu == 0.0] if planar else np.zeros(0, dtype=int)
    free = np.setdiff1d(np.arange(N), pinned)
    remap = -np.ones(N, dtype=int)
    remap[free] = np.arange(free.size)

    rows = [A_full[:, free]]
    rhs = [q_full]
    n_rows = A_full.shape[0]
    cones: list[Cone] = []
    tangential: list[int] = []
    if planar:
        # two friction faces per planar contact: mu lambda_n -+ lambda_r >= 0
        for i in range(normal.size):
            if mu[i] == 0.0:
                continue
            for sign in (-1.0, 1.0):
                row = np.zeros(N)
                row[n_idx[i]] = mu[i]
                row[r_idx[i]] = sign
                rows.append(row[free][None, :])
                rhs.append(np.zeros(1))
                n_rows += 1
            tangential.append(int(remap[r_idx[i]]))
    else:
        for i in range(normal.size):
            cones.append(Cone(int(remap[n_idx[i]]), int(remap[r_idx[i]]), int(remap[s_idx[i]]), float(mu[i])))
    nonneg = sorted(int(remap[i]) for i in np.concatenate([n_idx, u_idx]))
    problem = ConvexProblem(
        H[np.ix_(free, free)],
        g[free],
        np.vstack(rows).reshape(n_rows, free.size),
        np.concatenate(rhs),
        tuple(nonneg),
        tuple(cones),
        tuple(tangential),
    )
    return ReducedProblem(
        problem=problem,
        h=h,
        slices=slices,
        planar=planar,
        pinned=pinned,
        free=free,
        c=c,
        D=D,
        C=C,
        Lam=Lam,
        E=E,
        F=F,
        d=d,
        e=e,
        eta=eta,
        chi=chi,
        G_star=G_star,
        accel_offset=accel,
        q_u=q_u,
        q_n=q_n,
        H_full=H,
        g_full=g,
        A_full=A_full,
        blocks={
            Family.BILATERAL: bil,
            Family.UNILATERAL: uni,
            Family.NORMAL: normal,
            Family.TANGENT_R: tan_r,
            Family.TANGENT_S: tan_s,
        },
    )


def recover_bilateral_forces(rp: ReducedProblem, lam_star: np.ndarray) -> np.ndarray:
    """lambda_b solving C lambda_b = c + D G*^T lam*."""
    if rp.c.size == 0:
        return np.zeros(0)
    rhs = rp.c + rp.D @ (rp.G_star.T @ np.asarray(lam_star, dtype=float))
    return sla.lu_solve(sla.lu_factor(rp.C), rhs)


def recover_slack_forces(rp: ReducedProblem, lam_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """beta_r = lambda_r + E lam* + d and beta_s = lambda_s + F lam* + e."""
    parts = rp.split(lam_star)
    beta_r = parts[Family.TANGENT_R] + rp.E @ lam_star + rp.d
    beta_s = parts[Family.TANGENT_S] + rp.F @ lam_star + rp.e
    return beta_r, beta_s


def recover_constraint_state(
    blocks: dict, lam: dict, context: StepContext, h: float
) -> tuple[dict, dict]:
    """phi1 and phi1' per family from the forces of every family.

    v0' = M^-1 (sum G^T lambda + f), phi0'' = G v0' + Gdot v0,
    phi1' = phi0' + h phi0'' and phi1 = phi0 + h phi1'.
    """
    total = context.f.copy()
    for fam, block in blocks.items():
        if block.size:
            total += block.G.T @ lam[fam]
    vdot = context.mass.solve(total)
    phi1, dphi1 = {}, {}
    for fam, block in blocks.items():
        rate = block.dphi0 + h * (block.G @ vdot + block.gdot_v) if block.size else np.zeros(0)
        dphi1[fam] = rate
        phi1[fam] = block.phi0 + h * rate if block.size else np.zeros(0)
    return phi1, dphi1


def _active_rows(block: ConstraintBlock) -> np.ndarray:
    return np.nonzero(block.phi0 <= 0.0)[0]


def _dump(cfg: StepConfig, t0: float, rp: ReducedProblem, report: Optional[SolveReport]) -> None:
    if cfg.verbosity < 2 or not cfg.dump_path:
        return
    with open(cfg.dump_path, "a", encoding="utf-8") as stream:
        stream.write(f"% step t0={t0!r}\n")
        dump_problem(rp.problem, stream)
        if report is not None:
            stream.write(f"solution {report.x.size}\n")
            stream.write(" ".join(repr(float(v)) for v in report.x) + "\n")
            stream.write(f"% status={report.status.value} kkt={report.kkt_residual!r} iterations={report.iterations}\n")


def _check_signs(lam: dict, contacts: ContactSet, active_contacts: np.ndarray, tol: float) -> Optional[str]:
    scale = 1.0 + max((float(np.max(np.abs(v))) for v in lam.values() if v.size), default=0.0)
    bound = -tol * scale
    for fam in (Family.UNILATERAL, Family.NORMAL):
        if lam[fam].size and float(np.min(lam[fam])) < bound:
            return f"{fam.name} force {float(np.min(lam[fam])):.3e} below {bound:.1e}"
    for i in active_contacts:
        tang = lam[Family.TANGENT_R][i] ** 2 + (lam[Family.TANGENT_S][i] ** 2 if not contacts.planar else 0.0)
        gap = contacts.mu[i] * lam[Family.NORMAL][i] - np.sqrt(tang)
        if gap < bound:
            return f"friction cone residual {gap:.3e} below {bound:.1e} at contact {i}"
    return None


def solve_step(
    model: SystemModel,
    state0: GeneralizedState,
    t0: float,
    blocks: Sequence[ConstraintBlock],
    contacts: Optional[ContactSet],
    cfg: StepConfig,
    context: Optional[StepContext] = None,
) -> StepResult:
    """Advance one step: pick the linear, QP or cone path, recover forces, update the state.

    Unilateral and contact rows take part only when phi0 <= 0.  Raises
    StepFailure when the convex solver does not reach an optimal point.
    """
    ctx = context if context is not None else StepContext.evaluate(model, state0, t0)
    m_v = ctx.mass.size
    h = cfg.h
    bil, uni = gather_blocks(blocks, m_v)
    if contacts is None:
        contacts = ContactSet.empty(m_v)
    planar = contacts.planar
    all_blocks = {
        Family.BILATERAL: bil,
        Family.UNILATERAL: uni,
        Family.NORMAL: contacts.normal,
        Family.TANGENT_R: contacts.tangent_r,
        Family.TANGENT_S: ConstraintBlock.empty(Family.TANGENT_S, m_v) if planar else contacts.tangent_s,
    }
    for fam, block in all_blocks.items():
        if block.size and block.dofs != m_v:
            raise ValueError(f"{fam.name} Jacobian has {block.dofs} columns, expected {m_v}")
    lam = {fam: np.zeros(block.size) for fam, block in all_blocks.items()}
    active_u = _active_rows(uni)
    active_c = _active_rows(contacts.normal)
    active = {
        Family.BILATERAL: np.arange(bil.size),
        Family.UNILATERAL: active_u,
        Family.NORMAL: active_c,
        Family.TANGENT_R: active_c,
        Family.TANGENT_S: active_c if not planar else np.zeros(0, dtype=int),
    }
    beta_r = np.zeros(contacts.size)
    beta_s = np.zeros(0 if planar else contacts.size)
    report = None
    bilateral_solution = None
    rp = None

    if active_u.size == 0 and active_c.size == 0:
        if bil.size == 0:
            path = "free"
        else:
            path = "linear"
            bilateral_solution = solve_bilateral(
                bil, delassus_from_factor(bil.G, ctx.mass), bil.G @ ctx.mass.solve(ctx.f), h
            )
            lam[Family.BILATERAL] = bilateral_solution.lambda1
    else:
        sub_contacts = contacts.rows(active_c)
        # without contacts the objective is a scaled identity and weight 1 gives the same minimizer
        weight_u = 1.0 if active_c.size == 0 else None
        rp = assemble_from_context(bil, uni.rows(active_u), sub_contacts, ctx, cfg, unilateral_weight=weight_u)
        prob = rp.problem
        if prob.cones:
            path = "qcqp"
            report = solve_qcqp(prob, options=cfg.solver)
        else:
            path = "qp"
            report = solve_qp(prob, options=cfg.solver)
        _dump(cfg, t0, rp, report)
        if report.status is not SolveStatus.OPTIMAL:
            raise StepFailure(
                f"{path} solve failed at t={t0:.9g}: {report.status.value} ({report.message})", report, prob
            )
        lam_star = rp.expand(report.x)
        parts = rp.split(lam_star)
        lam[Family.UNILATERAL][active_u] = parts[Family.UNILATERAL]
        lam[Family.NORMAL][active_c] = parts[Family.NORMAL]
        lam[Family.TANGENT_R][active_c] = parts[Family.TANGENT_R]
        if not planar:
            lam[Family.TANGENT_S][active_c] = parts[Family.TANGENT_S]
        lam[Family.BILATERAL] = recover_bilateral_forces(rp, lam_star)
        b_r, b_s = recover_slack_forces(rp, lam_star)
        beta_r[active_c] = b_r
        if not planar:
            beta_s[active_c] = b_s
        problem_msg = _check_signs(lam, contacts, active_c, cfg.sign_tol)
        if problem_msg is not None:
            raise StepFailure(f"sign invariant violated at t={t0:.9g}: {problem_msg}", report, prob)

    if any(not np.all(np.isfinite(v)) for v in lam.values()):
        raise StepFailure(f"non-finite constraint forces at t={t0:.9g}", report)
    phi1, dphi1 = recover_constraint_state(all_blocks, lam, ctx, h)
    pairs = [(all_blocks[fam].G, lam[fam]) for fam in ALL_FAMILIES if all_blocks[fam].size]
    state1 = semi_explicit_update(state0, model, t0, pairs, h, context=ctx)
    if cfg.verbosity >= 1 and report is not None:
        log.info("t=%.9g path=%s iterations=%d kkt=%.3e", t0, path, report.iterations, report.kkt_residual)
    return StepResult(
        state=state1,
        lam=lam,
        beta_r=beta_r,
        beta_s=beta_s,
        phi1=phi1,
        dphi1=dphi1,
        active=active,
        path=path,
        solver_report=report,
        bilateral=bilateral_solution,
        reduced=rp,
    )
