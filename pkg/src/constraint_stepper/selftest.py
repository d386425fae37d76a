"""Fixed-seed equivalence checks runnable without the test dependencies."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bilateral_solver import solve_bilateral
from .constraint_assembler import StepConfig, assemble_from_context, recover_bilateral_forces
from .convex_solver import Cone, ConvexProblem, SolveStatus, check_kkt, solve_qcqp, solve_qp
from .dynamics_core import ConstraintBlock, Family, GeneralizedState, StepContext, SystemModel, delassus_from_factor

SEED = 20241019


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.cases} cases, worst {self.worst:.3e} (tolerance {self.tolerance:.0e})"


def _random_pd(rng: np.random.Generator, n: int, spread: float) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.normal(size=(n, n)))
    H = basis @ np.diag(10.0 ** rng.uniform(-spread / 2, spread / 2, size=n)) @ basis.T
    return 0.5 * (H + H.T)


def enumerate_qp(H: np.ndarray, g: np.ndarray, A: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Minimizer of 1/2 x'Hx + g'x subject to A x >= q by trying every active set."""
    rows, n = A.shape
    best, best_value = None, np.inf
    for count in range(rows + 1):
        for active in itertools.combinations(range(rows), count):
            idx = list(active)
            kkt = np.block([[H, -A[idx].T], [A[idx], np.zeros((count, count))]])
            try:
                sol = np.linalg.solve(kkt, np.concatenate([-g, q[idx]]))
            except np.linalg.LinAlgError:
                continue
            x, multipliers = sol[:n], sol[n:]
            if np.any(multipliers < -1e-9) or np.any(A @ x - q < -1e-9):
                continue
            value = 0.5 * x @ H @ x + g @ x
            if value < best_value:
                best, best_value = x, value
    if best is None:
        raise RuntimeError("no feasible active set")
    return best


def bilateral_paths(cases: int = 100, tol: float = 1e-10) -> SuiteResult:
    """Closed-form joint forces against the forces recovered from the reduced program (no velocity-product term)."""
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(cases):
        m_v = int(rng.integers(2, 6))
        n_b = int(rng.integers(1, m_v))
        h = float(10.0 ** rng.uniform(-4, -1))
        root = rng.normal(size=(m_v, m_v))
        M = root @ root.T + np.eye(m_v)
        f = rng.normal(size=m_v)
        model = SystemModel(lambda q, M=M: M, lambda q, n=m_v: np.eye(n), lambda t, q, v, f=f: f)
        state = GeneralizedState(np.zeros(m_v), rng.normal(size=m_v))
        block = ConstraintBlock(
            Family.BILATERAL,
            -np.abs(rng.normal(size=n_b)) * 0.01,
            rng.normal(size=n_b),
            rng.normal(size=(n_b, m_v)),
            np.zeros(n_b),
            np.abs(rng.normal(size=n_b)) * 100.0,
            np.abs(rng.normal(size=n_b)) * 10.0,
        )
        ctx = StepContext.evaluate(model, state, 0.0)
        reduced = assemble_from_context(block, None, None, ctx, StepConfig(h))
        recovered = recover_bilateral_forces(reduced, np.zeros(0))
        closed = solve_bilateral(block, delassus_from_factor(block.G, ctx.mass), block.G @ ctx.mass.solve(f), h).lambda1
        worst = max(worst, float(np.max(np.abs(recovered - closed)) / max(1.0, float(np.max(np.abs(closed))))))
    return SuiteResult("bilateral closed form vs reduced recovery", worst <= tol, cases, worst, tol)


def qp_enumeration(cases: int = 100, tol: float = 1e-6) -> SuiteResult:
    """Barrier QP solutions against active-set enumeration, plus the KKT residual of each."""
    rng = np.random.default_rng(SEED + 1)
    worst = 0.0
    passed = True
    for _ in range(cases):
        n, rows = 6, 4
        H = _random_pd(rng, n, 2.0)
        A = rng.normal(size=(rows, n))
        A[np.sum(A, axis=1) <= 0.1] *= -1.0
        A[np.sum(A, axis=1) <= 0.1] += 1.0
        prob = ConvexProblem(H, rng.normal(size=n) * 3.0, A, rng.normal(size=rows))
        report = solve_qp(prob)
        if report.status is not SolveStatus.OPTIMAL or report.kkt_residual > 1e-8:
            passed = False
        reference = enumerate_qp(prob.H, prob.g, prob.A, prob.q)
        worst = max(worst, float(np.max(np.abs(report.x - reference)) / (1.0 + np.max(np.abs(reference)))))
    return SuiteResult("QP barrier vs active-set enumeration", passed and worst <= tol, cases, worst, tol)


def qcqp_kkt(cases: int = 100, tol: float = 1e-8) -> SuiteResult:
    """Single-cone programs: independent KKT check of every Optimal report."""
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    passed = True
    for _ in range(cases):
        H = _random_pd(rng, 3, 1.0)
        prob = ConvexProblem(
            H, rng.normal(size=3) * 2.0, np.zeros((0, 3)), np.zeros(0),
            cones=(Cone(0, 1, 2, float(rng.uniform(0.1, 1.5))),),
        )
        report = solve_qcqp(prob)
        if report.status is not SolveStatus.OPTIMAL:
            passed = False
            continue
        worst = max(worst, check_kkt(prob, report.x).residual)
    return SuiteResult("QCQP KKT residual", passed and worst <= tol, cases, worst, tol)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "bilateral": bilateral_paths,
    "qp": qp_enumeration,
    "qcqp": qcqp_kkt,
}


def run_selftest() -> list[SuiteResult]:
    return [suite() for suite in SUITES.values()]
