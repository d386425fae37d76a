import numpy as np
import pytest

from constraint_stepper.bilateral_solver import solve_bilateral
from constraint_stepper.constraint_assembler import (
    StepConfig,
    StepFailure,
    assemble_from_context,
    assemble_reduced,
    recover_bilateral_forces,
    recover_constraint_state,
    recover_slack_forces,
    solve_step,
)
from constraint_stepper.convex_solver import SolverOptions, load_problem
from constraint_stepper.dynamics_core import (
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
from instances import compare_with_dense, random_block, random_instance
from oracles import dense_step_program


def particle_model(m_v, mass=1.0, force=None):
    f = np.zeros(m_v) if force is None else np.asarray(force, dtype=float)
    return SystemModel(lambda q: mass * np.eye(m_v), lambda q: np.eye(m_v), lambda t, q, v: f)


def solve_instance(inst, **cfg):
    b = inst.blocks
    return solve_step(inst.model, inst.state, 0.0, [b[Family.BILATERAL], b[Family.UNILATERAL]], inst.contacts, StepConfig(inst.h, **cfg))


def oracle_for(inst):
    weight_u = 1.0 if inst.blocks[Family.NORMAL].size == 0 else None
    return dense_step_program(inst.family_dicts(), inst.mu, np.linalg.inv(inst.M), inst.f, inst.h, 1.0 / inst.h, weight_u)


def test_config_defaults_and_validation():
    cfg = StepConfig(0.01)
    assert cfg.zeta == pytest.approx(100.0)
    with pytest.raises(ValueError):
        StepConfig(0.0)
    with pytest.raises(ValueError):
        StepConfig(0.01, zeta=0.0)


def test_all_families_empty_is_plain_euler():
    model = particle_model(3, 2.0, [0.0, 0.0, -19.6])
    s0 = GeneralizedState([0.0, 1.0, 2.0], [0.5, 0.0, -1.0])
    res = solve_step(model, s0, 0.0, [], None, StepConfig(0.01))
    ref = semi_explicit_update(s0, model, 0.0, [], 0.01)
    assert res.path == "free"
    np.testing.assert_array_equal(res.q1, ref.q)
    np.testing.assert_array_equal(res.v1, ref.v)
    rp = assemble_reduced([], None, model, s0, 0.0, StepConfig(0.01))
    assert rp.size == 0


def test_unilateral_only_structure():
    rng = np.random.default_rng(1)
    m_v, h = 3, 0.01
    Mr = rng.normal(size=(m_v, m_v))
    M = Mr @ Mr.T + np.eye(m_v)
    f = rng.normal(size=m_v)
    model = SystemModel(lambda q: M, lambda q: np.eye(m_v), lambda t, q, v: f)
    s0 = GeneralizedState(np.zeros(m_v), rng.normal(size=m_v))
    uni = random_block(rng, Family.UNILATERAL, 2, m_v)
    rp = assemble_reduced([uni], None, model, s0, 0.0, StepConfig(h), unilateral_weight=1.0)
    W = uni.G @ np.linalg.solve(M, uni.G.T)
    P = h * h * uni.K + h * uni.B
    np.testing.assert_allclose(rp.problem.A, np.eye(2) + P[:, None] * W, rtol=1e-12, atol=1e-12)
    q = (
        -uni.K * uni.phi0
        - (h * uni.K + uni.B) * (uni.dphi0 + h * uni.G @ np.linalg.solve(M, f) + h * uni.gdot_v)
        - np.linalg.solve(W, uni.gdot_v)
    )
    np.testing.assert_allclose(rp.problem.q, q, rtol=1e-12)
    np.testing.assert_allclose(rp.problem.H, np.eye(2), atol=1e-15)
    np.testing.assert_array_equal(rp.problem.g, 0.0)
    assert rp.problem.nonneg == (0, 1)


def test_single_contact_matches_formula_transcription():
    # point mass in 3D, ground normal along z
    m, h, mu = 2.0, 0.01, 0.6
    f = np.array([1.5, -0.5, -19.6])
    v0 = np.array([0.3, -0.2, -0.1])
    model = particle_model(3, m, f)
    s0 = GeneralizedState(np.zeros(3), v0)
    Kn, Bn, Br, Bs = 1e4, 30.0, 50.0, 40.0
    normal = ConstraintBlock(Family.NORMAL, [-1e-3], [v0[2]], [[0.0, 0.0, 1.0]], [0.0], Kn, Bn)
    tan_r = ConstraintBlock(Family.TANGENT_R, [0.0], [v0[0]], [[1.0, 0.0, 0.0]], [0.0], 0.0, Br)
    tan_s = ConstraintBlock(Family.TANGENT_S, [0.0], [v0[1]], [[0.0, 1.0, 0.0]], [0.0], 0.0, Bs)
    cfg = StepConfig(h)
    rp = assemble_reduced([], ContactSet(normal, tan_r, tan_s, mu), model, s0, 0.0, cfg)

    # independent transcription: lam* = (n, r, s), Lambda = M^-1, G* = I
    zeta = 1.0 / h
    a = f / m
    E = (h * Br / m) * np.array([[0.0, 1.0, 0.0]])
    F = (h * Bs / m) * np.array([[0.0, 0.0, 1.0]])
    d = np.array([Br * (v0[0] + h * a[0])])
    e = np.array([Bs * (v0[1] + h * a[1])])
    er = np.array([[0.0], [1.0], [0.0]])
    es = np.array([[0.0], [0.0], [1.0]])
    H = np.diag([zeta, 1.0, 1.0]) + (er + E.T) @ (E + er.T) + (es + F.T) @ (F + es.T)
    g = (er + E.T) @ d + (es + F.T) @ e
    chi = h * h * Kn + h * Bn
    A = np.array([[1.0 + chi / m, 0.0, 0.0]])
    q = np.array([-Kn * -1e-3 - (h * Kn + Bn) * (v0[2] + h * a[2])])

    np.testing.assert_allclose(rp.problem.H, H, rtol=1e-13)
    np.testing.assert_allclose(rp.problem.g, g, rtol=1e-13)
    np.testing.assert_allclose(rp.problem.A, A, rtol=1e-13)
    np.testing.assert_allclose(rp.problem.q, q, rtol=1e-13)
    assert len(rp.problem.cones) == 1 and rp.problem.cones[0].mu == mu


def test_hessian_positive_definite_on_random_instances():
    rng = np.random.default_rng(2)
    for _ in range(50):
        inst = random_instance(rng)
        b = inst.blocks
        rp = assemble_reduced([b[Family.BILATERAL], b[Family.UNILATERAL]], inst.contacts, inst.model, inst.state, 0.0, StepConfig(inst.h))
        np.testing.assert_array_equal(rp.problem.H, rp.problem.H.T)
        np.linalg.cholesky(rp.problem.H)


def test_bilateral_recovery_trivial():
    model = particle_model(2, 1.0, [0.0, 0.0])
    s0 = GeneralizedState(np.zeros(2), np.zeros(2))
    bil = ConstraintBlock(Family.BILATERAL, [0.0], [0.0], [[1.0, 0.0]], [0.0], 0.0, 0.0)
    uni = ConstraintBlock(Family.UNILATERAL, [-1e-3], [0.0], [[0.0, 1.0]], [0.0], 1e3, 1.0)
    rp = assemble_reduced([bil, uni], None, model, s0, 0.0, StepConfig(0.01))
    np.testing.assert_array_equal(recover_bilateral_forces(rp, np.zeros(rp.size)), [0.0])


@pytest.mark.parametrize("with_gdot", [False, True])
def test_bilateral_paths_agree(with_gdot):
    rng = np.random.default_rng(3 + with_gdot)
    for _ in range(100):
        m_v = int(rng.integers(2, 6))
        n_b = int(rng.integers(1, m_v))
        h = float(10.0 ** rng.uniform(-4, -1))
        Mr = rng.normal(size=(m_v, m_v))
        M = Mr @ Mr.T + np.eye(m_v)
        f = rng.normal(size=m_v)
        model = SystemModel(lambda q: M, lambda q: np.eye(m_v), lambda t, q, v: f)
        s0 = GeneralizedState(np.zeros(m_v), rng.normal(size=m_v))
        bil = random_block(rng, Family.BILATERAL, n_b, m_v, gdot_scale=1.0 if with_gdot else 0.0)
        ctx = StepContext.evaluate(model, s0, 0.0)
        rp = assemble_from_context(bil, None, None, ctx, StepConfig(h))
        lam_b = recover_bilateral_forces(rp, np.zeros(0))
        ref = solve_bilateral(bil, delassus_from_factor(bil.G, ctx.mass), bil.G @ ctx.mass.solve(f), h)
        assert np.max(np.abs(lam_b - ref.lambda1)) <= 1e-10 * max(1.0, np.max(np.abs(ref.lambda1)))


def test_bilateral_plus_unilateral_matches_dense_oracle():
    model = particle_model(2, 1.5, [0.0, -9.8])
    s0 = GeneralizedState(np.zeros(2), [0.2, -0.4])
    bil = ConstraintBlock(Family.BILATERAL, [0.01], [0.1], [[1.0, 1.0]], [0.0], 1e4, 10.0)
    uni = ConstraintBlock(Family.UNILATERAL, [-2e-3], [-0.3], [[0.0, 1.0]], [0.0], 1e5, 50.0)
    h = 0.01
    res = solve_step(model, s0, 0.0, [bil, uni], None, StepConfig(h))
    fams = {k: dict(phi0=b.phi0, dphi0=b.dphi0, G=b.G, gdot_v=b.gdot_v, K=b.K, B=b.B) for k, b in (("b", bil), ("u", uni))}
    ref = dense_step_program(fams, np.zeros(0), np.eye(2) / 1.5, np.array([0.0, -9.8]), h, 1.0 / h, weight_u=1.0)
    np.testing.assert_allclose(res.lam[Family.BILATERAL], ref["lam_b"], rtol=1e-10)
    np.testing.assert_allclose(res.lam[Family.UNILATERAL], ref["lam_u"], rtol=1e-10)
    assert res.lam[Family.UNILATERAL][0] > 0.0


def test_constraint_state_with_zero_forces():
    model = particle_model(2)
    s0 = GeneralizedState(np.zeros(2), np.zeros(2))
    block = ConstraintBlock(Family.UNILATERAL, [0.25], [0.0], [[1.0, 0.0]], [0.0], 1.0, 1.0)
    ctx = StepContext.evaluate(model, s0, 0.0)
    phi1, dphi1 = recover_constraint_state({Family.UNILATERAL: block}, {Family.UNILATERAL: np.zeros(1)}, ctx, 0.1)
    np.testing.assert_array_equal(phi1[Family.UNILATERAL], [0.25])
    np.testing.assert_array_equal(dphi1[Family.UNILATERAL], [0.0])


def test_slack_recovery_satisfies_tangent_law():
    rng = np.random.default_rng(5)
    for _ in range(20):
        inst = random_instance(rng, planar=False)
        if inst.blocks[Family.NORMAL].size == 0:
            continue
        res = solve_instance(inst)
        for fam, beta in ((Family.TANGENT_R, res.beta_r), (Family.TANGENT_S, res.beta_s)):
            b = inst.blocks[fam]
            W = b.G @ np.linalg.solve(inst.M, b.G.T)
            law = -b.K * res.phi1[fam] - b.B * res.dphi1[fam] - mhat_apply(W, b.gdot_v) + beta
            scale = 1.0 + np.max(np.abs(res.lam[fam])) + np.max(np.abs(beta))
            assert np.max(np.abs(res.lam[fam] - law)) <= 1e-9 * scale


def test_slack_recovery_direct_call():
    rng = np.random.default_rng(6)
    inst = random_instance(rng, planar=False)
    while inst.blocks[Family.NORMAL].size == 0:
        inst = random_instance(rng, planar=False)
    res = solve_instance(inst)
    lam_star = np.concatenate([res.lam[f] for f in (Family.NORMAL, Family.TANGENT_R, Family.TANGENT_S, Family.UNILATERAL)])
    beta_r, beta_s = recover_slack_forces(res.reduced, lam_star)
    np.testing.assert_allclose(beta_r, res.beta_r)
    np.testing.assert_allclose(beta_s, res.beta_s)


def test_unilateral_complementarity_on_decoupled_rows():
    # orthogonal rows under a diagonal mass matrix give a diagonal W, so each force is max(0, law)
    rng = np.random.default_rng(7)
    active_seen = inactive_seen = 0
    for _ in range(40):
        m_v, h = 3, float(10.0 ** rng.uniform(-3, -1))
        masses = rng.uniform(0.5, 3.0, size=m_v)
        f = rng.normal(size=m_v) * 5.0
        model = SystemModel(lambda q: np.diag(masses), lambda q: np.eye(m_v), lambda t, q, v: f)
        s0 = GeneralizedState(np.zeros(m_v), rng.normal(size=m_v))
        uni = random_block(rng, Family.UNILATERAL, 2, m_v)
        uni.G = np.eye(m_v)[:2] * rng.uniform(0.5, 2.0, size=(2, 1))
        res = solve_step(model, s0, 0.0, [uni], None, StepConfig(h))
        W = uni.G @ np.diag(1.0 / masses) @ uni.G.T
        lam = res.lam[Family.UNILATERAL]
        law = -uni.K * res.phi1[Family.UNILATERAL] - uni.B * res.dphi1[Family.UNILATERAL] - mhat_apply(W, uni.gdot_v)
        scale = 1.0 + np.max(np.abs(law))
        np.testing.assert_allclose(lam, np.maximum(law, 0.0), atol=1e-9 * scale)
        active_seen += int(np.sum(law > 0))
        inactive_seen += int(np.sum(law < 0))
    assert active_seen and inactive_seen


def test_reduction_matches_unreduced_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        inst = random_instance(rng)
        res = solve_instance(inst)
        ref = oracle_for(inst)
        assert ref["status"] in ("enumerated", "refined")
        assert ref["violation"] <= 1e-9
        assert compare_with_dense(inst, res, ref) <= 1e-6


def test_bilateral_only_dispatch_uses_linear_path():
    rng = np.random.default_rng(9)
    inst = random_instance(rng)
    bil = random_block(rng, Family.BILATERAL, 1, inst.M.shape[0])
    res = solve_step(inst.model, inst.state, 0.0, [bil], None, StepConfig(inst.h))
    assert res.path == "linear"
    ctx = StepContext.evaluate(inst.model, inst.state, 0.0)
    ref = solve_bilateral(bil, delassus_from_factor(bil.G, ctx.mass), bil.G @ ctx.mass.solve(inst.f), inst.h)
    np.testing.assert_array_equal(res.lam[Family.BILATERAL], ref.lambda1)
    np.testing.assert_allclose(res.phi1[Family.BILATERAL], ref.phi1, rtol=1e-10, atol=1e-14)
    rp = assemble_from_context(bil, None, None, ctx, StepConfig(inst.h))
    np.testing.assert_allclose(recover_bilateral_forces(rp, np.zeros(0)), ref.lambda1, rtol=1e-10)


def test_path_selection():
    rng = np.random.default_rng(10)
    seen = set()
    for _ in range(30):
        inst = random_instance(rng)
        res = solve_instance(inst)
        has_cones = inst.blocks[Family.NORMAL].size and not inst.planar
        assert res.path == ("qcqp" if has_cones else "qp")
        seen.add(res.path)
    assert seen == {"qp", "qcqp"}


def test_inactive_rows_excluded():
    model = particle_model(2, 1.0, [0.0, -9.8])
    s0 = GeneralizedState([0.0, 1.0], [0.0, 0.0])
    # separated: phi0 > 0
    uni = ConstraintBlock(Family.UNILATERAL, [1.0], [0.0], [[0.0, 1.0]], [0.0], 1e6, 10.0)
    res = solve_step(model, s0, 0.0, [uni], None, StepConfig(0.01))
    assert res.path == "free"
    np.testing.assert_array_equal(res.lam[Family.UNILATERAL], [0.0])
    assert res.active[Family.UNILATERAL].size == 0


def planar_and_spatial(mu, v0, Kn=1e5, Bn=100.0, Br=1e3, h=0.01):
    f = np.array([3.0, 0.0, -9.8])
    model = particle_model(3, 1.0, f)
    s0 = GeneralizedState([0.0, 0.0, -1e-4], v0)
    normal = ConstraintBlock(Family.NORMAL, [-1e-4], [v0[2]], [[0.0, 0.0, 1.0]], [0.0], Kn, Bn)
    tan_r = ConstraintBlock(Family.TANGENT_R, [0.0], [v0[0]], [[1.0, 0.0, 0.0]], [0.0], 0.0, Br)
    tan_s = ConstraintBlock(Family.TANGENT_S, [0.0], [v0[1]], [[0.0, 1.0, 0.0]], [0.0], 0.0, Br)
    cfg = StepConfig(h)
    planar = solve_step(model, s0, 0.0, [], ContactSet(normal, tan_r, None, mu), cfg)
    spatial = solve_step(model, s0, 0.0, [], ContactSet(normal, tan_r, tan_s, mu), cfg)
    return planar, spatial


@pytest.mark.parametrize("mu", [0.05, 0.3, 2.0])
def test_planar_and_spatial_agree(mu):
    planar, spatial = planar_and_spatial(mu, np.array([0.5, 0.0, -0.1]))
    assert planar.path == "qp" and spatial.path == "qcqp"
    assert abs(spatial.lam[Family.TANGENT_S][0]) <= 1e-6
    for fam in (Family.NORMAL, Family.TANGENT_R):
        assert abs(spatial.lam[fam][0] - planar.lam[fam][0]) <= 1e-6 * (1.0 + abs(planar.lam[fam][0]))


def test_zero_friction_planar_pins_tangent():
    planar, spatial = planar_and_spatial(0.0, np.array([0.5, 0.0, -0.1]))
    assert planar.lam[Family.TANGENT_R][0] == 0.0
    assert abs(spatial.lam[Family.TANGENT_R][0]) <= 1e-10


def test_friction_opposes_sliding_without_tangent_stiffness():
    rng = np.random.default_rng(11)
    for _ in range(20):
        mu = float(rng.uniform(0.05, 0.5))
        v0 = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), -0.05])
        _, spatial = planar_and_spatial(mu, v0)
        tang = np.array([spatial.lam[Family.TANGENT_R][0], spatial.lam[Family.TANGENT_S][0]])
        rate = np.array([spatial.dphi1[Family.TANGENT_R][0], spatial.dphi1[Family.TANGENT_S][0]])
        assert tang @ rate <= 1e-12 * (1.0 + np.linalg.norm(tang) * np.linalg.norm(rate))
        assert np.linalg.norm(tang) > 0.0


def test_resting_contact_supports_weight():
    K, B, h, g = 1e8, 1e3, 1e-3, 9.8
    model = particle_model(2, 1.0, [0.0, -g])
    state = GeneralizedState([0.0, -g / K], [0.0, 0.0])
    cfg = StepConfig(h)
    for step in range(2000):
        z, vz, vx = state.q[1], state.v[1], state.v[0]
        normal = ConstraintBlock(Family.NORMAL, [z], [vz], [[0.0, 1.0]], [0.0], K, B)
        tan_r = ConstraintBlock(Family.TANGENT_R, [0.0], [vx], [[1.0, 0.0]], [0.0], 0.0, 1e6 / h)
        res = solve_step(model, state, step * h, [], ContactSet(normal, tan_r, None, 0.0), cfg)
        state = res.state
    assert res.lam[Family.NORMAL][0] == pytest.approx(g, rel=0.01)


def test_sign_invariants_on_random_steps():
    rng = np.random.default_rng(12)
    for _ in range(30):
        inst = random_instance(rng)
        res = solve_instance(inst)
        lam = res.lam
        scale = 1.0 + max(np.max(np.abs(v)) for v in lam.values() if v.size)
        for fam in (Family.UNILATERAL, Family.NORMAL):
            assert np.all(lam[fam] >= -1e-8 * scale)
        for i in range(inst.blocks[Family.NORMAL].size):
            t = np.hypot(lam[Family.TANGENT_R][i], 0.0 if inst.planar else lam[Family.TANGENT_S][i])
            assert inst.mu[i] * lam[Family.NORMAL][i] - t >= -1e-8 * scale


def test_solver_failure_raises_with_diagnostics():
    rng = np.random.default_rng(13)
    inst = random_instance(rng, planar=False)
    opts = SolverOptions(max_outer=1, max_inner=1, polish_from=0.0)
    with pytest.raises(StepFailure) as err:
        solve_instance(inst, solver=opts)
    assert err.value.report is not None and err.value.problem is not None


def test_debug_dump_written_when_verbose(tmp_path):
    rng = np.random.default_rng(14)
    inst = random_instance(rng)
    path = tmp_path / "dump.txt"
    solve_instance(inst, verbosity=2, dump_path=str(path))
    text = path.read_text()
    assert "% step t0=0.0" in text
    body = text.split("solution")[0]
    prob = load_problem(body)
    assert prob.size == sum(inst.blocks[f].size for f in (Family.NORMAL, Family.TANGENT_R, Family.UNILATERAL)) + (
        0 if inst.planar else inst.blocks[Family.TANGENT_S].size
    ) - int(np.sum(inst.mu == 0.0)) * inst.planar
    quiet = tmp_path / "quiet.txt"
    solve_instance(inst, verbosity=1, dump_path=str(quiet))
    assert not quiet.exists()


def test_contact_family_in_blocks_rejected():
    model = particle_model(2)
    s0 = GeneralizedState(np.zeros(2), np.zeros(2))
    normal = ConstraintBlock(Family.NORMAL, [-1.0], [0.0], [[0.0, 1.0]], [0.0], 1.0, 1.0)
    with pytest.raises(ValueError):
        solve_step(model, s0, 0.0, [normal], None, StepConfig(0.01))


def test_dimension_mismatch_rejected():
    model = particle_model(2)
    s0 = GeneralizedState(np.zeros(2), np.zeros(2))
    uni = ConstraintBlock(Family.UNILATERAL, [-1.0], [0.0], [[0.0, 1.0, 0.0]], [0.0], 1.0, 1.0)
    with pytest.raises(ValueError):
        solve_step(model, s0, 0.0, [uni], None, StepConfig(0.01))
