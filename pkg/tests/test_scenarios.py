import math

import numpy as np
import pytest

from constraint_stepper.constraint_assembler import StepConfig, solve_step
from constraint_stepper.dynamics_core import Family, GeneralizedState, SystemModel
from constraint_stepper.scenarios import (
    SCENARIOS,
    ElasticFoundation,
    Geometry,
    HertzFoot,
    LimitedPendulum,
    ScenarioConfig,
    ScenarioError,
    SphereStack,
    convergence_study,
    get_scenario,
    hertz_constraint_value,
    hertz_normal,
    hessian_nonzeros,
    integrate,
    observed_order,
    run_elastic_foundation,
    run_incline_box,
    run_pendulum_bilateral,
    run_pendulum_rom,
    run_sphere_stack,
)
from constraint_stepper.scenarios.convergence import pairwise_orders
from constraint_stepper.scenarios.rigid import RigidBodies, quat_rate_matrix, quat_to_matrix, tangent_basis


def random_unit_quaternion(rng):
    quat = rng.normal(size=4)
    return quat / np.linalg.norm(quat)


# Hertz law


def test_hertz_zero_depth():
    assert hertz_normal(0.0, HertzFoot(0.01, 1e11)) == (0.0, 0.0)


def test_hertz_pseudo_stiffness():
    assert HertzFoot(0.01, 1e11).stiffness == pytest.approx(1e10, rel=1e-15)


def test_hertz_force_example():
    depth_power, force = hertz_normal(3.9e-7, HertzFoot(0.01, 1e11))
    assert depth_power == pytest.approx(3.9e-7**1.5, rel=1e-15)
    assert force == pytest.approx(2.44, rel=5e-3)
    assert force == pytest.approx(1e11 * math.sqrt(0.01 * 3.9e-7**3), rel=1e-12)


def test_hertz_rejects_negative_depth_and_bad_foot():
    with pytest.raises(ValueError):
        hertz_normal(-1e-9, HertzFoot(0.01, 1e11))
    with pytest.raises(ValueError):
        HertzFoot(0.0, 1e11)
    with pytest.raises(ValueError):
        HertzFoot(0.01, -1.0)


def test_hertz_constraint_value_sign():
    foot = HertzFoot(0.01, 1e11)
    assert hertz_constraint_value(1e-6, foot) == pytest.approx(-(1e-6**1.5))
    assert hertz_constraint_value(-2e-3, foot) == pytest.approx(2e-3)
    assert hertz_constraint_value(0.0, foot) == 0.0


# configuration


def test_config_validation_and_steps():
    assert ScenarioConfig("pendulum", 0.1, 1.0).steps == 10
    assert ScenarioConfig("pendulum", 0.01, 5.0).steps == 500
    for h, duration in ((0.0, 1.0), (-1.0, 1.0), (math.nan, 1.0), (0.1, 0.0), (0.1, math.inf)):
        with pytest.raises(ScenarioError):
            ScenarioConfig("pendulum", h, duration)
    with pytest.raises(ScenarioError):
        ScenarioConfig("pendulum", 0.1, 1.0, record_every=0)


def test_config_resolution_coerces_and_rejects():
    cfg = ScenarioConfig("foundation", 0.01, 1.0, {"elements": "900", "load": "50"})
    resolved = cfg.resolved(SCENARIOS["foundation"].defaults)
    assert resolved["elements"] == 900 and isinstance(resolved["elements"], int)
    assert resolved["load"] == 50.0
    with pytest.raises(ScenarioError):
        ScenarioConfig("foundation", 0.01, 1.0, {"elements": "2.5"}).resolved(SCENARIOS["foundation"].defaults)
    with pytest.raises(ScenarioError):
        ScenarioConfig("foundation", 0.01, 1.0, {"colour": "red"}).resolved(SCENARIOS["foundation"].defaults)
    with pytest.raises(ScenarioError):
        ScenarioConfig("foundation", 0.01, 1.0, {"load": "nan"}).resolved(SCENARIOS["foundation"].defaults)


def test_registry_lookup():
    assert set(SCENARIOS) == {"pendulum", "rom", "foundation", "incline", "stack"}
    assert get_scenario("stack").runner is run_sphere_stack
    with pytest.raises(ScenarioError):
        get_scenario("nosuch")


# rigid-body kinematics


def test_tangent_basis_right_handed_orthonormal():
    rng = np.random.default_rng(11)
    for _ in range(200):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        t1, t2 = tangent_basis(normal)
        frame = np.column_stack([t1, t2, normal])
        np.testing.assert_allclose(frame.T @ frame, np.eye(3), atol=1e-14)
        assert np.linalg.det(frame) == pytest.approx(1.0, abs=1e-14)


def test_tangent_basis_deterministic_choice():
    t1, t2 = tangent_basis(np.array([0.0, 0.0, 1.0]))
    # smallest component is x (lowest index on ties): t1 = z cross x = y
    np.testing.assert_array_equal(t1, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(t2, [-1.0, 0.0, 0.0])


def test_rotation_matrix_orthonormal():
    rng = np.random.default_rng(12)
    for _ in range(50):
        R = quat_to_matrix(random_unit_quaternion(rng))
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)


def test_quaternion_rate_matches_rotation_derivative():
    rng = np.random.default_rng(13)
    for _ in range(20):
        quat = random_unit_quaternion(rng)
        omega = rng.normal(size=3)
        rate = quat_rate_matrix(quat) @ omega
        assert quat @ rate == pytest.approx(0.0, abs=1e-14)
        eps = 1e-7
        dR = (quat_to_matrix(quat + eps * rate) - quat_to_matrix(quat - eps * rate)) / (2 * eps)
        R = quat_to_matrix(quat)
        skew = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
        # body-frame angular velocity: dR/dt = R [omega]x
        np.testing.assert_allclose(dR, R @ skew, atol=1e-7)


def test_point_row_and_bias_against_finite_differences():
    rng = np.random.default_rng(14)
    bodies = RigidBodies([2.0], [np.diag([1.0, 2.0, 3.0])])
    for _ in range(10):
        q, v = bodies.pack([rng.normal(size=3)], [random_unit_quaternion(rng)], [rng.normal(size=3)], [rng.normal(size=3)])
        local = rng.normal(size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)

        def row_at(qq):
            body = bodies.body(qq, v, 0)
            return bodies.point_row(body, body.rotation @ local, direction)

        body = bodies.body(q, v, 0)
        offset = body.rotation @ local
        assert row_at(q) @ v == pytest.approx(direction @ bodies.point_velocity(body, offset), abs=1e-13)
        eps = 1e-6
        qdot = bodies.kinematic_map(q) @ v
        gdot = (row_at(q + eps * qdot) - row_at(q - eps * qdot)) / (2 * eps)
        assert bodies.point_bias(body, offset, direction) == pytest.approx(gdot @ v, abs=1e-6)


def test_rigid_energy_and_gyroscopic_force():
    bodies = RigidBodies([3.0], [np.diag([1.0, 2.0, 3.0])])
    q, v = bodies.pack([[0.0, 0.0, 2.0]], [[1.0, 0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
    assert bodies.kinetic_energy(v) == pytest.approx(0.5 * 3.0 + 0.5 * 3.0)
    assert bodies.potential_energy(q) == pytest.approx(3.0 * 9.81 * 2.0)
    force = bodies.applied_force(0.0, q, v)
    np.testing.assert_allclose(force, [0, 0, -3.0 * 9.81, 0, 0, 0])


# run loop


def test_geometry_counter_one_query_per_step():
    cases = [
        (run_pendulum_bilateral, ScenarioConfig("pendulum", 0.1, 1.0)),
        (run_elastic_foundation, ScenarioConfig("foundation", 0.01, 0.05)),
        (run_incline_box, ScenarioConfig("incline", 0.01, 0.05)),
        (run_sphere_stack, ScenarioConfig("stack", 0.01, 0.05, {"spheres": 2})),
        (run_pendulum_rom, ScenarioConfig("rom", 1e-3, 0.05)),
    ]
    for runner, cfg in cases:
        traj = runner(cfg)
        assert traj.steps == cfg.steps
        assert traj.geometry_calls == cfg.steps + 1


def test_record_every_keeps_final_state():
    full = run_pendulum_bilateral(ScenarioConfig("pendulum", 0.01, 0.25))
    thin = run_pendulum_bilateral(ScenarioConfig("pendulum", 0.01, 0.25, record_every=10))
    assert thin.times.size == 4
    np.testing.assert_allclose(thin.times, [0.0, 0.1, 0.2, 0.25])
    np.testing.assert_array_equal(thin.q[-1], full.q[-1])
    np.testing.assert_array_equal(thin.q[1], full.q[10])


def test_trajectory_time_grid_uniform_and_shapes():
    traj = run_incline_box(ScenarioConfig("incline", 0.01, 0.1))
    np.testing.assert_allclose(np.diff(traj.times), 0.01, rtol=1e-12)
    assert traj.q.shape == (11, 7) and traj.v.shape == (11, 6)
    for fam in ("n", "r", "s"):
        assert traj.lam[fam].shape == (11, 4)
    assert traj.lam["n"][0].tolist() == [0.0] * 4


class ExplodingParticle:
    """Free particle whose applied force turns non-finite after t = 0.02."""

    def __init__(self):
        self.model = SystemModel(
            lambda q: np.eye(1), lambda q: np.eye(1), lambda t, q, v: np.array([math.inf if t > 0.02 else 1.0])
        )
        self.initial_state = GeneralizedState([0.0], [0.0])

    def geometry(self, t, state):
        return Geometry([])

    def energy(self, state):
        return 0.5 * float(state.v @ state.v)


def test_non_finite_state_gives_truncation_record():
    cfg = ScenarioConfig("particle", 0.01, 0.1)
    traj = integrate(ExplodingParticle(), cfg, {})
    assert not traj.complete
    assert traj.truncated_at == 4
    assert "non-finite" in traj.truncation_reason
    assert np.all(np.isfinite(traj.q))


# pendulum scenarios


def test_pinned_pendulum_starts_on_joint():
    traj = run_pendulum_bilateral(ScenarioConfig("pendulum", 0.01, 0.01))
    assert traj.phi_norm["b"][0] == 0.0
    assert traj.energy[0] == pytest.approx(9.81)


def test_pinned_pendulum_deviation_shrinks_with_h():
    coarse = run_pendulum_bilateral(ScenarioConfig("pendulum", 0.02, 0.5)).metrics["max_deviation"]
    fine = run_pendulum_bilateral(ScenarioConfig("pendulum", 0.01, 0.5)).metrics["max_deviation"]
    assert fine < coarse


def test_rom_free_steps_match_solve_step():
    pend = LimitedPendulum(k=1e12, b=0.0, length=0.1, mass=1.0, theta0=1.0, omega0=-2.0)
    h = 1e-3
    theta, omega = 1.0, -2.0
    direct_omega = omega + h * pend.torque(theta) / pend.inertia
    direct_theta = theta + h * direct_omega
    result = solve_step(pend.model, GeneralizedState([theta], [omega]), 0.0, [pend.block(theta, omega)], None, StepConfig(h))
    assert result.path == "free"
    assert result.state.q[0] == direct_theta
    assert result.state.v[0] == direct_omega


def test_rom_amplitude_helper():
    pend = LimitedPendulum(k=1e12, b=0.0, length=0.1, mass=1.0, theta0=math.pi / 2, omega0=0.0)
    assert pend.amplitude(math.pi / 2, 0.0) == pytest.approx(math.pi / 2, rel=1e-12)
    assert pend.amplitude(0.0, 0.0) == 0.0


def test_rom_impacts_and_sign():
    traj = run_pendulum_rom(ScenarioConfig("rom", 1e-4, 0.3))
    assert traj.metrics["impacts"] >= 1
    assert traj.metrics["qp_steps"] >= 1
    assert np.all(traj.lam["u"] >= 0.0)
    assert traj.metrics["max_abs_theta"] <= math.pi / 2 + 1e-3


# rigid-body contact scenarios


def test_foundation_element_stiffness_and_validation():
    assert ElasticFoundation(1.0, 8.0, 1.0, 100, 1e7, 1.0, 5.0, 10.0).element_stiffness == pytest.approx(1e5)
    assert ElasticFoundation(1.0, 8.0, 1.0, 900, 1e11, 1.0, 5.0, 10.0).element_stiffness == pytest.approx(1e11 / 900)
    with pytest.raises(ScenarioError):
        ElasticFoundation(1.0, 8.0, 1.0, 99, 1e7, 1.0, 5.0, 10.0)


def test_foundation_load_torque_uses_body_frame_point():
    cube = ElasticFoundation(1.0, 8.0, 1.0, 100, 1e7, 1.0, 5.0, 10.0)
    q, v = cube.initial_state.q, cube.initial_state.v
    force = cube.external_force(0.0, q, v)
    np.testing.assert_allclose(force[:3], [0.0, 0.0, -5.0])
    np.testing.assert_allclose(force[3:], np.cross([0.5, 0.0, 0.5], [0.0, 0.0, -5.0]))


def test_foundation_supports_weight_at_rest():
    traj = run_elastic_foundation(ScenarioConfig("foundation", 0.01, 0.2, {"load": 0.0}))
    weight = 8.0 * 9.81
    assert np.sum(traj.lam["u"][-1]) == pytest.approx(weight, rel=1e-6)
    assert traj.metrics["max_tilt"] < 1e-12


def test_incline_starts_at_static_depth():
    traj = run_incline_box(ScenarioConfig("incline", 0.01, 0.01, {"mu": 0.375}))
    force = np.mean(traj.lam["n"][-1])
    assert force == pytest.approx(9.81 * math.cos(math.radians(15.0)) / 4.0, rel=0.02)


def test_hessian_nonzero_count():
    H = np.array([[1.0, 1e-20, 0.0], [1e-20, 2.0, 0.5], [0.0, 0.5, 3.0]])
    assert hessian_nonzeros(H) == 5
    assert hessian_nonzeros(np.zeros((0, 0))) == 0


def test_stack_geometry_rows():
    stack = SphereStack(3, 0.1, 1.0, 1e11, 1.0, 0.5, 0.01)
    geom = stack.geometry(0.0, stack.initial_state)
    contacts = geom.contacts
    assert contacts.size == 3
    # spaced apart: every candidate separated by the gap
    np.testing.assert_allclose(contacts.normal.phi0, 0.01, rtol=1e-12)
    G = contacts.normal.G
    # ground row pushes sphere 0 up; pair rows separate neighbours
    np.testing.assert_allclose(G[0, :3], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(G[1, :3], [0.0, 0.0, -1.0])
    np.testing.assert_allclose(G[1, 6:9], [0.0, 0.0, 1.0])
    with pytest.raises(ScenarioError):
        SphereStack(0, 0.1, 1.0, 1e11, 1.0, 0.5, 0.01)


# convergence helpers


def test_observed_order_on_exact_power_laws():
    hs = [0.4, 0.2, 0.1]
    assert observed_order(hs, [3.0 * h for h in hs]) == pytest.approx(1.0, abs=1e-12)
    assert observed_order(hs, [5.0 * h * h for h in hs]) == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(pairwise_orders(hs, [h * h for h in hs]), [2.0, 2.0])
    assert math.isnan(observed_order(hs, [1.0, 0.0, 1.0]))


def test_convergence_study_validation_and_small_run():
    with pytest.raises(ScenarioError):
        convergence_study(run_pendulum_bilateral, "pendulum", [0.03, 0.02], 0.1)
    with pytest.raises(ScenarioError):
        convergence_study(run_pendulum_bilateral, "pendulum", [0.02], 0.1)
    report = convergence_study(run_pendulum_bilateral, "pendulum", [0.02, 0.01], 0.2, reference_factor=10)
    assert report.reference_h == pytest.approx(1e-3)
    assert report.errors[1] < report.errors[0]
