import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdi_flow import estimator as est
from rgbdi_flow import sim
from rgbdi_flow.geom import GRAVITY_MAGNITUDE, GravityDir, so3_exp
from rgbdi_flow.imu import ImuBias, ImuNoiseParams, ImuStream, gyro_at, interval_samples, preintegrate
from rgbdi_flow.rangeflow import DepthFrame, FlowLinearSystem, Intrinsics, assemble, estimate_pair

NOISE = ImuNoiseParams.from_densities(sim.GYRO_NOISE_DENSITY, sim.ACCEL_NOISE_DENSITY, sim.IMU_RATE)


def random_system(rng, m=40):
    return FlowLinearSystem(rng.normal(size=(m, 6)), rng.normal(size=m), rng.uniform(0.2, 1.0, m),
                            np.zeros((m, 2), dtype=int), dt=1 / 30)


def random_state(rng, n):
    return est.WindowState(np.arange(n) / 30, rng.normal(0, [10, 10, 10, 0.3, 0.3, 0.3], (n, 6)),
                           GravityDir(rng.normal(size=3)),
                           ImuBias(rng.normal(0, 0.01, 3), rng.normal(0, 2, 3)),
                           np.array([so3_exp(p) for p in rng.normal(0, 0.1, (n, 3))]))


def random_preint(rng, t0=0.0):
    t = t0 + np.arange(7) * 0.005
    stream = ImuStream(t, rng.normal(0, 0.5, (7, 3)), rng.normal(0, 300, (7, 3)))
    return preintegrate(stream, ImuBias(), NOISE, t_end=t0 + 1 / 30)


def numeric_jacobian(f, state, eps=1e-6):
    r0 = f(state)
    J = np.zeros((len(r0), state.dim))
    for k in range(state.dim):
        dx = np.zeros(state.dim)
        dx[k] = eps
        J[:, k] = (f(state.retract(dx)) - f(state.retract(-dx))) / (2 * eps)
    return J


# ------------------------------------------------------------- layout

@pytest.mark.parametrize("n,dim", [(2, 20), (3, 26), (5, 38)])
def test_dimension_law(n, dim):
    assert est.param_dim(n) == dim


def test_estimator_dimension_follows_frames(rng):
    w = est.SlidingWindowEstimator(5, NOISE)
    w.add_frame(0.0, gyro=np.zeros(3))
    w.add_frame(1 / 30, random_system(rng), random_preint(rng), np.zeros(3))
    assert w.dim == 20
    # a frame without inertial data still gets its own twist slots
    w.add_frame(2 / 30, random_system(rng))
    assert w.dim == 26
    w.add_frame(3 / 30, random_system(rng), random_preint(rng), np.zeros(3))
    w.add_frame(4 / 30, random_system(rng), random_preint(rng), np.zeros(3))
    assert w.dim == 38


def test_out_of_order_frame_rejected(rng):
    w = est.SlidingWindowEstimator(3)
    w.add_frame(0.1)
    with pytest.raises(ValueError):
        w.add_frame(0.1, random_system(rng))
    with pytest.raises(ValueError):
        w.add_frame(0.05, random_system(rng))


def test_retract_boxminus_roundtrip(rng):
    x = random_state(rng, 3)
    dx = rng.normal(0, 0.1, x.dim)
    np.testing.assert_allclose(x.retract(dx).boxminus(x), dx, atol=1e-9)
    assert np.linalg.norm(x.retract(dx).gravity.vector) == pytest.approx(GRAVITY_MAGNITUDE)


# -------------------------------------------------------------- visual

def test_visual_block_static_pair_zero_residual():
    K = sim.default_intrinsics()
    f = sim.render_depth(sim.default_scene(), sim.desk_camera(), [0, 0, 120], K)
    system = assemble(f, DepthFrame(1 / 30, f.depth, K))
    state = est.WindowState([0, 1 / 30], np.zeros((2, 6)), GravityDir([0, 1, 0]), ImuBias())
    b = est.build_visual_block(system, 0, state)
    assert np.linalg.norm(b.residual) == 0


@pytest.mark.parametrize("pair", [0, 1, 2])
def test_visual_block_jacobian(pair, rng):
    state = random_state(rng, 4)
    system = random_system(rng)
    block = est.build_visual_block(system, pair, state)
    J = numeric_jacobian(lambda s: est.build_visual_block(system, pair, s).residual, state)
    np.testing.assert_allclose(block.jacobian, J, atol=1e-10 * max(1, np.abs(J).max()) * 1e2)
    outside = np.ones(state.dim, bool)
    outside[6 * pair: 6 * pair + 12] = False
    assert np.all(block.jacobian[:, outside] == 0)
    WA, _ = system.weighted()
    np.testing.assert_allclose(block.jacobian[:, est.twist_slot(pair)], 0.5 * WA)


def test_visual_factor_preserves_cost(rng):
    system = random_system(rng, 60)
    f = est.VisualFactor.from_system(system)
    for _ in range(5):
        x = rng.normal(size=6)
        full = np.sum(system.residual(x) ** 2)
        assert np.sum((f.R @ x - f.y) ** 2) + f.rest == pytest.approx(full, rel=1e-10)


def test_empty_visual_system_is_omitted(rng):
    empty = FlowLinearSystem(np.zeros((0, 6)), np.zeros(0), np.zeros(0), np.zeros((0, 2), int))
    assert est.build_visual_block(empty, 0, random_state(rng, 2)) is None


# ------------------------------------------------------------ inertial

def test_inertial_jacobians_match_finite_differences(rng):
    state = random_state(rng, 3)
    pre = random_preint(rng)
    gyro = rng.normal(0, 0.3, 3)
    prior = ImuBias(rng.normal(0, 0.01, 3), rng.normal(0, 2, 3))
    cases = {
        "delta_v": lambda s: est.delta_v_block(pre, 1, s),
        "ang_vel": lambda s: est.angular_velocity_block(gyro, 2, s, NOISE),
        "bias_g": lambda s: est.bias_blocks(prior, s, NOISE)[0],
        "bias_a": lambda s: est.bias_blocks(prior, s, NOISE)[1],
    }
    for name, make in cases.items():
        J_num = numeric_jacobian(lambda s: make(s).residual, state)
        J = make(state).jacobian
        scale = np.abs(J_num).max()
        np.testing.assert_allclose(J, J_num, atol=1e-4 * scale, err_msg=name)


def test_inertial_residuals_vanish_on_noiseless_truth():
    # 40 Hz frames fall on the 200 Hz IMU grid, so no sample is interpolated
    seq = sim.simulate_sequence(3, seed=2, depth_noise=0, gyro_density=0, accel_density=0,
                                bias=ImuBias(), camera_rate=40.0, sampling="interval")
    t = np.array([f.timestamp for f in seq.frames])
    R0 = seq.traj.rotation(t[0])
    rot = np.array([R0.T @ seq.traj.rotation(tk) for tk in t])
    twists = seq.traj.body_velocity(t).reshape(-1, 6)
    state = est.WindowState(t, twists, GravityDir(R0.T @ sim.WORLD_GRAVITY), ImuBias(), rot)
    preints = [preintegrate(interval_samples(seq.imu, t[k], t[k + 1]), ImuBias(), NOISE,
                            t_end=t[k + 1]) for k in range(2)]
    for p in range(2):
        np.testing.assert_allclose(preints[p].delta_R, rot[p].T @ rot[p + 1], atol=1e-9)
    gyro = [seq.traj.angular_velocity(tk).ravel() for tk in t]
    blocks = est.build_inertial_blocks(state, preints, gyro, NOISE, bias_prior=ImuBias())
    assert {b.kind for b in blocks} == {"delta_v", "ang_vel", "bias_g", "bias_a"}
    for b in blocks:
        assert np.abs(b.residual).max() < 1e-6, b.kind


def test_bias_residual_zero_at_seed(rng):
    state = random_state(rng, 2)
    for b in est.bias_blocks(state.bias, state, NOISE):
        np.testing.assert_array_equal(b.residual, 0.0)


def test_missing_preintegration_gives_visual_only_pair(rng):
    state = random_state(rng, 3)
    blocks = est.build_inertial_blocks(state, [random_preint(rng), None], [None] * 3, NOISE)
    assert [b.kind for b in blocks] == ["delta_v"]


def test_information_matrices_psd(rng):
    state = random_state(rng, 3)
    problem = est.WindowProblem([random_system(rng), random_system(rng)],
                                [random_preint(rng), random_preint(rng)],
                                [rng.normal(size=3)] * 3, NOISE, 10.0, ImuBias())
    for b in est.linearize(state, problem):
        np.testing.assert_allclose(b.information, b.information.T)
        assert np.linalg.eigvalsh(b.information).min() >= 0
        assert b.jacobian.shape[1] == state.dim


# ------------------------------------------------------ marginalization

def test_schur_scalar_toy():
    H_star, b_star, reg = est.schur_complement(np.array([[2.0, 1.0], [1.0, 2.0]]), np.zeros(2), 1)
    assert H_star[0, 0] == pytest.approx(1.5)
    assert not reg


def test_schur_decoupled_blocks(rng):
    A = rng.normal(size=(6, 6))
    B = rng.normal(size=(4, 4))
    H = np.zeros((10, 10))
    H[:6, :6] = A @ A.T + np.eye(6)
    H[6:, 6:] = B @ B.T
    H_star, _, _ = est.schur_complement(H, np.zeros(10), 6)
    np.testing.assert_array_equal(H_star, H[6:, 6:])


def test_schur_singular_block_is_regularized():
    H = np.zeros((8, 8))
    H[6:, 6:] = np.eye(2)
    _, _, reg = est.schur_complement(H, np.zeros(8), 6)
    assert reg


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_schur_matches_joint_linear_solve(seed):
    rng = np.random.default_rng(seed)
    n_alpha, n_beta = 6, int(rng.integers(2, 14))
    J = rng.normal(size=(40, n_alpha + n_beta))
    r = rng.normal(size=40)
    H, g = J.T @ J, -J.T @ r
    full = np.linalg.solve(H, -g)
    H_star, b_star, _ = est.schur_complement(H, g, n_alpha)
    kept = np.linalg.solve(H_star, -b_star)
    np.testing.assert_allclose(kept, full[n_alpha:], atol=1e-9 * max(1, np.abs(full).max()))


def test_prior_zero_at_linearization_point(rng):
    state = random_state(rng, 3)
    H = rng.normal(size=(26, 26))
    prior = est.MarginalPrior(H @ H.T, np.zeros(26), state.copy(), state.times[0])
    assert est.prior_cost(prior, state) == 0.0
    np.testing.assert_array_equal(est.prior_block(prior, state).residual, 0.0)


def test_prior_jacobian(rng):
    xb = random_state(rng, 2)
    state = random_state(rng, 3)
    state.gravity = xb.gravity.rotated(so3_exp([0.1, -0.2, 0.05]))
    prior = est.MarginalPrior(np.eye(20), np.zeros(20), xb, 0.0)
    J_num = numeric_jacobian(lambda s: est.prior_block(prior, s).residual, state)
    np.testing.assert_allclose(est.prior_block(prior, state).jacobian, J_num, atol=1e-6)


def _prior(rng, state):
    H = rng.normal(size=(state.dim, state.dim))
    return est.MarginalPrior(H @ H.T, rng.normal(size=state.dim), state.copy(), state.times[0])


def test_slide_reference_identity(rng):
    state = random_state(rng, 3)
    prior = _prior(rng, state)
    out, p2 = est.slide_reference(state, prior, np.eye(3))
    np.testing.assert_allclose(out.gravity.vector, state.gravity.vector, atol=1e-12)
    np.testing.assert_allclose(out.twists, state.twists)
    np.testing.assert_allclose(p2.H_star, prior.H_star, atol=1e-9)


def test_slide_reference_yaw_permutes_gravity():
    g = np.array([300.0, -500.0, 0.0])
    g *= GRAVITY_MAGNITUDE / np.linalg.norm(g)
    state = est.WindowState([0, 0.1], np.zeros((2, 6)), GravityDir(g), ImuBias())
    Rz = so3_exp([0, 0, np.pi / 2])
    out, _ = est.slide_reference(state, None, Rz)
    # components in the yawed frame: x' = y, y' = -x
    np.testing.assert_allclose(out.gravity.vector, [g[1], -g[0], g[2]], atol=1e-9)


def test_slide_reference_preserves_spectrum(rng):
    state = random_state(rng, 3)
    prior = _prior(rng, state)
    _, p2 = est.slide_reference(state, prior, so3_exp(rng.normal(size=3)))
    np.testing.assert_allclose(np.linalg.eigvalsh(p2.H_star), np.linalg.eigvalsh(prior.H_star),
                               rtol=1e-9, atol=1e-9 * np.abs(prior.H_star).max())
    np.testing.assert_allclose(np.linalg.norm(p2.b_star), np.linalg.norm(prior.b_star))


def test_slide_reference_keeps_prior_cost(rng):
    state = random_state(rng, 3)
    prior = _prior(rng, state)
    moved = state.retract(rng.normal(0, 0.05, state.dim))
    R = so3_exp(rng.normal(size=3))
    out, p2 = est.slide_reference(moved, prior, R)
    assert est.prior_cost(p2, out) == pytest.approx(est.prior_cost(prior, moved), rel=1e-6)


# ---------------------------------------------------------------- solve

def test_single_static_pair_without_imu():
    K = sim.default_intrinsics()
    f = sim.render_depth(sim.default_scene(), sim.desk_camera(), [0, 0, 120], K)
    w = est.SlidingWindowEstimator(2)
    w.add_frame(0.0)
    w.add_frame(1 / 30, assemble(f, DepthFrame(1 / 30, f.depth, K)))
    np.testing.assert_allclose(w.solve().state.twists, 0.0, atol=1e-9)


def test_solve_requires_visual_term(rng):
    state = random_state(rng, 2)
    with pytest.raises(ValueError):
        est.solve(state, est.WindowProblem([None], [random_preint(rng)], [None, None], NOISE))


def _noiseless_window(seed, K):
    seq = sim.simulate_sequence(4, seed=seed, K=K, depth_noise=0, gyro_density=0,
                                accel_density=0, bias=ImuBias())
    w = est.SlidingWindowEstimator(3, NOISE, visual_sigma=10.0)
    fr = seq.frames
    for l in range(1, 4):
        t = fr[l].timestamp
        visual = pre = None
        if l > 1:
            visual = estimate_pair(fr[l - 1], fr[l]).system
            pre = preintegrate(interval_samples(seq.imu, fr[l - 1].timestamp, t), ImuBias(),
                               NOISE, t_end=t)
        w.add_frame(t, visual, pre, gyro_at(seq.imu, t))
    return seq, w.solve()


@pytest.mark.parametrize("seed", range(6))
def test_noiseless_three_frame_window(seed):
    K = Intrinsics(240, 240, 159.5, 119.5, 320, 240)
    seq, res = _noiseless_window(seed, K)
    st_ = res.state
    truth = seq.traj.body_velocity(st_.times).reshape(-1, 6)
    rel = np.linalg.norm(st_.twists[:, :3] - truth[:, :3], axis=1) / np.linalg.norm(truth[:, :3], axis=1)
    assert rel.max() < 0.01
    g_true = seq.traj.rotation(st_.times[0]).T @ sim.WORLD_GRAVITY
    cos = g_true @ st_.gravity.vector / GRAVITY_MAGNITUDE**2
    assert np.arccos(min(cos, 1.0)) < 0.01


def test_cost_monotone_and_gravity_norm():
    _, res = _noiseless_window(1, sim.default_intrinsics())
    costs = [c for c, _ in res.history]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    np.testing.assert_allclose([g for _, g in res.history], GRAVITY_MAGNITUDE, rtol=1e-12)
    assert res.converged


def test_sliding_window_marginalization_runs():
    seq = sim.simulate_sequence(6, seed=4)
    w = est.SlidingWindowEstimator(3, NOISE, marginalize=True, visual_sigma=10.0)
    fr = seq.frames
    for l in range(6):
        t = fr[l].timestamp
        visual = pre = None
        if l:
            visual = estimate_pair(fr[l - 1], fr[l]).system
            pre = preintegrate(interval_samples(seq.imu, fr[l - 1].timestamp, t), ImuBias(),
                               NOISE, t_end=t)
        w.add_frame(t, visual, pre, gyro_at(seq.imu, t))
        if l >= 1:
            w.solve()
    assert w.n_frames == 3 and w.dim == 26
    assert w.problem.prior is not None and w.problem.prior.n_frames == 2
    H = w.problem.prior.H_star
    np.testing.assert_allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > -1e-9 * np.abs(H).max()
    res = w.last_result
    truth = seq.traj.body_velocity(res.state.times).reshape(-1, 6)
    assert np.abs(res.state.twists - truth)[:, :3].max() < 3.0


def test_initial_twists_average_neighbours():
    out = est.initial_twists([[1.0] * 6, [3.0] * 6])
    np.testing.assert_allclose(out[:, 0], [1, 2, 3])
