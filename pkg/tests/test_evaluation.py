import numpy as np
import pytest
from scipy.linalg import solve_discrete_are
from scipy.stats import norm

from rbfreach import evaluation as ev
from rbfreach.rbf import KernelComponent, TransitionKernel


def zero_controller(k, X):
    return np.zeros((len(np.atleast_2d(X)), 1))


def test_sample_next_moments():
    K = TransitionKernel.linear([[0.5, 0.1], [0.0, 0.9]], [[1.0], [0.5]], [[0.02, 0.01], [0.01, 0.03]],
                                c=[0.1, -0.2])
    x, u = np.array([1.0, -1.0]), np.array([0.3])
    N = 200_000
    y = ev.sample_next(K, np.repeat(x[None], N, axis=0), np.repeat(u[None], N, axis=0),
                       np.random.default_rng(0))
    mean = K.components[0].A @ x + K.components[0].B @ u + K.components[0].c
    sd = np.sqrt(np.diag(K.components[0].cov))
    assert np.all(np.abs(y.mean(axis=0) - mean) <= 4 * sd / np.sqrt(N))
    np.testing.assert_allclose(np.cov(y.T), K.components[0].cov, rtol=0.03)


def test_sample_next_small_noise_limit():
    K = TransitionKernel.linear(np.eye(1), np.eye(1), 1e-20 * np.eye(1))
    y = ev.sample_next(K, np.array([0.2]), np.array([0.05]), np.random.default_rng(1))
    assert y[0] == pytest.approx(0.25, abs=1e-9)


def test_mixture_component_frequencies():
    I = np.eye(1)
    K = TransitionKernel([KernelComponent(0.3, I, I, np.array([-10.0]), 0.01 * I),
                          KernelComponent(0.7, I, I, np.array([10.0]), 0.01 * I)])
    y = ev.sample_next(K, np.zeros((100_000, 1)), np.zeros((100_000, 1)), np.random.default_rng(2))
    frac = np.mean(y[:, 0] < 0)
    assert abs(frac - 0.3) <= 4 * np.sqrt(0.3 * 0.7 / 100_000)


def test_one_step_success_matches_normal_cdf():
    p = ev.benchmark_problem(1, 1, horizon=1)
    x0 = 0.15
    # u = -0.1 moves the mean to 0.05
    ctrl = lambda k, X: np.full((len(X), 1), -0.1)
    n = 200_000
    rate, se = ev.empirical_success(p, ctrl, [x0], n, np.random.default_rng(3))
    sd = np.sqrt(0.001)
    ref = norm.cdf((0.1 - 0.05) / sd) - norm.cdf((-0.1 - 0.05) / sd)
    assert abs(rate - ref) <= 4 * np.sqrt(ref * (1 - ref) / n)
    assert se == pytest.approx(np.sqrt(rate * (1 - rate) / n))


def test_start_in_target_succeeds_at_time_zero():
    p = ev.benchmark_problem(1, 1)
    out = ev.rollout(p, zero_controller, [0.05], np.random.default_rng(4))
    assert out.success and out.hitting_time == 0 and out.reason == ev.Exit.REACHED_K
    assert ev.empirical_success(p, zero_controller, [0.05], 500, np.random.default_rng(4))[0] == 1.0


def test_start_outside_safe_set_fails():
    p = ev.benchmark_problem(1, 1)
    out = ev.rollout(p, zero_controller, [1.5], np.random.default_rng(5))
    assert not out.success and out.hitting_time is None and out.reason == ev.Exit.LEFT_SAFE
    assert ev.empirical_success(p, zero_controller, [1.5], 500, np.random.default_rng(5))[0] == 0.0


def test_paths_stop_at_exit():
    p = ev.benchmark_problem(1, 1)
    ctrl = lambda k, X: np.full((len(X), 1), -0.1)
    out = ev.rollout(p, ctrl, [0.3], np.random.default_rng(6), keep_path=True)
    assert out.path.shape == (6, 1)
    if out.success:
        t = out.hitting_time
        assert abs(out.path[t, 0]) <= 0.1 and np.all(np.abs(out.path[:t, 0]) > 0.1)
        assert np.all(np.isnan(out.path[t + 1:]))


def test_lqg_scalar_gains_by_hand():
    # P_2 = 1, K_1 = 1/2, P_1 = 3/2, K_0 = 3/5
    gains = ev.lqg_gains(1.0, 1.0, 1.0, 1.0, 2)
    assert gains[1][0, 0] == pytest.approx(0.5)
    assert gains[0][0, 0] == pytest.approx(0.6)


def test_lqg_zero_input_matrix_gives_zero_gains():
    gains = ev.lqg_gains(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1), 4)
    assert all(np.all(K == 0) for K in gains)


def test_lqg_long_horizon_reaches_riccati_fixed_point():
    rng = np.random.default_rng(7)
    sys = ev.random_stable_system(3, 2, rng)
    Q, R = np.eye(3) * 2.0, np.eye(2) * 0.5
    K0 = ev.lqg_gains(sys.A, sys.B, Q, R, 200)[0]
    P = solve_discrete_are(sys.A, sys.B, Q, R)
    Kinf = np.linalg.solve(R + sys.B.T @ P @ sys.B, sys.B.T @ P @ sys.A)
    np.testing.assert_allclose(K0, Kinf, atol=1e-9)


def test_lqg_ill_conditioned_raises():
    with pytest.raises(np.linalg.LinAlgError):
        ev.lqg_gains(np.eye(1), np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), 2)


def test_lqg_controller_stays_in_u():
    p = ev.benchmark_problem(2, 2)
    c = ev.lqg_controller(p)
    U = c(0, np.random.default_rng(8).uniform(-1, 1, (500, 2)))
    assert np.all(p.control.contains(U))


def test_random_stable_systems():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s = ev.random_stable_system(3, 3, rng)
        assert s.spectral_radius <= 0.9 + 1e-12
        assert s.controllability_rank == 3
    a = ev.random_stable_system(3, 3, np.random.default_rng(10))
    b = ev.random_stable_system(3, 3, np.random.default_rng(10))
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.B, b.B)


def test_controllability_rank():
    assert ev.controllability_rank(np.eye(2), np.array([[1.0], [0.0]])) == 1
    assert ev.controllability_rank(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]])) == 2


def test_benchmark_patterns():
    A, B, S = ev.benchmark_matrices(3, 2, "ones")
    assert np.all(A == 1) and B.shape == (3, 2)
    assert np.all(np.linalg.eigvalsh(S) > 0)
    with pytest.raises(ValueError):
        ev.benchmark_matrices(2, 2, "bogus")


def test_self_comparison_is_exactly_zero():
    p = ev.benchmark_problem(1, 1)
    lqg = ev.lqg_controller(p)
    rep = ev.compare(p, lqg, lqg, 20, 50, 0.0, seed=11)
    assert np.all(rep.diff == 0.0)
    assert rep.mean_diff == 0.0


def test_comparison_rejection_and_determinism(tmp_path):
    p = ev.benchmark_problem(1, 1)
    lqg = ev.lqg_controller(p)
    rep = ev.compare(p, zero_controller, lqg, 10, 50, 0.5, seed=12)
    assert np.all(rep.rate_b >= 0.5) and rep.candidates >= 10
    again = ev.compare(p, zero_controller, lqg, 10, 50, 0.5, seed=12)
    np.testing.assert_array_equal(rep.initial_states, again.initial_states)
    np.testing.assert_array_equal(rep.rate_a, again.rate_a)
    rep.write_csv(tmp_path / "a.csv")
    again.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "index,x0,rate_a,se_a,rate_b,se_b,diff"


def test_comparison_too_few_states():
    p = ev.benchmark_problem(1, 1)
    with pytest.raises(RuntimeError):
        ev.compare(p, zero_controller, zero_controller, 5, 10, 1.0, seed=13, max_candidates=20)
