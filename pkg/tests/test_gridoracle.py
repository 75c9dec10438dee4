import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from rbfreach import gridoracle as go
from rbfreach.evaluation import benchmark_problem


def _band(x, sd, r=0.1):
    """P(|x + w| <= r) for w ~ N(0, sd^2)."""
    return norm.cdf((r - x) / sd) - norm.cdf((-r - x) / sd)


def test_one_step_without_control_authority_matches_normal_cdf():
    p = benchmark_problem(1, 1, B=np.zeros((1, 1)), horizon=1)
    V = go.dp_recursion(p, go.GridConfig(state_counts=80, control_counts=25))
    nodes = V[0].grid.nodes[:, 0]
    inK = np.abs(nodes) <= 0.1
    ref = np.where(inK, 1.0, _band(nodes, np.sqrt(0.001)))
    np.testing.assert_allclose(V[0].values, ref, atol=1e-4)


def test_one_step_with_control_matches_best_shift():
    # the best control moves the mean as close to the origin as |u| <= 0.1 allows
    p = benchmark_problem(1, 1, horizon=1)
    V = go.dp_recursion(p, go.GridConfig(state_counts=80, control_counts=25))
    nodes = V[0].grid.nodes[:, 0]
    shifted = np.sign(nodes) * np.maximum(np.abs(nodes) - 0.1, 0.0)
    ref = np.where(np.abs(nodes) <= 0.1, 1.0, _band(shifted, np.sqrt(0.001)))
    np.testing.assert_allclose(V[0].values, ref, atol=1e-4)


def test_horizon_monotonicity():
    p = benchmark_problem(1, 1)
    V = go.dp_recursion(p, go.GridConfig(state_counts=80, control_counts=25))
    assert len(V) == 6 and [v.k for v in V] == list(range(6))
    for a, b in zip(V[:-1], V[1:]):
        assert np.all(a.values >= b.values - 0.01)
    assert np.all((V[0].values >= 0) & (V[0].values <= 1))


def test_exact_expectation_against_quadrature():
    p = benchmark_problem(1, 1, horizon=2)
    V = go.dp_recursion(p, go.GridConfig(state_counts=40, control_counts=9))
    ext = go.ValueExtension(V[1], p.target, p.safe)
    ex = go.Exact1d(ext)
    sd = np.sqrt(0.001)
    for m in (-0.5, -0.12, 0.0, 0.3, 0.95):
        f = lambda y: ext(np.array([[y]]))[0] * norm.pdf(y, m, sd)
        ref, _ = integrate.quad(f, -1.0, 1.0, points=[-0.1, 0.1], limit=500, epsabs=1e-12)
        assert ex(np.array([m]), sd)[0] == pytest.approx(ref, abs=1e-8)


def test_lattice_quadrature_agrees_with_exact_in_1d():
    p = benchmark_problem(1, 1, horizon=3)
    exact = go.dp_recursion(p, go.GridConfig(state_counts=60, control_counts=9, quadrature="exact1d"))
    lattice = go.dp_recursion(p, go.GridConfig(state_counts=60, control_counts=9, quadrature="lattice",
                                               refine=8))
    np.testing.assert_allclose(lattice[0].values, exact[0].values, atol=0.02)


def test_two_dimensional_grid_runs_and_is_bounded():
    p = benchmark_problem(2, 2, horizon=2)
    V = go.dp_recursion(p, go.GridConfig(state_counts=15, control_counts=5))
    assert V[0].values.shape == (225,)
    assert np.all((V[0].values >= 0) & (V[0].values <= 1))
    assert np.all(V[0].values >= V[1].values - 0.01)


def test_node_cap():
    p = benchmark_problem(1, 1)
    with pytest.raises(go.GridCapError):
        go.dp_recursion(p, go.GridConfig(state_counts=80, control_counts=25, max_nodes=1000))


def test_csv_round_trip(tmp_path):
    p = benchmark_problem(1, 1, horizon=1)
    V = go.dp_recursion(p, go.GridConfig(state_counts=20, control_counts=5))
    go.write_csv(V[0], tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "x0,value"
    nodes, vals = go.read_csv(tmp_path / "g.csv")
    np.testing.assert_array_equal(nodes, V[0].grid.nodes)
    np.testing.assert_array_equal(vals, V[0].values)


def test_first_argmax_prefers_lowest_index():
    v = np.array([[0.5, 1.0, 1.0], [1.0, 1.0 - 1e-13, 0.2], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(go.first_argmax(v), [1, 0, 0])
    np.testing.assert_array_equal(go.first_argmax(np.array([[1.0 - 1e-13, 1.0]]), 0.0), [1])


def test_grid_policy_points_towards_target():
    p = benchmark_problem(1, 1, horizon=2)
    V = go.dp_recursion(p, go.GridConfig(state_counts=80, control_counts=25))
    pol = go.GridPolicy(p, V, go.GridConfig(state_counts=80, control_counts=25))
    u = pol(0, np.array([[0.5], [-0.5]]))
    np.testing.assert_allclose(u[:, 0], [-0.1, 0.1])
    assert go.grid_policy(V[1], p, np.array([0.5]))[0] == pytest.approx(-0.1)


def test_grid_validation():
    with pytest.raises(ValueError):
        go.Grid(np.array([0.0]), np.array([-1.0]), (10,))
