import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from rbfreach import rbf
from rbfreach.rbf import (AffineRbfSum, ConstantValue, KernelComponent, RbfSum, RbfTerm,
                          TransitionKernel, expected_value, grad_hess_u, product_factorization,
                          pushforward_params)


def _random_sum(rng, M, n, positive=True):
    w = rng.uniform(0.2, 2.0, M) if positive else rng.standard_normal(M)
    covs = []
    for _ in range(M):
        A = rng.standard_normal((n, n))
        covs.append(0.1 * (A @ A.T) + 0.05 * np.eye(n))
    return RbfSum(w, rng.standard_normal((M, n)), np.stack(covs))


def test_single_term_value_against_mpmath():
    mpmath.mp.dps = 40
    s = RbfSum([2.5], [[0.3]], [[[0.04]]])
    for x in (0.3, 0.1, -0.5, 1.2):
        ref = 2.5 * mpmath.npdf(mpmath.mpf(x), mpmath.mpf(0.3), mpmath.sqrt(mpmath.mpf(0.04)))
        assert s(np.array([x])) == pytest.approx(float(ref), rel=1e-13)


def test_multivariate_value_against_scipy():
    rng = np.random.default_rng(1)
    s = _random_sum(rng, 4, 3)
    x = rng.standard_normal((50, 3))
    ref = sum(w * stats.multivariate_normal(m, S).pdf(x)
              for w, m, S in zip(s.weights, s.means, s.covs))
    np.testing.assert_allclose(s(x), ref, rtol=1e-12)


def test_integral_is_sum_of_weights():
    s = RbfSum([0.5, 1.5], [[0.0], [1.0]], [[[0.1]], [[0.3]]])
    val, _ = integrate.quad(lambda x: s(np.array([x])), -10, 10, limit=200)
    assert val == pytest.approx(2.0, rel=1e-10)
    assert s.integral() == 2.0


def test_far_tail_underflows_to_zero():
    s = RbfSum([1.0], [[0.0]], [[[1e-4]]])
    assert s(np.array([100.0])) == 0.0


def test_product_factorization_against_pointwise_product():
    rng = np.random.default_rng(2)
    a = RbfTerm(1.0, rng.standard_normal(2), np.diag([0.2, 0.5]))
    b = RbfTerm(1.0, rng.standard_normal(2), np.array([[0.3, 0.1], [0.1, 0.4]]))
    scale, merged = product_factorization(a, b)
    x = rng.standard_normal((20, 2))
    pa = stats.multivariate_normal(a.mean, a.cov).pdf(x)
    pb = stats.multivariate_normal(b.mean, b.cov).pdf(x)
    pm = stats.multivariate_normal(merged.mean, merged.cov).pdf(x)
    np.testing.assert_allclose(pa * pb, scale * pm, rtol=1e-12)


def test_expected_value_against_quadrature_1d():
    rng = np.random.default_rng(3)
    g = _random_sum(rng, 3, 1, positive=False)
    dens = RbfSum([0.3, 0.7], rng.standard_normal((2, 1)), [[[0.2]], [[0.05]]])
    f = lambda y: g(np.array([y])) * dens(np.array([y]))
    ref, _ = integrate.quad(f, -20, 20, limit=400, epsabs=1e-14, epsrel=1e-12)
    assert expected_value(g, dens) == pytest.approx(ref, rel=1e-8)


def test_expected_value_rejects_non_density():
    g = RbfSum([1.0], [[0.0]], [[[1.0]]])
    with pytest.raises(ValueError):
        expected_value(g, RbfSum([0.5], [[0.0]], [[[1.0]]]))


def test_pushforward_matches_expected_value():
    rng = np.random.default_rng(4)
    g = _random_sum(rng, 3, 2)
    comps = [KernelComponent(0.4, rng.standard_normal((2, 2)), rng.standard_normal((2, 1)),
                             rng.standard_normal(2), 0.1 * np.eye(2)),
             KernelComponent(0.6, rng.standard_normal((2, 2)), rng.standard_normal((2, 1)),
                             np.zeros(2), np.diag([0.2, 0.05]))]
    K = TransitionKernel(comps)
    h = pushforward_params(g, K)
    assert h.size == 6
    for _ in range(5):
        x, u = rng.standard_normal(2), rng.standard_normal(1)
        assert h.evaluate(x, u) == pytest.approx(expected_value(g, K.density(x, u)), rel=1e-12)


def test_gradient_and_hessian_against_finite_differences():
    rng = np.random.default_rng(5)
    g = _random_sum(rng, 4, 2)
    K = TransitionKernel.linear(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)),
                                0.2 * np.eye(2))
    x, u = rng.standard_normal(2), 0.3 * rng.standard_normal(2)
    v, gr, H = grad_hess_u(g, K, x, u)
    h = pushforward_params(g, K)
    eps = 1e-5
    fd_g = np.array([(h.evaluate(x, u + eps * e) - h.evaluate(x, u - eps * e)) / (2 * eps)
                     for e in np.eye(2)])
    np.testing.assert_allclose(gr, fd_g, rtol=1e-6, atol=1e-10)
    fd_H = np.array([(grad_hess_u(g, K, x, u + eps * e)[1] - grad_hess_u(g, K, x, u - eps * e)[1])
                     / (2 * eps) for e in np.eye(2)])
    np.testing.assert_allclose(H, fd_H, rtol=1e-5, atol=1e-9)
    assert np.allclose(H, H.T)


def test_batched_value_grad_hess_matches_single():
    rng = np.random.default_rng(6)
    g = _random_sum(rng, 3, 1)
    K = TransitionKernel.linear(np.eye(1), np.eye(1), 0.01 * np.eye(1))
    h = pushforward_params(g, K)
    X = rng.standard_normal((4, 1))
    U = rng.standard_normal((4, 1))
    v, gr, H = h.value_grad_hess_u(X, U)
    for i in range(4):
        v1, g1, H1 = h.value_grad_hess_u(X[i], U[i])
        assert v[i] == pytest.approx(v1, rel=1e-14)
        np.testing.assert_allclose(gr[i], g1, rtol=1e-13)
        np.testing.assert_allclose(H[i], H1, rtol=1e-13)


def test_affine_from_sum_is_identity_map():
    rng = np.random.default_rng(7)
    s = _random_sum(rng, 3, 2)
    a = AffineRbfSum.from_sum(s)
    x = rng.standard_normal((10, 2))
    np.testing.assert_allclose(a.evaluate(x), s(x), rtol=1e-13)


def test_kernel_validation():
    with pytest.raises(ValueError):
        TransitionKernel([KernelComponent(0.5, np.eye(1), np.eye(1), np.zeros(1), np.eye(1))])
    with pytest.raises(ValueError):
        TransitionKernel.linear(np.eye(2), np.ones((2, 1)), -np.eye(2))


def test_rbf_sum_validation():
    with pytest.raises(ValueError):
        RbfSum([1.0, -1.0], [[0.0], [1.0]], [[[1.0]], [[1.0]]], nonneg=True)
    with pytest.raises(ValueError):
        RbfSum([1.0], [[0.0]], [[[-1.0]]])
    with pytest.raises(ValueError):
        RbfSum([1.0], [[0.0]], [[[1.0]]])(np.zeros(2))


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    s = _random_sum(rng, 3, 2)
    path = tmp_path / "v.txt"
    rbf.save(s, path)
    t = rbf.load(path)
    np.testing.assert_array_equal(t.weights, s.weights)
    np.testing.assert_array_equal(t.means, s.means)
    np.testing.assert_array_equal(t.covs, s.covs)
    c = rbf.loads(rbf.dumps(ConstantValue(1.25, 3)))
    assert isinstance(c, ConstantValue) and c.value == 1.25 and c.dim == 3


def test_loads_rejects_truncated_file():
    text = rbf.dumps(RbfSum([1.0, 2.0], [[0.0], [1.0]], [[[1.0]], [[1.0]]]))
    with pytest.raises(ValueError):
        rbf.loads("\n".join(text.splitlines()[:-1]))
