"""Gaussian RBF terms, sums and Gaussian-mixture transition kernels.

Every basis function is a normalized Gaussian density

    phi(x, mu, Sigma) = (2 pi)^{-n/2} |Sigma|^{-1/2} exp(-1/2 (x-mu)^T Sigma^{-1} (x-mu)),

so a weighted sum integrates to the sum of its weights and products of two
terms are again proportional to a term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))
# exponents below this contribute exactly zero
EXP_FLOOR = -700.0


def _as_cov(S, n: int | None = None) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("covariance must be square")
    if n is not None and S.shape[0] != n:
        raise ValueError(f"covariance has size {S.shape[0]}, expected {n}")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(S))):
        raise ValueError("covariance is not symmetric")
    return 0.5 * (S + S.T)


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None


def log_gauss(x: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log phi(x, mu, L L^T) for x of shape (..., n)."""
    n = mu.shape[-1]
    d = np.asarray(x, dtype=float) - mu
    sol = solve_triangular(chol, d.reshape(-1, n).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (n * LOG_2PI + logdet) - 0.5 * np.sum(sol * sol, axis=0)
    return out.reshape(d.shape[:-1]) if d.ndim > 1 else out[0]


def gauss(x, mu, cov) -> float:
    """phi(x, mu, cov) for a single point."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    L = _cholesky(_as_cov(cov, mu.size))
    e = log_gauss(np.atleast_1d(np.asarray(x, dtype=float)), mu, L)
    return float(np.exp(e)) if e >= EXP_FLOOR else 0.0


@dataclass(frozen=True)
class RbfTerm:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        S = _as_cov(self.cov, mu.size)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", S)
        object.__setattr__(self, "chol", _cholesky(S))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def peak(self) -> float:
        """Value of the term at its mean."""
        return self.weight * float(np.exp(-0.5 * (self.dim * LOG_2PI + self.logdet)))

    def __call__(self, x) -> np.ndarray | float:
        e = log_gauss(x, self.mean, self.chol)
        v = self.weight * np.where(e >= EXP_FLOOR, np.exp(np.maximum(e, EXP_FLOOR)), 0.0)
        return float(v) if np.ndim(v) == 0 else v


class RbfSum:
    """Weighted sum of Gaussian RBF terms over R^n.

    Args:
        weights: shape (M,).
        means: shape (M, n).
        covs: shape (M, n, n), each symmetric positive definite.
        nonneg: when set, negative weights are rejected at construction.
    """

    def __init__(self, weights, means, covs, *, nonneg: bool = False):
        w = np.atleast_1d(np.asarray(weights, dtype=float)).copy()
        M = w.size
        mu = np.asarray(means, dtype=float).reshape(M, -1).copy()
        n = mu.shape[1]
        S = np.asarray(covs, dtype=float)
        if S.ndim <= 1 and n == 1:
            S = S.reshape(-1, 1, 1)
        if S.shape == (n, n):
            S = np.broadcast_to(S, (M, n, n))
        if S.shape[0] == 1 and M > 1:
            S = np.broadcast_to(S, (M, n, n))
        if w.size < 1:
            raise ValueError("an RBF sum needs at least one term")
        if w.shape != (M,) or S.shape != (M, n, n):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {S.shape}")
        if nonneg and np.any(w < 0):
            raise ValueError("negative weight in a sum flagged nonnegative")
        self.weights = w
        self.means = mu
        self.covs = np.stack([_as_cov(s, n) for s in S])
        self.chols = np.stack([_cholesky(s) for s in self.covs])
        self.logdets = 2.0 * np.sum(np.log(np.diagonal(self.chols, axis1=1, axis2=2)), axis=1)
        self.nonneg = bool(nonneg)
        self._linv = np.linalg.inv(self.chols)
        for a in (self.weights, self.means, self.covs, self.chols, self.logdets, self._linv):
            a.setflags(write=False)

    @classmethod
    def from_terms(cls, terms: Sequence[RbfTerm], *, nonneg: bool = False) -> "RbfSum":
        return cls([t.weight for t in terms], np.stack([t.mean for t in terms]),
                   np.stack([t.cov for t in terms]), nonneg=nonneg)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    def __len__(self) -> int:
        return self.size

    def terms(self) -> Iterator[RbfTerm]:
        for w, mu, S in zip(self.weights, self.means, self.covs):
            yield RbfTerm(w, mu, S)

    def term(self, i: int) -> RbfTerm:
        return RbfTerm(self.weights[i], self.means[i], self.covs[i])

    def log_terms(self, x) -> np.ndarray:
        """log phi_i(x) for every term; shape (..., M)."""
        X = np.asarray(x, dtype=float)
        if X.shape[-1] != self.dim:
            raise ValueError(f"point dimension {X.shape[-1]} does not match {self.dim}")
        d = X[..., None, :] - self.means                           # (..., M, n)
        z = np.einsum("mij,...mj->...mi", self._linv, d)
        return -0.5 * (self.dim * LOG_2PI + self.logdets) - 0.5 * np.sum(z * z, axis=-1)

    def evaluate(self, x) -> np.ndarray | float:
        e = self.log_terms(x)
        vals = np.where(e >= EXP_FLOOR, np.exp(np.maximum(e, EXP_FLOOR)), 0.0)
        out = vals @ self.weights
        return float(out) if np.ndim(out) == 0 else out

    __call__ = evaluate

    def integral(self) -> float:
        """Lebesgue integral over R^n; each term integrates to its weight."""
        return float(np.sum(self.weights))

    def scaled(self, factor: float) -> "RbfSum":
        return RbfSum(self.weights * factor, self.means, self.covs, nonneg=self.nonneg and factor >= 0)

    def __repr__(self) -> str:
        return f"RbfSum(n={self.dim}, M={self.size}, sum_w={self.integral():.6g})"


def integral_lebesgue(s: RbfSum) -> float:
    return s.integral()


def evaluate(s: RbfSum, x) -> np.ndarray | float:
    return s.evaluate(x)


def product_factorization(a: RbfTerm, b: RbfTerm) -> tuple[float, RbfTerm]:
    """Write ``phi_a(x) phi_b(x) = scale * phi_merged(x)`` for unit-weight terms.

    ``scale = phi(mu_a, mu_b, Sigma_a + Sigma_b)``; the merged covariance is
    ``(Sigma_a^{-1} + Sigma_b^{-1})^{-1}`` and its mean the precision-weighted
    average of the two means.
    """
    if a.dim != b.dim:
        raise ValueError("terms have different dimensions")
    scale = gauss(a.mean, b.mean, a.cov + b.cov)
    Pa = np.linalg.inv(a.cov)
    Pb = np.linalg.inv(b.cov)
    S = np.linalg.inv(Pa + Pb)
    S = 0.5 * (S + S.T)
    mu = S @ (Pa @ a.mean + Pb @ b.mean)
    return scale, RbfTerm(1.0, mu, S)


def _check_density(d: RbfSum) -> None:
    if np.any(d.weights < 0) or abs(d.integral() - 1.0) > 1e-12:
        raise ValueError("density weights must be nonnegative and sum to one")


def expected_value(g: RbfSum, density: RbfSum) -> float:
    """E[g(y)] for y distributed with the Gaussian-mixture ``density``."""
    _check_density(density)
    if g.dim != density.dim:
        raise ValueError("dimension mismatch")
    total = 0.0
    for wj, mj, Sj in zip(density.weights, density.means, density.covs):
        merged = RbfSum(g.weights, g.means, g.covs + Sj)
        total += wj * merged.evaluate(mj)
    return float(total)


@dataclass(frozen=True)
class KernelComponent:
    weight: float
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    cov: np.ndarray


class TransitionKernel:
    """Gaussian-mixture transition density with state-input-affine means.

    ``q(y | x, u) = sum_j wbar_j phi(y, A_j x + B_j u + c_j, Sigma_j)``.
    """

    def __init__(self, components: Sequence[KernelComponent]):
        comps = list(components)
        if not comps:
            raise ValueError("kernel needs at least one component")
        n, m = np.atleast_2d(comps[0].B).shape
        fixed = []
        for comp in comps:
            A = np.atleast_2d(np.asarray(comp.A, dtype=float))
            B = np.atleast_2d(np.asarray(comp.B, dtype=float))
            c = np.atleast_1d(np.asarray(comp.c, dtype=float))
            S = _as_cov(comp.cov, n)
            _cholesky(S)
            if A.shape != (n, n) or B.shape != (n, m) or c.shape != (n,):
                raise ValueError("kernel component shapes are inconsistent")
            if comp.weight < 0:
                raise ValueError("mixture weights must be nonnegative")
            fixed.append(KernelComponent(float(comp.weight), A, B, c, S))
        total = sum(c.weight for c in fixed)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total}, expected 1")
        self.components = tuple(fixed)
        self.n = n
        self.m = m

    @classmethod
    def linear(cls, A, B, cov, c=None) -> "TransitionKernel":
        """Single component ``x+ = A x + B u + c + w``, ``w ~ N(0, cov)``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        n = A.shape[0]
        if B.shape[0] != n:
            B = B.T if B.shape[1] == n else B
        c = np.zeros(n) if c is None else c
        return cls([KernelComponent(1.0, A, B, c, cov)])

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def single(self) -> KernelComponent:
        if self.n_components != 1:
            raise ValueError("operation requires a single-component kernel")
        return self.components[0]

    def density(self, x, u) -> RbfSum:
        """The next-state density at a fixed (x, u) as an RbfSum."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return RbfSum([c.weight for c in self.components],
                      np.stack([c.A @ x + c.B @ u + c.c for c in self.components]),
                      np.stack([c.cov for c in self.components]))

    def mean(self, x, u) -> np.ndarray:
        return sum(c.weight * (c.A @ x + c.B @ u + c.c) for c in self.components)


class AffineRbfSum:
    """``h(x, u) = sum_k w_k phi(A_k x + B_k u + c_k, mu_k, S_k)``.

    This is what an RBF sum becomes after taking its expectation under the
    kernel; each tuple pairs one value term with one mixture component.
    """

    def __init__(self, weights, means, covs, A, B, c):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.c = np.asarray(c, dtype=float)
        K, n = self.means.shape
        self.n, self.m = n, self.B.shape[2]
        self.precisions = np.linalg.inv(self.covs)
        self.precisions = 0.5 * (self.precisions + np.swapaxes(self.precisions, 1, 2))
        self.logdets = np.linalg.slogdet(self.covs)[1]

    @property
    def size(self) -> int:
        return self.weights.size

    def __len__(self) -> int:
        return self.size

    def tuples(self) -> list[tuple]:
        return [(float(w), mu, S, (A, B, c)) for w, mu, S, A, B, c in
                zip(self.weights, self.means, self.covs, self.A, self.B, self.c)]

    @classmethod
    def from_sum(cls, s: RbfSum) -> "AffineRbfSum":
        """Identity argument map: h(x) = s(x), with an empty control block."""
        M, n = s.size, s.dim
        return cls(s.weights, s.means, s.covs, np.broadcast_to(np.eye(n), (M, n, n)),
                   np.zeros((M, n, 0)), np.zeros((M, n)))

    def _residuals(self, x, u):
        # r_k = A_k x + B_k u + c_k - mu_k, shape (..., K, n)
        return (np.einsum("kij,...j->...ki", self.A, x)
                + np.einsum("kij,...j->...ki", self.B, u) + self.c - self.means)

    def log_terms(self, x, u) -> np.ndarray:
        r = self._residuals(np.asarray(x, float), np.asarray(u, float))
        q = np.einsum("...ki,kij,...kj->...k", r, self.precisions, r)
        return -0.5 * (self.n * LOG_2PI + self.logdets) - 0.5 * q

    def evaluate(self, x, u=None) -> np.ndarray | float:
        if u is None:
            u = np.zeros(np.shape(x)[:-1] + (self.m,))
        e = self.log_terms(x, u)
        vals = np.where(e >= EXP_FLOOR, np.exp(np.maximum(e, EXP_FLOOR)), 0.0)
        out = vals @ self.weights
        return float(out) if np.ndim(out) == 0 else out

    __call__ = evaluate

    def value_grad_hess_u(self, x, u):
        """Value, gradient and Hessian in u; batched over leading axes of (x, u).

        With ``L_k = S_k^{-1}`` and ``r_k`` the residual, the gradient is
        ``-sum w_k phi_k B_k^T L_k r_k`` and the Hessian
        ``sum w_k phi_k (B_k^T L_k r_k r_k^T L_k B_k - B_k^T L_k B_k)``.
        """
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        r = self._residuals(x, u)
        e = -0.5 * (self.n * LOG_2PI + self.logdets) - 0.5 * np.einsum(
            "...ki,kij,...kj->...k", r, self.precisions, r)
        wphi = self.weights * np.where(e >= EXP_FLOOR, np.exp(np.maximum(e, EXP_FLOOR)), 0.0)
        BtL = np.einsum("kji,kjl->kil", self.B, self.precisions)          # (K, m, n)
        v = np.einsum("kil,...kl->...ki", BtL, r)                          # B^T L r
        BtLB = np.einsum("kil,klj->kij", BtL, self.B)                      # (K, m, m)
        value = wphi.sum(axis=-1)
        grad = -np.einsum("...k,...ki->...i", wphi, v)
        hess = (np.einsum("...k,...ki,...kj->...ij", wphi, v, v)
                - np.einsum("...k,kij->...ij", wphi, BtLB))
        return value, grad, hess


def pushforward_params(g: RbfSum, kernel: TransitionKernel) -> AffineRbfSum:
    """Parameters of ``h(x, u) = E[g(x+) | x, u]`` as an affine-argument RBF sum.

    Term ``(i, j)`` (value term i, mixture component j; i varies slowest) has
    weight ``w_i wbar_j``, mean ``mu_i``, covariance ``Sigma_i + Sigma_j`` and
    argument map ``(A_j, B_j, c_j)``.
    """
    if g.dim != kernel.n:
        raise ValueError("value function and kernel dimensions differ")
    W, MU, S, A, B, C = [], [], [], [], [], []
    for w, mu, Si in zip(g.weights, g.means, g.covs):
        for comp in kernel.components:
            W.append(w * comp.weight)
            MU.append(mu)
            S.append(Si + comp.cov)
            A.append(comp.A)
            B.append(comp.B)
            C.append(comp.c)
    return AffineRbfSum(W, MU, S, A, B, C)


def grad_hess_u(g: RbfSum, kernel: TransitionKernel, x, u):
    """Value, gradient and Hessian of ``u -> E[g(x+) | x, u]`` at a single (x, u)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.size != kernel.n or u.size != kernel.m:
        raise ValueError("dimension mismatch")
    v, gr, H = pushforward_params(g, kernel).value_grad_hess_u(x, u)
    return float(v), gr, H


# ---------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class ConstantValue:
    """Constant value-function bound (recursion fallback)."""

    def __init__(self, value: float, dim: int):
        self.value = float(value)
        self.dim = int(dim)

    def evaluate(self, x) -> np.ndarray | float:
        X = np.asarray(x, float)
        if X.ndim == 1:
            return self.value
        return np.full(X.shape[:-1], self.value)

    __call__ = evaluate

    def integral(self) -> float:
        return float("inf")

    def __repr__(self) -> str:
        return f"ConstantValue({self.value:.6g}, dim={self.dim})"


def dumps(s: RbfSum | ConstantValue) -> str:
    """Text encoding; see README ("Value-function files")."""
    if isinstance(s, ConstantValue):
        return f"{s.dim} const {_fmt(s.value)}\n"
    lines = [f"{s.dim} {s.size}"]
    for w, mu, S in zip(s.weights, s.means, s.covs):
        lines.append(" ".join(_fmt(v) for v in [w, *mu, *S.ravel()]))
    return "\n".join(lines) + "\n"


def loads(text: str) -> RbfSum | ConstantValue:
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise ValueError("empty value file")
    head = rows[0]
    if len(head) == 3 and head[1] == "const":
        return ConstantValue(float(head[2]), int(head[0]))
    if len(head) != 2:
        raise ValueError("malformed header")
    n, M = int(head[0]), int(head[1])
    if len(rows) != M + 1:
        raise ValueError(f"expected {M} term rows, found {len(rows) - 1}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape != (M, 1 + n + n * n):
        raise ValueError("term rows have the wrong length")
    return RbfSum(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:].reshape(M, n, n))


def save(s: RbfSum | ConstantValue, path: str | Path) -> None:
    Path(path).write_text(dumps(s))


def load(path: str | Path) -> RbfSum | ConstantValue:
    return loads(Path(path).read_text())
