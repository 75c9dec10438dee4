"""Controllers that maximize the expected next-step value bound.

For a bound ``V_{k+1}`` (an RBF sum) the one-step objective

    u -> E[V_{k+1}(x+) | x, u] = sum_i w_i phi(A x + B u + c, mu_i, Sigma_i + Sigma_0)

is again an RBF sum in ``u``, with closed-form gradient and Hessian. It is
non-concave, so the Newton controller restarts from several points and keeps
the best local maximizer; the grid controller searches a tensor grid on U.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import QuadraticSet, as_ellipsoid
from .gridoracle import Grid, first_argmax
from .rbf import EXP_FLOOR, LOG_2PI, AffineRbfSum, ConstantValue, TransitionKernel, pushforward_params

log = logging.getLogger(__name__)

ARMIJO = 1e-4
N_BACKTRACK = 40


@dataclass
class PolicyConfig:
    mode: str = "newton"             # "newton" or "control-grid"
    multistart: int = 8              # random starts in addition to u = 0
    max_iter: int = 50
    grad_tol: float = 1e-8
    grid_points: int = 20            # per control dimension
    max_grid_nodes: int = 200_000
    chunk: int = 2048                # states per vectorized batch

    def __post_init__(self):
        if self.mode not in ("newton", "control-grid"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.multistart < 0 or self.max_iter < 1 or self.grid_points < 1:
            raise ValueError("policy counts must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


def project_ellipsoid(u: np.ndarray, Q: np.ndarray, rho: float) -> np.ndarray:
    """Radial scaling ``u min(1, rho / sqrt(u^T Q u))``; batched over leading axes."""
    u = np.asarray(u, dtype=float)
    r = np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", u, Q, u), 0.0))
    scale = np.where(r > rho, rho / np.where(r > 0, r, 1.0), 1.0)
    out = u * scale[..., None]
    # guard the last ulp so the result is a member of U
    r2 = np.einsum("...i,ij,...j->...", out, Q, out)
    bad = r2 > rho * rho
    if np.any(bad):
        out[bad] *= (1.0 - 4e-16)
    return out


def _objective(V_next, kernel: TransitionKernel) -> AffineRbfSum | None:
    if isinstance(V_next, ConstantValue):
        return None
    return pushforward_params(V_next, kernel)


def start_points(U: QuadraticSet, count: int, rng: np.random.Generator) -> np.ndarray:
    """``u = 0`` (when feasible) followed by ``count`` uniform samples of U.

    Raises:
        RuntimeError: if 0 is not in U and no sample could be drawn.
    """
    m = U.dim
    pts = [np.zeros((1, m))] if U.contains(np.zeros(m)) else []
    n_draw = count if pts else max(count, 1)
    if n_draw:
        pts.append(U.sample(n_draw, rng))
    if not pts:
        raise RuntimeError("no feasible start point in U")
    return np.vstack(pts)


def newton_batch(h: AffineRbfSum, Q: np.ndarray, rho: float, X: np.ndarray,
                 starts: np.ndarray, cfg: PolicyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Projected damped Newton ascent from every start for every state.

    Returns the best control per state and its objective value. Each run
    stops when the gradient norm drops to ``cfg.grad_tol`` times the objective
    value (so ``|grad log h| <= grad_tol``), when no backtracked
    step increases the objective, or after ``cfg.max_iter`` iterations.
    """
    B, S, m = len(X), len(starts), starts.shape[1]
    x = np.broadcast_to(X[:, None, :], (B, S, X.shape[1]))
    u = np.broadcast_to(starts[None], (B, S, m)).copy()
    u = project_ellipsoid(u, Q, rho)
    radius = rho / np.sqrt(np.min(np.linalg.eigvalsh(Q)))
    ts = 0.5 ** np.arange(N_BACKTRACK)
    active = np.ones((B, S), dtype=bool)
    val, g, H = h.value_grad_hess_u(x, u)
    for _ in range(cfg.max_iter):
        # relative test: far in the tails the sum is tiny but far from stationary
        active &= np.linalg.norm(g, axis=-1) > cfg.grad_tol * val
        if not np.any(active):
            break
        idx = np.nonzero(active)
        ga, Ha, ua, va = g[idx], H[idx], u[idx], val[idx]
        d = ga.copy()
        # Newton where -H is positive definite, normalized gradient otherwise
        eig = np.linalg.eigvalsh(Ha)
        newton = eig[:, -1] < 0
        if np.any(newton):
            d[newton] = -np.linalg.solve(Ha[newton], ga[newton][..., None])[..., 0]
        grad_only = ~newton
        if np.any(grad_only):
            nrm = np.linalg.norm(ga[grad_only], axis=-1, keepdims=True)
            d[grad_only] = radius * ga[grad_only] / nrm
        xa = x[idx]
        # backtracking: halve the step only for the runs still rejected
        pending = np.arange(len(ua))
        new_u = np.empty_like(ua)
        accepted = np.zeros(len(ua), dtype=bool)
        for t in ts:
            cand = project_ellipsoid(ua[pending] + t * d[pending], Q, rho)
            cval = np.atleast_1d(h.evaluate(xa[pending], cand))
            gain = np.einsum("ki,ki->k", ga[pending], cand - ua[pending])
            ok = (cval > va[pending]) & (cval >= va[pending] + ARMIJO * gain)
            new_u[pending[ok]] = cand[ok]
            accepted[pending[ok]] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
        rows = np.flatnonzero(accepted)
        stop = np.flatnonzero(~accepted)
        active[idx[0][stop], idx[1][stop]] = False
        if rows.size:
            bi, si = idx[0][rows], idx[1][rows]
            u[bi, si] = new_u[rows]
            v2, g2, H2 = h.value_grad_hess_u(x[bi, si], u[bi, si])
            val[bi, si], g[bi, si], H[bi, si] = v2, g2, H2
    best = first_argmax(val, tie_tol=0.0)
    ar = np.arange(B)
    return u[ar, best], val[ar, best]


def act_newton(V_next, kernel: TransitionKernel, U: QuadraticSet, x: np.ndarray,
               cfg: PolicyConfig | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Best local maximizer over U of the expected next value; single state or batch."""
    cfg = cfg or PolicyConfig()
    rng = rng or np.random.default_rng(0)
    Q, rho = as_ellipsoid(U)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    h = _objective(V_next, kernel)
    if h is None:
        u = np.zeros((len(X), kernel.m))
    else:
        u, _ = newton_batch(h, Q, rho, X, start_points(U, cfg.multistart, rng), cfg)
    return u[0] if np.ndim(x) == 1 else u


def control_nodes(U: QuadraticSet, points: int, cap: int = 200_000) -> np.ndarray:
    """Tensor-grid nodes on U's bounding box that lie in U, in node order.

    Raises:
        ValueError: if the grid exceeds ``cap`` nodes or no node lies in U.
    """
    lo, hi = U.bounding_box()
    if points ** U.dim > cap:
        raise ValueError(f"control grid of {points}^{U.dim} nodes exceeds the cap of {cap}")
    if points == 1:
        nodes = np.atleast_2d(0.5 * (lo + hi))
    else:
        nodes = Grid(lo, hi, (points,) * U.dim).nodes
    nodes = nodes[U.contains(nodes)]
    if len(nodes) == 0:
        raise ValueError("no control grid node lies in U")
    return nodes


def grid_batch(h: AffineRbfSum, X: np.ndarray, nodes: np.ndarray,
               chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Best control node per state.

    Each term's exponent is a quadratic in ``u``, so the (states x nodes)
    table is assembled from matrix products rather than pairwise residuals.
    """
    out_u = np.empty((len(X), nodes.shape[1]))
    out_v = np.empty(len(X))
    n = h.n
    per = max(1, (chunk * 256) // max(1, len(nodes)))
    const = -0.5 * (n * LOG_2PI + h.logdets)
    BLB = np.einsum("kia,kij,kjb->kab", h.B, h.precisions, h.B)
    uq = np.einsum("ga,kab,gb->kg", nodes, BLB, nodes)            # (K, G)
    for s in range(0, len(X), per):
        xb = X[s:s + per]
        vals = np.zeros((len(xb), len(nodes)))
        for k in range(h.size):
            r0 = xb @ h.A[k].T + h.c[k] - h.means[k]                # (S, n)
            Lr = r0 @ h.precisions[k]
            base = np.einsum("si,si->s", Lr, r0)
            lin = (Lr @ h.B[k]) @ nodes.T                            # (S, G)
            e = const[k] - 0.5 * (base[:, None] + 2.0 * lin + uq[k][None, :])
            vals += h.weights[k] * np.where(e >= EXP_FLOOR, np.exp(np.maximum(e, EXP_FLOOR)), 0.0)
        j = first_argmax(vals, tie_tol=0.0)
        out_u[s:s + per] = nodes[j]
        out_v[s:s + per] = vals[np.arange(len(xb)), j]
    return out_u, out_v


def act_grid(V_next, kernel: TransitionKernel, U: QuadraticSet, x: np.ndarray,
             cfg: PolicyConfig | None = None) -> np.ndarray:
    """Argmax of the expected next value over the control grid restricted to U."""
    cfg = cfg or PolicyConfig(mode="control-grid")
    nodes = control_nodes(U, cfg.grid_points, cfg.max_grid_nodes)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    h = _objective(V_next, kernel)
    if h is None:
        u = np.repeat(nodes[:1], len(X), axis=0)
    else:
        u, _ = grid_batch(h, X, nodes, cfg.chunk)
    return u[0] if np.ndim(x) == 1 else u


class BoundPolicy:
    """Time-varying controller ``(k, X) -> U`` from a sequence of value bounds.

    Multistart points are drawn once from ``rng`` so the controller is a pure
    function of ``(k, x)``. States outside the ring get ``u = 0`` (the
    simulator stops those trajectories before asking).
    """

    def __init__(self, values: list, problem, cfg: PolicyConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.values = values
        self.problem = problem
        self.cfg = cfg or PolicyConfig()
        rng = rng or np.random.default_rng(0)
        U = problem.control
        self.Q, self.rho = as_ellipsoid(U)
        self.objectives = [_objective(v, problem.kernel) for v in values[1:]]
        if self.cfg.mode == "newton":
            self.starts = start_points(U, self.cfg.multistart, rng)
        else:
            self.nodes = control_nodes(U, self.cfg.grid_points, self.cfg.max_grid_nodes)

    def __call__(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros((len(X), self.problem.m))
        h = self.objectives[k]
        live = self.problem.ring.contains(X)
        if h is None or not np.any(live):
            return out
        idx = np.flatnonzero(live)
        for s in range(0, len(idx), self.cfg.chunk):
            part = idx[s:s + self.cfg.chunk]
            if self.cfg.mode == "newton":
                out[part] = newton_batch(h, self.Q, self.rho, X[part], self.starts, self.cfg)[0]
            else:
                out[part] = grid_batch(h, X[part], self.nodes, self.cfg.chunk)[0]
        return out
