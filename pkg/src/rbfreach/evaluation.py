"""Monte-Carlo reach-avoid evaluation, the LQG baseline and controller comparisons.

Controllers are callables ``(k, X) -> U`` acting on a batch of states at
time ``k``. Noise is drawn up front from a stream keyed by the initial-state
index, so two controllers started from the same state see exactly the same
noise sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import QuadraticSet, as_ellipsoid, ellipsoid
from .policy import project_ellipsoid
from .rbf import TransitionKernel
from .seeding import derive_rng

log = logging.getLogger(__name__)

Controller = Callable[[int, np.ndarray], np.ndarray]


class Exit(IntEnum):
    REACHED_K = 0
    LEFT_SAFE = 1
    HORIZON = 2


@dataclass
class TrajectoryOutcome:
    success: bool
    hitting_time: int | None
    reason: Exit
    path: np.ndarray | None = None


@dataclass
class Outcomes:
    """Batched outcomes: ``hit[i] = -1`` when trajectory i never reached K."""

    success: np.ndarray
    hit: np.ndarray
    reason: np.ndarray


# ---------------------------------------------------------------------------
# sampling and rollouts

def draw_noise(rng: np.random.Generator, shape: tuple, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard normals ``shape + (n,)`` and mixture uniforms ``shape``."""
    return rng.standard_normal(shape + (n,)), rng.random(shape)


def _step(kernel: TransitionKernel, X, U, normals, uniforms):
    comps = kernel.components
    if len(comps) == 1:
        c = comps[0]
        return X @ c.A.T + U @ c.B.T + c.c + normals @ np.linalg.cholesky(c.cov).T
    cum = np.cumsum([c.weight for c in comps])
    j = np.minimum(np.searchsorted(cum, uniforms * cum[-1], side="right"), len(comps) - 1)
    out = np.empty_like(X)
    for idx, c in enumerate(comps):
        sel = j == idx
        if np.any(sel):
            out[sel] = (X[sel] @ c.A.T + U[sel] @ c.B.T + c.c
                        + normals[sel] @ np.linalg.cholesky(c.cov).T)
    return out


def sample_next(kernel: TransitionKernel, x, u, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x+`` from the kernel; batched over leading axes of ``x`` and ``u``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    U = np.atleast_2d(np.asarray(u, dtype=float))
    rows = max(len(X), len(U))
    X = np.broadcast_to(X, (rows, kernel.n))
    U = np.broadcast_to(U, (rows, kernel.m))
    normals, uniforms = draw_noise(rng, (len(X),), kernel.n)
    out = _step(kernel, X, U, normals, uniforms)
    return out[0] if np.ndim(x) == 1 else out


def simulate(problem, controller: Controller, X0: np.ndarray, normals: np.ndarray,
             uniforms: np.ndarray, keep_paths: bool = False):
    """Run trajectories from ``X0`` with pre-drawn noise ``normals[i, t]``.

    Trajectory i succeeds at the first ``t <= T`` with ``x_t`` in K, provided
    every earlier state stayed in ``K' \\ K``.
    """
    X = np.array(X0, dtype=float, copy=True)
    N = len(X)
    T = problem.horizon
    success = np.zeros(N, dtype=bool)
    hit = np.full(N, -1, dtype=int)
    reason = np.full(N, Exit.HORIZON, dtype=np.int8)
    alive = np.ones(N, dtype=bool)
    paths = np.full((N, T + 1, X.shape[1]), np.nan) if keep_paths else None
    for t in range(T + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        Xa = X[idx]
        if keep_paths:
            paths[idx, t] = Xa
        inK = problem.target.contains(Xa)
        out = ~inK & ~problem.safe.contains(Xa)
        success[idx[inK]] = True
        hit[idx[inK]] = t
        reason[idx[inK]] = Exit.REACHED_K
        reason[idx[out]] = Exit.LEFT_SAFE
        alive[idx[inK | out]] = False
        if t == T:
            break
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        U = np.atleast_2d(controller(t, X[idx]))
        X[idx] = _step(problem.kernel, X[idx], U, normals[idx, t], uniforms[idx, t])
    res = Outcomes(success, hit, reason)
    return (res, paths) if keep_paths else res


def rollout(problem, controller: Controller, x0, rng: np.random.Generator,
            keep_path: bool = False) -> TrajectoryOutcome:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    normals, uniforms = draw_noise(rng, (1, problem.horizon), problem.n)
    res, paths = simulate(problem, controller, x0[None], normals, uniforms, keep_paths=True)
    h = int(res.hit[0])
    return TrajectoryOutcome(bool(res.success[0]), h if h >= 0 else None, Exit(res.reason[0]),
                             paths[0] if keep_path else None)


def empirical_success(problem, controller: Controller, x0, n_traj: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """Success fraction over ``n_traj`` rollouts and its binomial standard error."""
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    normals, uniforms = draw_noise(rng, (n_traj, problem.horizon), problem.n)
    res = simulate(problem, controller, np.repeat(x0[None], n_traj, axis=0), normals, uniforms)
    p = float(np.mean(res.success))
    return p, float(np.sqrt(p * (1.0 - p) / n_traj))


# ---------------------------------------------------------------------------
# LQG baseline

def lqg_gains(A, B, Q, R, T: int) -> list[np.ndarray]:
    """Finite-horizon gains ``K_0..K_{T-1}`` (``u_k = -K_k x_k``) from ``P_T = Q``.

    Raises:
        np.linalg.LinAlgError: if ``R + B^T P B`` is singular or badly conditioned.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    gains = [None] * T
    for k in range(T - 1, -1, -1):
        S = R + B.T @ P @ B
        if np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError("R + B^T P B is ill-conditioned")
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains[k] = K
    return gains


def lqg_weights(problem) -> tuple[np.ndarray, np.ndarray]:
    """``Q = Q_t / rho_t^2`` and ``R = Q_u / rho_u^2`` from the target and control ellipsoids."""
    Qt, rt = as_ellipsoid(problem.target)
    Qu, ru = as_ellipsoid(problem.control)
    return Qt / rt**2, Qu / ru**2


class LqgController:
    """``u = project(-K_k x)`` onto the control ellipsoid."""

    def __init__(self, problem, gains: list[np.ndarray]):
        self.gains = gains
        self.Q, self.rho = as_ellipsoid(problem.control)

    def __call__(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return project_ellipsoid(-X @ self.gains[k].T, self.Q, self.rho)


def lqg_controller(problem, gains=None) -> LqgController:
    if gains is None:
        c = problem.kernel.single
        Q, R = lqg_weights(problem)
        gains = lqg_gains(c.A, c.B, Q, R, problem.horizon)
    return LqgController(problem, gains)


# ---------------------------------------------------------------------------
# benchmark systems

@dataclass
class BenchmarkSystem:
    A: np.ndarray
    B: np.ndarray
    cov: np.ndarray
    seed: int | None
    spectral_radius: float
    controllability_rank: int


def controllability_rank(A, B, tol: float = 1e-8) -> int:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    C = np.hstack(blocks)
    sv = np.linalg.svd(C, compute_uv=False)
    return int(np.sum(sv > tol * max(1.0, sv[0])))


def random_stable_system(n: int, m: int, rng: np.random.Generator, *, radius: float = 0.9,
                         noise: float = 0.001, attempts: int = 100,
                         seed: int | None = None) -> BenchmarkSystem:
    """Gaussian ``A, B`` with ``A`` rescaled to spectral radius ``radius``; resampled until controllable.

    Raises:
        RuntimeError: if no controllable pair is found within ``attempts`` draws.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    for _ in range(attempts):
        A = rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        sr = float(np.max(np.abs(np.linalg.eigvals(A))))
        if sr == 0.0:
            continue
        A = A * (radius / sr)
        rank = controllability_rank(A, B)
        if rank == n:
            return BenchmarkSystem(A, B, noise * np.eye(n), seed,
                                   float(np.max(np.abs(np.linalg.eigvals(A)))), rank)
    raise RuntimeError(f"no controllable system found in {attempts} attempts")


def benchmark_matrices(n: int, m: int, pattern: str = "identity", noise: float = 0.001):
    """Fixed benchmark ``(A, B, Sigma)``.

    ``identity``: ``A = I``, ``B = eye(n, m)``, ``Sigma = noise I``.
    ``ones``: all-ones ``A`` and ``B``, ``Sigma = noise (11^T + 1e-6 I)`` (the
    ridge keeps the covariance invertible).
    """
    if pattern == "identity":
        return np.eye(n), np.eye(n, m), noise * np.eye(n)
    if pattern == "ones":
        return np.ones((n, n)), np.ones((n, m)), noise * (np.ones((n, n)) + 1e-6 * np.eye(n))
    raise ValueError(f"unknown benchmark pattern {pattern!r}")


def benchmark_problem(n: int, m: int, *, A=None, B=None, cov=None, horizon: int = 5,
                      rho_s: float = 1.0, rho_t: float = 0.1, rho_u: float = 0.1,
                      pattern: str = "identity", noise: float = 0.001):
    """Reach-avoid problem with ball-shaped K, K' and U around the origin."""
    from .bound import ReachAvoidProblem
    A0, B0, S0 = benchmark_matrices(n, m, pattern, noise)
    A = A0 if A is None else np.asarray(A, dtype=float)
    B = B0 if B is None else np.asarray(B, dtype=float)
    cov = S0 if cov is None else np.asarray(cov, dtype=float)
    return ReachAvoidProblem(ellipsoid(np.eye(n), rho_t), ellipsoid(np.eye(n), rho_s),
                             ellipsoid(np.eye(m), rho_u),
                             TransitionKernel.linear(A, B, cov), horizon)


# ---------------------------------------------------------------------------
# comparisons

@dataclass
class ComparisonReport:
    label_a: str
    label_b: str
    initial_states: np.ndarray
    rate_a: np.ndarray
    rate_b: np.ndarray
    n_traj: int
    candidates: int
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def diff(self) -> np.ndarray:
        return self.rate_a - self.rate_b

    @property
    def mean_diff(self) -> float:
        return float(np.mean(self.diff)) if self.diff.size else float("nan")

    @property
    def diff_se(self) -> float:
        d = self.diff
        return float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else float("nan")

    @property
    def se_a(self) -> np.ndarray:
        return np.sqrt(self.rate_a * (1 - self.rate_a) / self.n_traj)

    @property
    def se_b(self) -> np.ndarray:
        return np.sqrt(self.rate_b * (1 - self.rate_b) / self.n_traj)

    def summary(self) -> dict:
        return {"controller_a": self.label_a, "controller_b": self.label_b,
                "initial_states": len(self.rate_a), "candidates": self.candidates,
                "trajectories": self.n_traj, "mean_a": float(np.mean(self.rate_a)),
                "mean_b": float(np.mean(self.rate_b)), "mean_diff": self.mean_diff,
                "diff_se": self.diff_se, "seed": self.seed, **self.config}

    def write_csv(self, path: str | Path) -> None:
        n = self.initial_states.shape[1]
        head = ["index"] + [f"x{a}" for a in range(n)] + [
            f"rate_{self.label_a}", f"se_{self.label_a}", f"rate_{self.label_b}",
            f"se_{self.label_b}", "diff"]
        rows = [",".join(head)]
        for i, x in enumerate(self.initial_states):
            vals = [*x, self.rate_a[i], self.se_a[i], self.rate_b[i], self.se_b[i], self.diff[i]]
            rows.append(",".join([str(i)] + [format(float(v), ".17g") for v in vals]))
        Path(path).write_text("\n".join(rows) + "\n")


def compare(problem, controller_a: Controller, controller_b: Controller, n_init: int,
            n_traj: int, reject_threshold: float, seed: int, *, label_a: str = "a",
            label_b: str = "b", max_candidates: int | None = None,
            batch: int | None = None) -> ComparisonReport:
    """Paired Monte-Carlo comparison of two controllers from ring initial states.

    Candidates are drawn uniformly from ``K' \\ K``; controller B (the
    baseline) is run first and candidates whose success rate is below
    ``reject_threshold`` are dropped. Controller A is then run on the kept
    states with the same noise arrays.

    Raises:
        RuntimeError: if fewer than ``n_init`` states survive ``max_candidates`` draws.
    """
    if n_init < 1 or n_traj < 1:
        raise ValueError("n_init and n_traj must be positive")
    T, n = problem.horizon, problem.n
    max_candidates = max_candidates or 100 * n_init
    batch = batch or n_init
    ring = problem.ring
    state_rng = derive_rng(seed, "initial-states")
    kept_x, kept_b, kept_idx = [], [], []
    drawn = 0
    while len(kept_x) < n_init and drawn < max_candidates:
        nb = min(batch, max_candidates - drawn)
        X0 = ring.sample(nb, state_rng)
        noise = [draw_noise(derive_rng(seed, "noise", drawn + i), (n_traj, T), n)
                 for i in range(nb)]
        normals = np.concatenate([z[0] for z in noise])
        uniforms = np.concatenate([z[1] for z in noise])
        res = simulate(problem, controller_b, np.repeat(X0, n_traj, axis=0), normals, uniforms)
        rates = res.success.reshape(nb, n_traj).mean(axis=1)
        for i in range(nb):
            if rates[i] >= reject_threshold and len(kept_x) < n_init:
                kept_x.append(X0[i])
                kept_b.append(rates[i])
                kept_idx.append(drawn + i)
        drawn += nb
    if len(kept_x) < n_init:
        raise RuntimeError(f"only {len(kept_x)} of {n_init} initial states passed the "
                           f"rejection threshold {reject_threshold} in {drawn} candidates")
    X0 = np.array(kept_x)
    noise = [draw_noise(derive_rng(seed, "noise", i), (n_traj, T), n) for i in kept_idx]
    normals = np.concatenate([z[0] for z in noise])
    uniforms = np.concatenate([z[1] for z in noise])
    res = simulate(problem, controller_a, np.repeat(X0, n_traj, axis=0), normals, uniforms)
    rate_a = res.success.reshape(n_init, n_traj).mean(axis=1)
    return ComparisonReport(label_a, label_b, X0, rate_a, np.array(kept_b), n_traj, drawn, seed,
                            {"reject_threshold": reject_threshold})


def write_slice(path: str | Path, points: np.ndarray, columns: dict) -> None:
    """CSV of ``points`` followed by one column per named value array."""
    points = np.atleast_2d(points)
    names = list(columns)
    head = [f"x{a}" for a in range(points.shape[1])] + names
    data = np.column_stack([points] + [np.asarray(columns[k], dtype=float) for k in names])
    rows = [",".join(head)] + [",".join(format(float(v), ".17g") for v in r) for r in data]
    Path(path).write_text("\n".join(rows) + "\n")
