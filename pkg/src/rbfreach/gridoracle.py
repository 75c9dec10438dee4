"""Grid dynamic programming for the reach-avoid recursion.

``V_T = 1_K`` on the state nodes and, for ``k < T``,

    V_k(x) = max_u  E[ V_{k+1}^ext(y) | x, u ],

where ``V^ext`` is 1 on K, an interpolant of the node values on the ring
``K' \\ K`` and 0 outside K'. The interpolant only uses ring nodes: nodes in
K or outside K' are masked out of each multilinear stencil, so the jump of the
value function across the boundary of K is not smeared over a grid cell.

The expectation is computed in two ways:

* ``n == 1``: ``V^ext`` is piecewise linear between the nodes and the set
  boundaries, so each piece is integrated against the Gaussian in closed form.
* ``n >= 2``: ``V^ext`` is sampled on a refined lattice and correlated with the
  noise cell masses, giving ``W(m) = E[V^ext(m + w)]`` on a lattice of means;
  ``W`` is then interpolated at ``A x + B u + c``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage, signal
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtr

from .geometry import QuadraticSet

if TYPE_CHECKING:  # pragma: no cover
    from .bound import ReachAvoidProblem

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)


class GridCapError(RuntimeError):
    """Raised when a grid exceeds the configured node budget."""


@dataclass(frozen=True)
class Grid:
    """Tensor grid with ``counts[a]`` equispaced points on ``[lower[a], upper[a]]``.

    Nodes are ordered lexicographically with the last axis varying fastest.
    """

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) == 1 and lo.size > 1:
            counts = counts * lo.size
        if not (lo.shape == hi.shape and lo.size == len(counts)):
            raise ValueError("grid bounds and counts must have matching lengths")
        if min(counts) < 2:
            raise ValueError("each axis needs at least 2 points")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("grid bounds must be finite with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def cube(cls, radius: float, count: int, dim: int) -> "Grid":
        return cls(np.full(dim, -radius), np.full(dim, radius), (count,) * dim)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.counts) - 1)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, u, c) for l, u, c in zip(self.lower, self.upper, self.counts)]

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)


@dataclass
class GridValueFunction:
    """Node values of ``V_k`` on a state grid."""

    k: int
    grid: Grid
    values: np.ndarray               # flat, node order of ``grid.nodes``
    interpolation: str = "linear"

    def table(self) -> np.ndarray:
        return self.values.reshape(self.grid.counts)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Plain interpolation of the node table (no set masking), 0 off the grid."""
        method = "nearest" if self.interpolation == "nearest" else "linear"
        f = RegularGridInterpolator(self.grid.axes, self.table(), method=method,
                                    bounds_error=False, fill_value=0.0)
        return f(np.atleast_2d(points))


@dataclass
class GridConfig:
    state_counts: int | tuple = 80
    control_counts: int | tuple = 25
    interpolation: str = "linear"    # or "nearest"
    quadrature: str = "auto"         # "exact1d", "lattice" or "auto"
    refine: int = 4                  # lattice cells per grid cell and axis (n >= 2)
    max_nodes: int = 2_000_000       # cap on state nodes x control nodes
    chunk: int = 4096                # state nodes per vectorized batch


def state_grid(problem: "ReachAvoidProblem", counts) -> Grid:
    lo, hi = problem.safe.bounding_box()
    return Grid(lo, hi, counts)


def control_grid(U: QuadraticSet, counts) -> tuple[Grid, np.ndarray]:
    """Grid on U's bounding box and the nodes that lie in U (node order kept)."""
    lo, hi = U.bounding_box()
    g = Grid(lo, hi, counts)
    nodes = g.nodes
    return g, nodes[U.contains(nodes)]


# ---------------------------------------------------------------------------
# value extension and expectation

class ValueExtension:
    """``V^ext`` for a node table: 1 on K, masked multilinear on the ring, 0 outside K'."""

    def __init__(self, vf: GridValueFunction, target: QuadraticSet, safe: QuadraticSet):
        self.vf = vf
        self.target = target
        self.safe = safe
        nodes = vf.grid.nodes
        self.mask = safe.contains(nodes) & ~target.contains(nodes)

    def ring_interp(self, y: np.ndarray) -> np.ndarray:
        g = self.vf.grid
        n = g.dim
        table = self.vf.table()
        mask = self.mask.reshape(g.counts)
        t = (y - g.lower) / g.spacing
        hi_idx = np.array(g.counts) - 2
        i0 = np.clip(np.floor(t).astype(int), 0, hi_idx)
        frac = np.clip(t - i0, 0.0, 1.0)
        if self.vf.interpolation == "nearest":
            idx = np.clip(np.rint(t).astype(int), 0, hi_idx + 1)
            return table[tuple(idx.T)]
        num = np.zeros(len(y))
        den = np.zeros(len(y))
        plain = np.zeros(len(y))
        for corner in range(2 ** n):
            bits = np.array([(corner >> (n - 1 - a)) & 1 for a in range(n)])
            w = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
            idx = tuple((i0 + bits).T)
            v = table[idx]
            mk = mask[idx]
            num += w * v * mk
            den += w * mk
            plain += w * v
        out = plain.copy()
        ok = den > 1e-14
        out[ok] = num[ok] / den[ok]
        return out

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        inK = self.target.contains(y)
        inKp = self.safe.contains(y)
        out = np.zeros(len(y))
        out[inK] = 1.0
        ring = inKp & ~inK
        if np.any(ring):
            out[ring] = np.clip(self.ring_interp(y[ring]), 0.0, 1.0)
        return out


def _roots_1d(s: QuadraticSet) -> list[float]:
    out = []
    for M in s.matrices:
        a, b, c = M[0, 0], M[0, 1], M[1, 1]
        if abs(a) < 1e-300:
            if abs(b) > 0:
                out.append(-c / (2 * b))
            continue
        disc = b * b - a * c
        if disc >= 0:
            r = math.sqrt(disc)
            out += [(-b - r) / a, (-b + r) / a]
    return out


class Exact1d:
    """Closed-form ``E[V^ext(m + w)]`` for a piecewise-linear ``V^ext`` on R."""

    def __init__(self, ext: ValueExtension):
        g = ext.vf.grid
        lo, hi = ext.safe.bounding_box()
        pts = list(g.axes[0]) + _roots_1d(ext.target) + _roots_1d(ext.safe) + [lo[0], hi[0]]
        pts = np.unique(np.clip(np.array(pts), lo[0], hi[0]))
        left, right = pts[:-1], pts[1:]
        keep = right - left > 1e-15
        y1 = left + (right - left) / 3.0
        y2 = left + 2.0 * (right - left) / 3.0
        v1 = ext(y1[:, None])
        v2 = ext(y2[:, None])
        beta = np.where(keep, (v2 - v1) / np.where(keep, y2 - y1, 1.0), 0.0)
        alpha = np.where(keep, v1 - beta * y1, 0.0)
        self.alpha, self.beta, self.pts = alpha, beta, pts
        # telescoped coefficients: each breakpoint enters two adjacent segments
        self.d_alpha = np.diff(alpha, prepend=0.0, append=0.0)
        self.d_beta = np.diff(beta, prepend=0.0, append=0.0)

    def __call__(self, means: np.ndarray, sd: float) -> np.ndarray:
        m = np.asarray(means, dtype=float).reshape(-1, 1)
        z = (self.pts - m) / sd
        cdf = ndtr(z)
        pdf = np.exp(-0.5 * z * z) / SQRT_2PI
        # sum_s (alpha_s + beta_s m)(F_{s+1} - F_s) + sd beta_s (f_s - f_{s+1})
        total = -(cdf @ self.d_alpha) - m[:, 0] * (cdf @ self.d_beta) + sd * (pdf @ self.d_beta)
        return np.clip(total, 0.0, 1.0)


class LatticeExpectation:
    """``W(m) = E[V^ext(m + w)]`` on a lattice of means, by discrete correlation."""

    def __init__(self, ext: ValueExtension, cov: np.ndarray, mean_lo: np.ndarray,
                 mean_hi: np.ndarray, refine: int):
        g = ext.vf.grid
        n = g.dim
        lo, hi = g.lower, g.upper
        h = g.spacing / refine
        F = (np.array(g.counts) - 1) * refine
        centers = [lo[a] + (np.arange(F[a]) + 0.5) * h[a] for a in range(n)]
        mesh = np.meshgrid(*centers, indexing="ij")
        vals = ext(np.stack([m.ravel() for m in mesh], axis=1)).reshape(tuple(F))
        sd = np.sqrt(np.diag(cov))
        D = np.ceil(8.0 * sd / h).astype(int) + 1
        pad = np.maximum(np.ceil(np.maximum(lo - mean_lo, mean_hi - hi) / h).astype(int), 0) + D + 1
        vals = np.pad(vals, [(p, p) for p in pad])
        diag = np.allclose(cov, np.diag(np.diag(cov)), rtol=0, atol=1e-15 * np.max(np.abs(cov)))
        if diag:
            for a in range(n):
                d = np.arange(-D[a], D[a] + 1)
                k = ndtr((d + 0.5) * h[a] / sd[a]) - ndtr((d - 0.5) * h[a] / sd[a])
                vals = ndimage.correlate1d(vals, k, axis=a, mode="constant", cval=0.0)
            W = vals
        else:
            offs = np.meshgrid(*[np.arange(-D[a], D[a] + 1) * h[a] for a in range(n)], indexing="ij")
            P = np.stack([o.ravel() for o in offs], axis=1)
            L = np.linalg.cholesky(cov)
            z = np.linalg.solve(L, P.T)
            k = np.exp(-0.5 * np.sum(z * z, axis=0)).reshape(offs[0].shape)
            k /= k.sum()
            # correlation = convolution with the flipped kernel
            W = signal.fftconvolve(vals, k[(slice(None, None, -1),) * n], mode="same")
        self.axes = [lo[a] + (np.arange(-pad[a], F[a] + pad[a]) + 0.5) * h[a] for a in range(n)]
        self.interp = RegularGridInterpolator(self.axes, np.clip(W, 0.0, 1.0), method="linear",
                                              bounds_error=False, fill_value=0.0)

    def __call__(self, means: np.ndarray) -> np.ndarray:
        return self.interp(means)


def _mean_range(problem, grid: Grid, U: QuadraticSet):
    ulo, uhi = U.bounding_box()
    out = []
    for comp in problem.kernel.components:
        A, B, c = comp.A, comp.B, comp.c
        lo = c + np.minimum(A * grid.lower, A * grid.upper).sum(1) \
            + np.minimum(B * ulo, B * uhi).sum(1)
        hi = c + np.maximum(A * grid.lower, A * grid.upper).sum(1) \
            + np.maximum(B * ulo, B * uhi).sum(1)
        out.append((lo, hi))
    return out


class StepExpectation:
    """``E[V^ext_{k+1}(y) | x, u]`` for batches of states and controls."""

    def __init__(self, problem, vf: GridValueFunction, cfg: GridConfig):
        self.problem = problem
        self.chunk = cfg.chunk
        self.ext = ValueExtension(vf, problem.target, problem.safe)
        n = vf.grid.dim
        mode = cfg.quadrature
        if mode == "auto":
            mode = "exact1d" if n == 1 else "lattice"
        if mode == "exact1d" and n != 1:
            raise ValueError("exact quadrature is only available for n = 1")
        self.mode = mode
        comps = problem.kernel.components
        if mode == "exact1d":
            self.exact = Exact1d(self.ext)
            self.sds = [float(np.sqrt(cp.cov[0, 0])) for cp in comps]
        else:
            ranges = _mean_range(problem, vf.grid, problem.control)
            self.lattices = [LatticeExpectation(self.ext, cp.cov, lo, hi, cfg.refine)
                             for cp, (lo, hi) in zip(comps, ranges)]

    def __call__(self, X: np.ndarray, Uc: np.ndarray) -> np.ndarray:
        """Matrix of expectations, shape ``(len(X), len(Uc))``."""
        X = np.atleast_2d(X)
        Uc = np.atleast_2d(Uc)
        out = np.zeros((len(X), len(Uc)))
        per = max(1, self.chunk // len(Uc))
        for s in range(0, len(X), per):
            xb = X[s:s + per]
            for j, cp in enumerate(self.problem.kernel.components):
                means = (xb @ cp.A.T + cp.c)[:, None, :] + (Uc @ cp.B.T)[None, :, :]
                flat = means.reshape(-1, means.shape[-1])
                if self.mode == "exact1d":
                    vals = self.exact(flat[:, 0], self.sds[j])
                else:
                    vals = self.lattices[j](flat)
                out[s:s + per] += cp.weight * vals.reshape(len(xb), len(Uc))
        return np.clip(out, 0.0, 1.0)


def first_argmax(values: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Row-wise argmax returning the lowest index within ``tie_tol`` of the max."""
    best = np.max(values, axis=1, keepdims=True)
    return np.argmax(values >= best - tie_tol, axis=1)


# ---------------------------------------------------------------------------
# public API

def dp_recursion(problem: "ReachAvoidProblem", cfg: GridConfig | None = None,
                 grid: Grid | None = None) -> list[GridValueFunction]:
    """Backward recursion on the grid; returns ``[V_0, ..., V_T]``.

    Raises:
        GridCapError: if state nodes times control nodes exceeds ``cfg.max_nodes``.
    """
    cfg = cfg or GridConfig()
    grid = grid or state_grid(problem, cfg.state_counts)
    _, unodes = control_grid(problem.control, cfg.control_counts)
    if len(unodes) == 0:
        raise ValueError("no control grid node lies in U")
    if grid.size * len(unodes) > cfg.max_nodes:
        raise GridCapError(f"{grid.size} state nodes x {len(unodes)} control nodes exceeds "
                           f"the cap of {cfg.max_nodes}")
    nodes = grid.nodes
    inK = problem.target.contains(nodes)
    ring = problem.safe.contains(nodes) & ~inK
    V = GridValueFunction(problem.horizon, grid, inK.astype(float), cfg.interpolation)
    out = [V]
    ring_idx = np.flatnonzero(ring)
    for k in range(problem.horizon - 1, -1, -1):
        E = StepExpectation(problem, V, cfg)
        vals = inK.astype(float)
        for s in range(0, len(ring_idx), cfg.chunk):
            idx = ring_idx[s:s + cfg.chunk]
            vals[idx] = np.max(E(nodes[idx], unodes), axis=1)
        V = GridValueFunction(k, grid, np.clip(vals, 0.0, 1.0), cfg.interpolation)
        out.append(V)
        log.debug("grid step k=%d done", k)
    return out[::-1]


class GridPolicy:
    """Greedy controller against a grid value table: ``argmax_u E[V^ext_{k+1}]``."""

    def __init__(self, problem: "ReachAvoidProblem", values: list[GridValueFunction],
                 cfg: GridConfig | None = None):
        self.problem = problem
        self.cfg = cfg or GridConfig()
        self.values = values
        self.unodes = control_grid(problem.control, self.cfg.control_counts)[1]
        self._steps: dict[int, StepExpectation] = {}

    def expectation(self, k: int) -> StepExpectation:
        if k not in self._steps:
            self._steps[k] = StepExpectation(self.problem, self.values[k + 1], self.cfg)
        return self._steps[k]

    def __call__(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        grid = self.values[0].grid
        Xc = grid.clamp(X)
        if np.any(Xc != X):
            log.warning("state outside the grid hull; clamped to the nearest boundary point")
        E = self.expectation(k)(Xc, self.unodes)
        return self.unodes[first_argmax(E)]


def grid_policy(V_next: GridValueFunction, problem: "ReachAvoidProblem", x: np.ndarray,
                cfg: GridConfig | None = None) -> np.ndarray:
    """Control node maximizing the one-step expectation of ``V_next`` at ``x``."""
    cfg = cfg or GridConfig()
    unodes = control_grid(problem.control, cfg.control_counts)[1]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xc = V_next.grid.clamp(x)
    if np.any(xc != x):
        log.warning("state outside the grid hull; clamped to the nearest boundary point")
    E = StepExpectation(problem, V_next, cfg)(xc, unodes)
    u = unodes[first_argmax(E)]
    return u[0] if u.shape[0] == 1 else u


def write_csv(vf: GridValueFunction, path: str | Path) -> None:
    """One row per node: coordinates then value, 17 significant digits."""
    nodes = vf.grid.nodes
    n = vf.grid.dim
    header = ",".join([f"x{a}" for a in range(n)] + ["value"])
    rows = [",".join(f"{v:.17g}" for v in (*p, val)) for p, val in zip(nodes, vf.values)]
    Path(path).write_text(header + "\n" + "\n".join(rows) + "\n")


def read_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]
