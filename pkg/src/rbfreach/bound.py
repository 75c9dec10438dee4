"""Backward recursion of upper bounds on the reach-avoid value function.

Starting from an RBF upper bound of the target indicator, each step solves
the per-term SDP assembled in :mod:`rbfreach.dominance` so that

    V_k(x) >= E[V_{k+1}(x+) | x, u]   on (K' \\ K) x U,
    V_k(x) >= 1                       on K,

and therefore ``min(V_k, 1)`` upper-bounds the optimal reach-avoid value. When
a step cannot be solved or certified, a constant that dominates both
constraints is used instead and carried back to time 0.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.spatial import cKDTree
from scipy.stats import norm, qmc

from . import dominance, sdp
from .geometry import QuadraticSet, product, ring
from .gridoracle import Grid
from .rbf import LOG_2PI, ConstantValue, RbfSum, TransitionKernel, pushforward_params
from .seeding import derive_rng

log = logging.getLogger(__name__)

AUDIT_TOL = 1e-9


@dataclass(frozen=True)
class ReachAvoidProblem:
    """Target K, safe set K', control set U, kernel and horizon T."""

    target: QuadraticSet
    safe: QuadraticSet
    control: QuadraticSet
    kernel: TransitionKernel
    horizon: int
    containment_samples: int = 1000

    def __post_init__(self):
        n, m = self.kernel.n, self.kernel.m
        if self.target.dim != n or self.safe.dim != n:
            raise ValueError(f"state sets must have dimension {n}")
        if self.control.dim != m:
            raise ValueError(f"control set must have dimension {m}")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        if self.containment_samples > 0:
            try:
                pts = self.target.sample(self.containment_samples, np.random.default_rng(0),
                                         max_attempts=50)
            except (RuntimeError, ValueError):
                pts = np.empty((0, n))
            if len(pts) and not np.all(self.safe.contains(pts)):
                raise ValueError("target set is not contained in the safe set")

    @property
    def n(self) -> int:
        return self.kernel.n

    @property
    def m(self) -> int:
        return self.kernel.m

    @property
    def ring(self) -> QuadraticSet:
        return ring(self.safe, self.target)

    @property
    def state_action_set(self) -> QuadraticSet:
        return product(self.ring, self.control)


@dataclass
class BoundConfig:
    M: int = 10
    indicator: str = "lp"            # "lp" or "sdp"
    sigma_b: float = 0.0005          # indicator term variance (lp)
    lp_grid: int = 80                # grid nodes per axis over K' (lp)
    lp_refine: int = 16              # constraint lattice density relative to the grid (lp)
    lp_rounds: int = 3               # doublings of lp_refine if validation fails
    weight_floor: float = 1e-9       # relative floor for zero lp weights
    max_terms: int = 1000
    audit_samples: int = 1000        # sampled constraint audit per step (0 disables)
    threads: int = 1
    seed: int = 0
    step: dominance.BoundStepConfig = field(default_factory=dominance.BoundStepConfig)


class IndicatorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# indicator bounds

def random_centers(K: QuadraticSet, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in K by rejection from its bounding box."""
    return K.sample(count, rng)


def _lattice_in(K: QuadraticSet, grid: Grid, density: int, offset: float) -> np.ndarray:
    lo, hi = K.bounding_box()
    h = grid.spacing / density
    axes = []
    for a in range(grid.dim):
        first = math.floor((lo[a] - grid.lower[a]) / h[a] - offset)
        last = math.ceil((hi[a] - grid.lower[a]) / h[a] - offset)
        ax = grid.lower[a] + (np.arange(first, last + 1) + offset) * h[a]
        axes.append(ax[(ax >= lo[a] - 1e-12) & (ax <= hi[a] + 1e-12)])
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts[K.contains(pts)]


def _sphere(n: int, count: int) -> np.ndarray:
    """Near-uniform deterministic directions on the unit sphere in R^n."""
    if n == 1:
        return np.array([[-1.0], [1.0]])
    if n == 2:
        t = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    # Halton points mapped through the inverse normal CDF, then normalized
    z = norm.ppf(qmc.Halton(n, scramble=False).random(count + 1)[1:])
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _boundary_points(K: QuadraticSet, spacing: float) -> np.ndarray:
    """Points on the ellipsoidal pieces of K's boundary, about ``spacing`` apart."""
    out = []
    n = K.dim
    for f in K.forms:
        H = -f.quadratic_part
        if np.linalg.eigvalsh(H)[0] <= 0:
            continue
        g = f.matrix[:-1, -1]
        center = np.linalg.solve(H, g)
        r2 = f.matrix[-1, -1] + g @ center
        if r2 <= 0:
            continue
        L = np.linalg.cholesky(H)
        radii = np.sqrt(r2) / np.sqrt(np.linalg.eigvalsh(H))
        area = 2.0 * np.pi * float(np.max(radii)) if n >= 2 else 0.0
        count = int(min(50_000, max(64, (area / spacing) ** (n - 1)))) if n >= 2 else 2
        dirs = _sphere(n, count)
        pts = center + np.sqrt(r2) * np.linalg.solve(L.T, dirs.T).T
        out.append(pts[K.contains(pts, tol=1e-12)])
    return np.vstack(out) if out else np.empty((0, n))


def _local_minima(pts: np.ndarray, vals: np.ndarray, limit: int = 64) -> np.ndarray:
    """Points no higher than their nearest neighbours, lowest first."""
    k = min(len(pts), 2 * pts.shape[1] + 1)
    _, nb = cKDTree(pts).query(pts, k=k)
    idx = np.flatnonzero(vals <= vals[nb].min(axis=1))
    return pts[idx[np.argsort(vals[idx])][:limit]]


def _refine_minimum(basis: RbfSum, w: np.ndarray, K: QuadraticSet, starts: np.ndarray,
                    radius: float) -> float:
    """Local minima of ``sum w phi`` over K near the given starts.

    Each start is searched in a box of half-width ``radius`` and then over
    all of K; only minimizers inside K count.
    """
    s = RbfSum(w, basis.means, basis.covs)
    f = lambda x: float(s(x))
    cons = [{"type": "ineq", "fun": (lambda x, q=q: float(q.value(x)))} for q in K.forms]
    best = np.inf
    for x0 in starts:
        box = list(zip(x0 - radius, x0 + radius))
        for res in (minimize(f, x0, method="L-BFGS-B", bounds=box),
                    minimize(f, x0, method="SLSQP", constraints=cons,
                             options={"ftol": 1e-15, "maxiter": 200})):
            if np.isfinite(res.fun) and K.contains(res.x):
                best = min(best, float(res.fun))
    return best


def indicator_bound_lp(K: QuadraticSet, centers: np.ndarray, sigma_b, grid: Grid, *,
                       refine: int = 16, rounds: int = 3, weight_floor: float = 1e-9) -> RbfSum:
    """Nonnegative weights on fixed Gaussians minimizing ``sum w`` with ``sum w phi >= 1`` on K.

    Constraints are imposed on the grid nodes in K, on a lattice ``refine``
    times denser and on points of K's ellipsoidal boundary at the same
    spacing. The result is validated on a lattice 10 times denser than the
    grid, offset by half a cell, together with boundary points; if the
    minimum there is below ``1 - 1e-6`` the constraint lattice is doubled.
    Constrained local minimization from the lowest check points then locates
    the dips in between, and the weights are rescaled so the smallest value
    found is at least 1. Zero weights are raised to ``weight_floor * max(w)``
    so every term can enter the log-weight recursion.

    Raises:
        IndicatorError: infeasible LP or failed validation.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    M, n = centers.shape
    if M == 0:
        raise IndicatorError("at least one center is required")
    cov = np.broadcast_to(np.atleast_2d(np.asarray(sigma_b, dtype=float)) * (
        np.eye(n) if np.ndim(sigma_b) == 0 else 1.0), (n, n)).copy()
    basis = RbfSum(np.ones(M), centers, np.broadcast_to(cov, (M, n, n)).copy())
    h = float(np.min(grid.spacing))
    check = np.vstack([_lattice_in(K, grid, 10, 0.5), _boundary_points(K, h / 10)])
    for r in range(rounds + 1):
        density = refine * 2 ** r
        pts = np.vstack([grid.nodes[K.contains(grid.nodes)],
                         _lattice_in(K, grid, density, 0.0), _boundary_points(K, h / density)])
        if len(pts) == 0:
            raise IndicatorError("no grid point lies in K")
        Phi = np.exp(basis.log_terms(pts))          # (P, M)
        sol = linprog(np.ones(M), A_ub=-Phi, b_ub=-np.ones(len(pts)), bounds=(0, None),
                      method="highs")
        if sol.status != 0:
            raise IndicatorError(f"indicator LP not solved: {sol.message}")
        w = np.maximum(sol.x, 0.0)
        w = np.maximum(w, weight_floor * np.max(w))
        vals = np.exp(basis.log_terms(check)) @ w if len(check) else np.ones(1)
        low = float(np.min(vals))
        if low >= 1.0 - 1e-6:
            if len(check):
                low = min(low, _refine_minimum(basis, w, K, _local_minima(check, vals), h / 10))
            if low < 1.0:
                w = w / low
            return RbfSum(w, centers, basis.covs, nonneg=True)
        log.info("indicator LP validated at %.10g; refining constraint lattice", low)
    raise IndicatorError(f"indicator LP validation failed: minimum {low:.10g} on the dense lattice")


def indicator_bound_sdp(K: QuadraticSet, M: int,
                        cfg: dominance.BoundStepConfig | None = None) -> RbfSum:
    """RBF bound of ``1_K`` from the K-blocks of the bound-step program alone.

    Raises:
        IndicatorError: if the program is not solved or not certified.
    """
    step = dominance.build_indicator_sdp(K, M, cfg)
    res = dominance.solve_step(step)
    if res.bound is None or not res.certified:
        raise IndicatorError(f"indicator SDP failed: {res.message}")
    return res.bound


# ---------------------------------------------------------------------------
# recursion

@dataclass
class StepDiagnostics:
    k: int
    status: str                      # "Indicator", "Optimal", "Inexact" or "Fallback"
    solver_statuses: list
    objective: float
    terms: int
    seconds: float
    message: str = ""
    audit_worst: float = float("nan")


@dataclass
class ValueBoundSequence:
    """``values[k]`` is the bound for time k, k = 0..T."""

    values: list
    diagnostics: list

    @property
    def horizon(self) -> int:
        return len(self.values) - 1

    @property
    def fallback_used(self) -> bool:
        return any(d.status == "Fallback" for d in self.diagnostics)

    def write(self, outdir: str | Path) -> list[Path]:
        from .rbf import save
        out = []
        for k, v in enumerate(self.values):
            p = Path(outdir) / f"value_k{k}.txt"
            save(v, p)
            out.append(p)
        return out


def constant_fallback(prev, kernel: TransitionKernel) -> ConstantValue:
    """``max(1, sup E[prev(x+) | x, u])`` from the peaks of the pushed-forward terms."""
    if isinstance(prev, ConstantValue):
        return ConstantValue(max(1.0, prev.value), kernel.n)
    aff = pushforward_params(prev, kernel)
    n = kernel.n
    peaks = aff.weights * np.exp(-0.5 * (n * LOG_2PI + aff.logdets))
    return ConstantValue(max(1.0, float(np.sum(np.maximum(peaks, 0.0)))), n)


def audit_step(V, V_next, problem: ReachAvoidProblem, samples: int,
               rng: np.random.Generator) -> tuple[float, float]:
    """Worst sampled margins of the two step constraints (negative means violated).

    The margins are relative: ``(lhs - rhs) / max(1, |rhs|)``.
    """
    if samples <= 0:
        return float("inf"), float("inf")
    S = problem.state_action_set
    z = S.sample(samples, rng)
    x, u = z[:, :problem.n], z[:, problem.n:]
    lhs = np.asarray(V(x), dtype=float)
    if isinstance(V_next, ConstantValue):
        rhs = np.full(len(x), V_next.value)
    else:
        rhs = np.asarray(pushforward_params(V_next, problem.kernel).evaluate(x, u))
    dyn = float(np.min((lhs - rhs) / np.maximum(1.0, np.abs(rhs))))
    xk = problem.target.sample(samples, rng)
    onK = float(np.min(np.asarray(V(xk), dtype=float) - 1.0))
    return dyn, onK


def bound_step(prev, problem: ReachAvoidProblem, cfg: BoundConfig | None = None,
               k: int = 0, executor=None):
    """One recursion step; returns ``(bound, diagnostics)``.

    Never raises on solver trouble: the constant fallback is returned instead.
    """
    cfg = cfg or BoundConfig()
    t0 = time.perf_counter()
    kernel = problem.kernel
    if isinstance(prev, ConstantValue):
        c = constant_fallback(prev, kernel)
        return c, StepDiagnostics(k, "Fallback", [], float("nan"), 0,
                                  time.perf_counter() - t0, "constant carried from a later step")
    size = prev.size * kernel.n_components
    if size > cfg.max_terms:
        c = constant_fallback(prev, kernel)
        msg = f"{size} terms exceed max_terms={cfg.max_terms}"
        log.warning("step %d: %s; using constant %.6g", k, msg, c.value)
        return c, StepDiagnostics(k, "Fallback", [], float("nan"), size,
                                  time.perf_counter() - t0, msg)
    step = dominance.build_bound_step(prev, kernel, problem.state_action_set,
                                      problem.target, cfg.step)
    res = dominance.solve_step(step, executor=executor)
    statuses = [s.value for s in res.statuses]
    if res.bound is None or not res.certified:
        c = constant_fallback(prev, kernel)
        log.warning("step %d: %s; using constant %.6g", k, res.message, c.value)
        return c, StepDiagnostics(k, "Fallback", statuses, float("nan"), size,
                                  time.perf_counter() - t0, res.message)
    worst = float("nan")
    if cfg.audit_samples > 0:
        dyn, onK = audit_step(res.bound, prev, problem, cfg.audit_samples,
                              derive_rng(cfg.seed, "audit", k))
        worst = min(dyn, onK)
        if worst < -AUDIT_TOL:
            c = constant_fallback(prev, kernel)
            msg = f"sampled audit found a violation of {worst:.3g}"
            log.warning("step %d: %s; using constant %.6g", k, msg, c.value)
            return c, StepDiagnostics(k, "Fallback", statuses, float("nan"), size,
                                      time.perf_counter() - t0, msg, worst)
    exact = all(s == sdp.Status.OPTIMAL.value for s in statuses)
    return res.bound, StepDiagnostics(k, "Optimal" if exact else "Inexact", statuses,
                                      res.objective, size, time.perf_counter() - t0,
                                      res.message, worst)


def build_indicator(problem: ReachAvoidProblem, cfg: BoundConfig) -> RbfSum:
    if cfg.indicator == "lp":
        grid = Grid(*problem.safe.bounding_box(), (cfg.lp_grid,) * problem.n)
        centers = random_centers(problem.target, cfg.M, derive_rng(cfg.seed, "indicator"))
        return indicator_bound_lp(problem.target, centers, cfg.sigma_b, grid,
                                  refine=cfg.lp_refine, rounds=cfg.lp_rounds,
                                  weight_floor=cfg.weight_floor)
    if cfg.indicator == "sdp":
        return indicator_bound_sdp(problem.target, cfg.M, cfg.step)
    raise ValueError(f"unknown indicator method {cfg.indicator!r}")


def run_recursion(problem: ReachAvoidProblem, cfg: BoundConfig | None = None,
                  indicator: RbfSum | None = None) -> ValueBoundSequence:
    """``V_T = indicator`` and ``V_k = bound_step(V_{k+1})`` for k = T-1..0."""
    cfg = cfg or BoundConfig()
    t0 = time.perf_counter()
    V = indicator if indicator is not None else build_indicator(problem, cfg)
    T = problem.horizon
    values = [None] * (T + 1)
    diags = [StepDiagnostics(T, "Indicator", [], float(np.sum(V.weights)), V.size,
                             time.perf_counter() - t0)]
    values[T] = V
    executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for k in range(T - 1, -1, -1):
            V, d = bound_step(V, problem, cfg, k, executor)
            values[k] = V
            diags.append(d)
            log.info("step %d: %s in %.2fs", k, d.status, d.seconds)
    finally:
        if executor is not None:
            executor.shutdown()
    return ValueBoundSequence(values, diags[::-1])


# ---------------------------------------------------------------------------
# audits

@dataclass
class StepAudit:
    k: int
    dynamics_worst: float            # relative margin, inf when not checked
    dynamics_violations: int
    target_worst: float
    target_violations: int


@dataclass
class AuditReport:
    steps: list
    samples: int
    saturated_mean: float = float("nan")
    saturated_min: float = float("nan")
    saturated_max: float = float("nan")

    @property
    def violations(self) -> int:
        return sum(s.dynamics_violations + s.target_violations for s in self.steps)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def validate_sequence(seq: ValueBoundSequence, problem: ReachAvoidProblem, samples: int,
                      rng: np.random.Generator) -> AuditReport:
    """Sampled checks of both step constraints for every k.

    Also reports statistics of ``min(V_0, 1)`` over ring samples.
    """
    if samples <= 0:
        return AuditReport([], 0)
    S = problem.state_action_set
    steps = []
    T = seq.horizon
    n = problem.n
    for k in range(T + 1):
        V = seq.values[k]
        xk = problem.target.sample(samples, rng)
        onK = np.asarray(V(xk), dtype=float) - 1.0
        dyn_worst, dyn_bad = float("inf"), 0
        if k < T:
            z = S.sample(samples, rng)
            x, u = z[:, :n], z[:, n:]
            nxt = seq.values[k + 1]
            lhs = np.asarray(V(x), dtype=float)
            if isinstance(nxt, ConstantValue):
                rhs = np.full(len(x), nxt.value)
            else:
                rhs = np.asarray(pushforward_params(nxt, problem.kernel).evaluate(x, u))
            rel = (lhs - rhs) / np.maximum(1.0, np.abs(rhs))
            dyn_worst, dyn_bad = float(np.min(rel)), int(np.sum(rel < -AUDIT_TOL))
        steps.append(StepAudit(k, dyn_worst, dyn_bad, float(np.min(onK)),
                               int(np.sum(onK < -AUDIT_TOL))))
    xr = problem.ring.sample(samples, rng)
    sat = np.minimum(np.asarray(seq.values[0](xr), dtype=float), 1.0)
    return AuditReport(steps, samples, float(np.mean(sat)), float(np.min(sat)), float(np.max(sat)))


# ---------------------------------------------------------------------------
# manifest

def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def write_manifest(path: str | Path, entries: dict) -> None:
    """``key=value`` lines in insertion order; keys under ``time.`` hold wall-clock data."""
    lines = [f"{k}={_fmt(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


def sequence_manifest(seq: ValueBoundSequence, prefix: str = "step") -> dict:
    out = {}
    for d in seq.diagnostics:
        key = f"{prefix}.{d.k}"
        out[f"{key}.status"] = d.status
        out[f"{key}.terms"] = d.terms
        out[f"{key}.objective"] = d.objective
        out[f"{key}.solver"] = ",".join(d.solver_statuses) if d.solver_statuses else "-"
        out[f"{key}.audit_worst"] = d.audit_worst
        if d.message:
            out[f"{key}.message"] = d.message
    for d in seq.diagnostics:
        out[f"time.{prefix}.{d.k}"] = d.seconds
    return out
