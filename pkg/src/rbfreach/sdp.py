"""Small dense conic programs in LMI form and a primal-dual interior-point solver.

Programs are stated as

    minimize    c^T x
    subject to  F0_k + sum_j x_j F_jk  >= 0   (PSD, per block k)
                h + G x                >= 0   (elementwise)
                e + E x                 = 0

with every x_j free. The dual is

    maximize    -sum_k <F0_k, X_k> - h^T s - e^T lam
    subject to  sum_k <F_jk, X_k> + (G^T s)_j + (E^T lam)_j = c_j,   X_k >= 0, s >= 0.

The solver eliminates equalities through a nullspace parametrization, scales
each variable so its coefficient data has unit max-norm, and runs an
infeasible-start path-following method with the HKM search direction and a
Mehrotra predictor-corrector.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, null_space

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ILL_CONDITIONED = "IllConditioned"
    ITERATION_LIMIT = "IterationLimit"


class ProgramError(ValueError):
    """Structurally inconsistent program."""


@dataclass
class ConicProgram:
    """LMI-form conic program; see module docstring for the convention.

    Attributes:
        c: cost vector, shape (nv,).
        blocks: list of ``(F0, F)`` with ``F0`` (s, s) and ``F`` (nv, s, s).
        G, h: nonnegative segment ``h + G x >= 0``; G has shape (L, nv).
        E, e: equality segment ``e + E x = 0``.
        names: optional per-variable labels (debugging only).
    """

    c: np.ndarray
    blocks: list = field(default_factory=list)
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    names: list | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        nv = self.c.size
        blocks = []
        for F0, F in self.blocks:
            F0 = np.atleast_2d(np.asarray(F0, dtype=float))
            F = np.asarray(F, dtype=float)
            s = F0.shape[0]
            if F0.shape != (s, s):
                raise ProgramError("block constant must be square")
            if F.size == 0:
                F = np.zeros((nv, s, s))
            if F.shape != (nv, s, s):
                raise ProgramError(f"block coefficients have shape {F.shape}, expected {(nv, s, s)}")
            if not (np.allclose(F0, F0.T, atol=1e-12, rtol=0)
                    and np.allclose(F, np.swapaxes(F, 1, 2), atol=1e-12, rtol=0)):
                raise ProgramError("block matrices must be symmetric")
            blocks.append((0.5 * (F0 + F0.T), 0.5 * (F + np.swapaxes(F, 1, 2))))
        self.blocks = blocks
        self.G, self.h = self._segment(self.G, self.h, nv, "nonnegative")
        self.E, self.e = self._segment(self.E, self.e, nv, "equality")

    @staticmethod
    def _segment(G, h, nv, what):
        if G is None and h is None:
            return np.zeros((0, nv)), np.zeros(0)
        G = np.asarray(G, dtype=float).reshape(-1, nv) if nv else np.zeros((np.size(h), 0))
        h = np.asarray(h, dtype=float).ravel()
        if G.shape[0] != h.size:
            raise ProgramError(f"{what} segment: {G.shape[0]} rows but {h.size} offsets")
        return G, h

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def block_sizes(self) -> list[int]:
        return [F0.shape[0] for F0, _ in self.blocks]

    @property
    def n_psd_blocks(self) -> int:
        return len(self.blocks)

    def lmi_values(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=float)
        return [F0 + np.tensordot(x, F, axes=1) for F0, F in self.blocks]

    def objective(self, x) -> float:
        return float(self.c @ np.asarray(x, dtype=float))


@dataclass
class SolverConfig:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.98
    infeas_tol: float = 1e-9
    stall_iters: int = 15      # give up after this many iterations without halving the merit
    backend: str = "internal"  # or "cvxpy"


@dataclass
class ConicSolution:
    status: Status
    x: np.ndarray
    X: list = field(default_factory=list)
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    primal_objective: float = float("nan")
    dual_objective: float = float("nan")
    gap: float = float("nan")
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    iterations: int = 0
    min_eigs: list = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


# ---------------------------------------------------------------------------
# interior-point core on the reduced, scaled problem

def _max_step_psd(X: np.ndarray, dX: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    Li = np.linalg.inv(L)
    lam = np.linalg.eigvalsh(Li @ dX @ Li.T)[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _max_step_lp(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _sym(A):
    return 0.5 * (A + A.T)


class _Core:
    """Path-following iteration for ``min c^T x, F0_k + F_k(x) >= 0, h + G x >= 0``."""

    def __init__(self, c, blocks, G, h, cfg: SolverConfig):
        self.c = c
        self.blocks = blocks
        self.G = G
        self.h = h
        self.cfg = cfg
        self.nv = c.size
        self.nu = sum(F0.shape[0] for F0, _ in blocks) + h.size

    def Fx(self, x):
        Zs = [np.tensordot(x, F, axes=1) for _, F in self.blocks]
        return Zs, self.G @ x

    def At(self, Xs, s):
        # adjoint: j -> sum_k <F_jk, X_k> + (G^T s)_j
        out = self.G.T @ s
        for (_, F), X in zip(self.blocks, Xs):
            out = out + np.einsum("jab,ab->j", F, X)
        return out

    def solve(self) -> tuple:
        cfg = self.cfg
        nv = self.nv
        normF0 = np.sqrt(sum(np.sum(F0**2) for F0, _ in self.blocks) + self.h @ self.h)
        normc = np.linalg.norm(self.c)

        # initial point
        Xs, Zs = [], []
        for F0, F in self.blocks:
            sz = F0.shape[0]
            nrm = max(np.linalg.norm(F0), np.max(np.linalg.norm(F, axis=(1, 2)), initial=0.0))
            ratio = max((1 + abs(cj)) / (1 + np.linalg.norm(Fj)) for cj, Fj in zip(self.c, F))
            xi = max(10.0, np.sqrt(sz), sz * ratio)
            eta = max(10.0, np.sqrt(sz), nrm)
            Xs.append(xi * np.eye(sz))
            Zs.append(eta * np.eye(sz))
        L = self.h.size
        s = np.full(L, max(10.0, np.max(1 + np.abs(self.c), initial=1.0)))
        z = np.full(L, max(10.0, np.max(np.abs(self.h), initial=1.0),
                           np.max(np.abs(self.G), initial=1.0)))
        x = np.zeros(nv)

        status, msg = Status.ITERATION_LIMIT, "iteration limit reached"
        it = 0
        best, best_it = np.inf, 0
        for it in range(1, cfg.max_iter + 1):
            FxB, Gx = self.Fx(x)
            Rd = [F0 + FX - Z for (F0, _), FX, Z in zip(self.blocks, FxB, Zs)]
            rd_lp = self.h + Gx - z
            rp = self.c - self.At(Xs, s)
            mu = (sum(np.sum(X * Z) for X, Z in zip(Xs, Zs)) + s @ z) / self.nu
            pobj = self.c @ x
            dobj = -sum(np.sum(F0 * X) for (F0, _), X in zip(self.blocks, Xs)) - self.h @ s
            pres = np.sqrt(sum(np.sum(R**2) for R in Rd) + rd_lp @ rd_lp) / (1 + normF0)
            dres = np.linalg.norm(rp) / (1 + normc)
            relgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
            cgap = mu * self.nu / (1 + abs(pobj) + abs(dobj))
            log.debug("it %d pobj %.6e dobj %.6e pres %.2e dres %.2e gap %.2e",
                      it, pobj, dobj, pres, dres, relgap)
            if (pres <= cfg.feas_tol and dres <= cfg.feas_tol
                    and relgap <= cfg.gap_tol and cgap <= cfg.gap_tol):
                status, msg = Status.OPTIMAL, "converged"
                break
            # a dual ray (A^*(X, s) ~ 0 with positive dual objective) certifies
            # that the constraints admit no x
            if (dobj > 0 and pres > cfg.feas_tol
                    and np.linalg.norm(self.At(Xs, s)) < cfg.infeas_tol * dobj):
                status, msg = Status.INFEASIBLE, "dual ray certifies infeasible constraints"
                break
            merit = max(pres, dres, relgap, cgap)
            if merit < 0.5 * best:
                best, best_it = merit, it
            elif it - best_it >= cfg.stall_iters:
                msg = f"stalled at merit {merit:.2e}"
                break
            if pobj < -1e12 * (1 + normF0):
                status, msg = Status.ILL_CONDITIONED, "objective appears unbounded below"
                break

            try:
                Zinv = [np.linalg.inv(Z) for Z in Zs]
                Zinv = [_sym(Zi) for Zi in Zinv]
                Mmat = np.zeros((nv, nv))
                for (_, F), X, Zi in zip(self.blocks, Xs, Zinv):
                    T = np.einsum("ab,jbc,cd->jad", X, F, Zi)
                    Mmat += np.einsum("iab,jba->ij", F, T)
                if L:
                    Mmat += (self.G.T * (s / z)) @ self.G
                Mmat = _sym(Mmat)
                reg = 1e-14 * max(1.0, np.max(np.abs(np.diag(Mmat)), initial=1.0))
                fac = cho_factor(Mmat + reg * np.eye(nv)) if nv else None
            except (np.linalg.LinAlgError, ValueError):
                status, msg = Status.ILL_CONDITIONED, "Schur complement factorization failed"
                break

            def direction(sigma, corr=None):
                # G_k = sigma mu Z^{-1} - X [- dXa dZa Z^{-1}]
                Gk = []
                for i, (X, Zi) in enumerate(zip(Xs, Zinv)):
                    g = sigma * mu * Zi - X
                    if corr is not None:
                        g = g - corr[0][i] @ corr[1][i] @ Zi
                    Gk.append(g)
                glp = sigma * mu / z - s
                if corr is not None:
                    glp = glp - corr[2] * corr[3] / z
                rhs = np.zeros(nv)
                for (_, F), g, X, R, Zi in zip(self.blocks, Gk, Xs, Rd, Zinv):
                    rhs += np.einsum("jab,ab->j", F, g - X @ R @ Zi)
                if L:
                    rhs += self.G.T @ (glp - s * rd_lp / z)
                rhs -= rp
                dx = cho_solve(fac, rhs) if nv else np.zeros(0)
                if nv:
                    # one step of iterative refinement against the unregularized matrix
                    dx = dx + cho_solve(fac, rhs - Mmat @ dx)
                dFx, dGx = self.Fx(dx)
                dZ = [R + D for R, D in zip(Rd, dFx)]
                dz = rd_lp + dGx
                dX = [_sym(g - X @ D @ Zi) for g, X, D, Zi in zip(Gk, Xs, dZ, Zinv)]
                ds = glp - s * dz / z
                return dx, dX, dZ, ds, dz

            def steps(dX, dZ, ds, dz):
                ap = min([_max_step_psd(X, D) for X, D in zip(Xs, dX)] + [_max_step_lp(s, ds)])
                ad = min([_max_step_psd(Z, D) for Z, D in zip(Zs, dZ)] + [_max_step_lp(z, dz)])
                return ap, ad

            dxa, dXa, dZa, dsa, dza = direction(0.0)
            ap, ad = steps(dXa, dZa, dsa, dza)
            ap, ad = min(1.0, ap), min(1.0, ad)
            mu_a = (sum(np.sum((X + ap * dX) * (Z + ad * dZ))
                        for X, dX, Z, dZ in zip(Xs, dXa, Zs, dZa))
                    + (s + ap * dsa) @ (z + ad * dza)) / self.nu
            sigma = min(1.0, (mu_a / mu) ** 3) if mu > 0 else 0.0
            dx, dX, dZ, ds, dz = direction(sigma, (dXa, dZa, dsa, dza))
            ap, ad = steps(dX, dZ, ds, dz)
            ap = min(1.0, cfg.step_fraction * ap)
            ad = min(1.0, cfg.step_fraction * ad)
            if ap < 1e-12 and ad < 1e-12:
                status, msg = Status.ILL_CONDITIONED, "step length collapsed"
                break
            Xs = [_sym(X + ap * D) for X, D in zip(Xs, dX)]
            s = s + ap * ds
            x = x + ad * dx
            Zs = [_sym(Z + ad * D) for Z, D in zip(Zs, dZ)]
            z = z + ad * dz

        info = dict(pobj=float(self.c @ x),
                    dobj=float(-sum(np.sum(F0 * X) for (F0, _), X in zip(self.blocks, Xs))
                               - self.h @ s),
                    iterations=it, message=msg)
        return status, x, Xs, s, info


# ---------------------------------------------------------------------------
# public API

def _reduce(p: ConicProgram):
    """Eliminate equalities: x = x0 + N w."""
    nv = p.n_vars
    if p.E.shape[0] == 0:
        return np.zeros(nv), np.eye(nv), True
    x0, *_ = np.linalg.lstsq(p.E, -p.e, rcond=None)
    ok = np.linalg.norm(p.E @ x0 + p.e) <= 1e-10 * (1 + np.linalg.norm(p.e))
    N = null_space(p.E)
    return x0, N, ok


def solve(p: ConicProgram, cfg: SolverConfig | None = None) -> ConicSolution:
    """Solve ``p``; deterministic for identical inputs."""
    cfg = cfg or SolverConfig()
    if cfg.backend == "cvxpy":
        return _solve_cvxpy(p, cfg)
    if cfg.backend != "internal":
        raise ValueError(f"unknown solver backend {cfg.backend!r}")
    nv = p.n_vars
    x0, N, eq_ok = _reduce(p)
    if not eq_ok:
        sol = ConicSolution(Status.INFEASIBLE, x0, message="inconsistent equality constraints")
        return sol
    k = N.shape[1]
    # reduced data
    blocks = [(F0 + np.tensordot(x0, F, axes=1), np.tensordot(N.T, F, axes=1))
              for F0, F in p.blocks]
    G = p.G @ N
    h = p.h + p.G @ x0
    c = N.T @ p.c
    if k == 0:
        vals = [F0 for F0, _ in blocks]
        feasible = all(np.linalg.eigvalsh(V)[0] >= -cfg.feas_tol for V in vals if V.size) \
            and np.all(h >= -cfg.feas_tol)
        st = Status.OPTIMAL if feasible else Status.INFEASIBLE
        sol = ConicSolution(st, x0, X=[np.zeros_like(F0) for F0, _ in p.blocks],
                            s=np.zeros(h.size), lam=np.zeros(p.E.shape[0]),
                            primal_objective=p.objective(x0), dual_objective=p.objective(x0),
                            gap=0.0, message="no free variables")
        _finish(p, sol)
        return sol
    # equilibrate each variable's coefficient data to unit max-norm
    colmax = np.zeros(k)
    for _, F in blocks:
        colmax = np.maximum(colmax, np.max(np.abs(F), axis=(1, 2)))
    if G.size:
        colmax = np.maximum(colmax, np.max(np.abs(G), axis=0))
    d = np.where(colmax > 0, 1.0 / np.where(colmax > 0, colmax, 1.0), 1.0)
    sblocks = [(F0, F * d[:, None, None]) for F0, F in blocks]
    core = _Core(c * d, sblocks, G * d, h, cfg)
    status, w, Xs, s, info = core.solve()
    x = x0 + N @ (d * w)
    # equality multipliers from the dual residual
    lam = np.zeros(p.E.shape[0])
    if p.E.shape[0]:
        r = p.c - _adjoint(p, Xs, s)
        lam, *_ = np.linalg.lstsq(p.E.T, r, rcond=None)
    sol = ConicSolution(status, x, X=Xs, s=s, lam=lam, iterations=info["iterations"],
                        message=info["message"])
    _finish(p, sol)
    return sol


def _adjoint(p: ConicProgram, Xs, s, lam=None) -> np.ndarray:
    out = p.G.T @ s
    for (_, F), X in zip(p.blocks, Xs):
        out = out + np.einsum("jab,ab->j", F, X)
    if lam is not None and lam.size:
        out = out + p.E.T @ lam
    return out


def _finish(p: ConicProgram, sol: ConicSolution) -> None:
    x = sol.x
    sol.primal_objective = p.objective(x)
    sol.dual_objective = float(-sum(np.sum(F0 * X) for (F0, _), X in zip(p.blocks, sol.X))
                               - p.h @ sol.s - p.e @ sol.lam) if sol.X else sol.primal_objective
    sol.gap = sol.primal_objective - sol.dual_objective
    sol.min_eigs = [float(np.linalg.eigvalsh(V)[0]) for V in p.lmi_values(x)]
    lin = p.h + p.G @ x
    eq = p.e + p.E @ x
    neg = [min(0.0, m) for m in sol.min_eigs] + [min(0.0, float(np.min(lin, initial=0.0)))]
    sol.primal_residual = float(max([-v for v in neg] + [np.max(np.abs(eq), initial=0.0)]))
    if sol.X:
        sol.dual_residual = float(np.linalg.norm(p.c - _adjoint(p, sol.X, sol.s, sol.lam)))


@dataclass
class VerifyReport:
    ok: bool
    primal_min_eig: float
    dual_min_eig: float
    primal_residual: float
    dual_residual: float
    gap: float
    complementarity: float
    problems: list


def verify(p: ConicProgram, sol: ConicSolution, cfg: SolverConfig | None = None) -> VerifyReport:
    """Recompute feasibility, residuals and gap from the raw data.

    Anything beyond ten times the configured tolerance is flagged.
    """
    cfg = cfg or SolverConfig()
    tol_f = 10 * cfg.feas_tol
    tol_g = 10 * cfg.gap_tol
    problems = []
    x = np.asarray(sol.x, dtype=float)
    if p.n_vars == 0 and not p.blocks and p.h.size == 0:
        return VerifyReport(True, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, [])
    scale_p = 1 + np.sqrt(sum(np.sum(F0**2) for F0, _ in p.blocks) + p.h @ p.h)
    Zs = p.lmi_values(x)
    pmin = min([float(np.linalg.eigvalsh(Z)[0]) for Z in Zs if Z.size] + [np.inf])
    lin = p.h + p.G @ x
    if lin.size:
        pmin = min(pmin, float(np.min(lin)))
    eq = float(np.max(np.abs(p.e + p.E @ x), initial=0.0))
    if pmin < -tol_f * scale_p:
        problems.append(f"primal cone violation {pmin:.3e}")
    if eq > tol_f * scale_p:
        problems.append(f"equality residual {eq:.3e}")
    dmin = min([float(np.linalg.eigvalsh(X)[0]) for X in sol.X if X.size] + [np.inf])
    if sol.s.size:
        dmin = min(dmin, float(np.min(sol.s)))
    if dmin < -tol_f * max(1.0, max((np.abs(X).max() for X in sol.X if X.size), default=1.0)):
        problems.append(f"dual cone violation {dmin:.3e}")
    dres = float(np.linalg.norm(p.c - _adjoint(p, sol.X, sol.s, sol.lam))) if sol.X or sol.s.size else 0.0
    if dres > tol_f * (1 + np.linalg.norm(p.c)):
        problems.append(f"dual residual {dres:.3e}")
    pobj = p.objective(x)
    dobj = float(-sum(np.sum(F0 * X) for (F0, _), X in zip(p.blocks, sol.X))
                 - p.h @ sol.s - p.e @ sol.lam)
    gap = pobj - dobj
    if abs(gap) > tol_g * (1 + abs(pobj) + abs(dobj)):
        problems.append(f"duality gap {gap:.3e}")
    comp = float(sum(np.sum(Z * X) for Z, X in zip(Zs, sol.X)) + lin @ sol.s) if sol.X else 0.0
    return VerifyReport(not problems, pmin, dmin, max(0.0, -pmin), dres, gap, comp, problems)


# ---------------------------------------------------------------------------
# optional external backend

def _solve_cvxpy(p: ConicProgram, cfg: SolverConfig) -> ConicSolution:
    import cvxpy as cp

    x = cp.Variable(p.n_vars)
    cons = []
    lmis = []
    for F0, F in p.blocks:
        expr = F0 + sum(x[j] * F[j] for j in range(p.n_vars)) if p.n_vars else cp.Constant(F0)
        c = 0.5 * (expr + expr.T) >> 0
        cons.append(c)
        lmis.append(c)
    lin = eqc = None
    if p.h.size:
        lin = p.G @ x + p.h >= 0
        cons.append(lin)
    if p.e.size:
        eqc = p.E @ x + p.e == 0
        cons.append(eqc)
    prob = cp.Problem(cp.Minimize(p.c @ x), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.SolverError as exc:
        return ConicSolution(Status.ILL_CONDITIONED, np.zeros(p.n_vars), message=str(exc))
    st = {cp.OPTIMAL: Status.OPTIMAL, cp.INFEASIBLE: Status.INFEASIBLE,
          cp.USER_LIMIT: Status.ITERATION_LIMIT}.get(prob.status, Status.ILL_CONDITIONED)
    if x.value is None:
        return ConicSolution(st, np.zeros(p.n_vars), message=prob.status)
    Xs = [np.asarray(c.dual_value, float).reshape(F0.shape) for c, (F0, _) in zip(lmis, p.blocks)]
    s = np.asarray(lin.dual_value, float).ravel() if lin is not None else np.zeros(0)
    lam = -np.asarray(eqc.dual_value, float).ravel() if eqc is not None else np.zeros(0)
    sol = ConicSolution(st, np.asarray(x.value, float), X=Xs, s=s, lam=lam, message=prob.status)
    _finish(p, sol)
    return sol


# ---------------------------------------------------------------------------
# sparse-triplet text format

def dumps(p: ConicProgram) -> str:
    """Serialize ``p``; see README ("Conic program dump format")."""
    f = lambda v: format(float(v), ".17g")
    out = ["# rbfreach conic program v1", f"vars {p.n_vars}",
           "cost " + " ".join(f(v) for v in p.c)]
    for k, (F0, F) in enumerate(p.blocks):
        s = F0.shape[0]
        out.append(f"block {k + 1} psd {s}")
        mats = [F0] + list(F)
        for j, Mj in enumerate(mats):
            r, c = np.nonzero(np.triu(Mj))
            for a, b in zip(r, c):
                out.append(f"{j} {a + 1} {b + 1} {f(Mj[a, b])}")
    for tag, G, h in (("nonneg", p.G, p.h), ("eq", p.E, p.e)):
        if h.size:
            out.append(f"{tag} {h.size}")
            for row in range(h.size):
                if h[row] != 0:
                    out.append(f"0 {row + 1} {f(h[row])}")
                for j in np.nonzero(G[row])[0]:
                    out.append(f"{j + 1} {row + 1} {f(G[row, j])}")
    return "\n".join(out) + "\n"


def loads(text: str) -> ConicProgram:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    it = iter(lines)
    head = next(it)
    if head[0] != "vars":
        raise ProgramError("missing 'vars' header")
    nv = int(head[1])
    cost = next(it)
    if cost[0] != "cost":
        raise ProgramError("missing 'cost' line")
    c = np.array([float(v) for v in cost[1:]])
    blocks, G, h, E, e = [], None, None, None, None
    cur = None
    for tok in it:
        if tok[0] == "block":
            s = int(tok[3])
            cur = ("psd", np.zeros((nv + 1, s, s)))
            blocks.append(cur[1])
        elif tok[0] in ("nonneg", "eq"):
            L = int(tok[1])
            arr = np.zeros((L, nv + 1))
            cur = (tok[0], arr)
            if tok[0] == "nonneg":
                G = arr
            else:
                E = arr
        elif cur is None:
            raise ProgramError(f"unexpected line {' '.join(tok)!r}")
        elif cur[0] == "psd":
            j, a, b, v = int(tok[0]), int(tok[1]) - 1, int(tok[2]) - 1, float(tok[3])
            cur[1][j, a, b] = v
            cur[1][j, b, a] = v
        else:
            j, row, v = int(tok[0]), int(tok[1]) - 1, float(tok[2])
            cur[1][row, j] = v
    psd = [(B[0], B[1:]) for B in blocks]
    kw = {}
    if G is not None:
        kw.update(G=G[:, 1:], h=G[:, 0])
    if E is not None:
        kw.update(E=E[:, 1:], e=E[:, 0])
    return ConicProgram(c, psd, **kw)


def save(p: ConicProgram, path: str | Path) -> None:
    Path(path).write_text(dumps(p))


def load(path: str | Path) -> ConicProgram:
    return loads(Path(path).read_text())
