"""LMI certificates for pointwise dominance between Gaussian RBF sums.

Term ``i`` of an upper sum dominates term ``i`` of a lower sum on a quadratic
set when the log-ratio of the two terms, a quadratic in ``z = [x; u; 1]``, is
nonnegative on the set. An S-procedure relaxation turns that into

    Q_base + Q_logw - G^T Sigma_hat^{-1} G - sum_j tau_j A_j  >= 0,
    G = [I_n, 0, -mu_hat],

and a Schur complement makes it linear in ``(Sigma_hat, mu_hat, y, tau)``:

    [[Sigma_hat,  G                                  ],
     [G^T,        Q_base + Q_logw - sum_j tau_j A_j  ]]  >= 0.

Blocks are assembled in that compact form. The lifted form with a leading
identity block (``lifted_block``) is kept for cross-checks; it differs only by
a decoupled identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .geometry import QuadraticSet
from .rbf import LOG_2PI, AffineRbfSum, RbfSum, TransitionKernel, pushforward_params


def q_affine(A: np.ndarray, B: np.ndarray, c: np.ndarray, mu: np.ndarray,
             precision: np.ndarray) -> np.ndarray:
    """``H^T Lambda H`` with ``H = [A, B, c - mu]``: the quadratic form of
    ``(A x + B u + c - mu)^T Lambda (A x + B u + c - mu)`` in ``z = [x; u; 1]``."""
    H = np.hstack([A, B, (c - mu)[:, None]])
    Q = H.T @ precision @ H
    return 0.5 * (Q + Q.T)


def q_mu_sigma(mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``[[S^{-1}, -S^{-1} mu], [-mu^T S^{-1}, mu^T S^{-1} mu]]``."""
    n = mu.size
    return q_affine(np.eye(n), np.zeros((n, 0)), np.zeros(n), mu, np.linalg.inv(cov))


def _corner(size: int, value: float) -> np.ndarray:
    Q = np.zeros((size, size))
    Q[-1, -1] = value
    return Q


def _gmat(n: int, d: int, mu_hat: np.ndarray) -> np.ndarray:
    G = np.zeros((n, d + 1))
    G[:, :n] = np.eye(n)
    G[:, -1] = -mu_hat
    return G


def compact_block(sigma_hat, mu_hat, lower_right) -> np.ndarray:
    n = sigma_hat.shape[0]
    d = lower_right.shape[0] - 1
    G = _gmat(n, d, np.asarray(mu_hat, float))
    return np.block([[sigma_hat, G], [G.T, lower_right]])


def lifted_block(sigma_hat, mu_hat, lower_right) -> np.ndarray:
    """``[[Q_Sigma^{-1}, Q_mu], [Q_mu^T, lower_right]]`` with
    ``Q_Sigma^{-1} = diag(I, Sigma_hat)`` and ``Q_mu = [[0], [I, 0, -mu_hat]]``."""
    n = sigma_hat.shape[0]
    d1 = lower_right.shape[0]
    top = np.eye(d1)
    top[d1 - n:, d1 - n:] = sigma_hat
    Qmu = np.zeros((d1, d1))
    Qmu[d1 - n:, :] = _gmat(n, d1 - 1, np.asarray(mu_hat, float))
    return np.block([[top, Qmu], [Qmu.T, lower_right]])


def schur_reduced(sigma_hat, mu_hat, lower_right) -> np.ndarray:
    """``lower_right - Q_mu^T Q_Sigma Q_mu``, computed from explicit inverses."""
    n = sigma_hat.shape[0]
    d = lower_right.shape[0] - 1
    G = _gmat(n, d, np.asarray(mu_hat, float))
    R = lower_right - G.T @ np.linalg.inv(sigma_hat) @ G
    return 0.5 * (R + R.T)


# ---------------------------------------------------------------------------
# dominance feasibility with the upper sum fixed

@dataclass
class DominanceCertificate:
    status: str                      # "Certified" or "Indeterminate"
    multipliers: list                # per term, shape (N,)
    min_eigs: list                   # per term, compact block
    solver_status: sdp.Status
    margins: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.status == "Certified"


@dataclass
class DominanceProblem:
    hat: RbfSum
    base: AffineRbfSum
    set: QuadraticSet
    program: sdp.ConicProgram
    lower_rights: list               # constant part per term
    n_forms: int

    def blocks_at(self, taus) -> list[np.ndarray]:
        out = []
        for i, R0 in enumerate(self.lower_rights):
            R = R0 - np.tensordot(taus[i], np.stack(self.set.matrices), axes=1)
            out.append(compact_block(self.hat.covs[i], self.hat.means[i], R))
        return out


def _as_affine(base) -> AffineRbfSum:
    return base if isinstance(base, AffineRbfSum) else AffineRbfSum.from_sum(base)


def log_weight_entry(w_hat: float, logdet_hat: float, w: float, logdet: float) -> float:
    """``2 log(w_hat sqrt|Sigma| / (w sqrt|Sigma_hat|))``."""
    return 2.0 * (np.log(w_hat) - 0.5 * logdet_hat) + logdet - 2.0 * np.log(w)


def build_dominance_feasibility(hat: RbfSum, base, set: QuadraticSet) -> DominanceProblem:
    """Feasibility program for term-wise dominance ``hat >= base`` on ``set``.

    The set lives in the argument space of ``base`` (``x``, or ``(x, u)`` for an
    affine-argument sum). Each term gets multipliers ``tau_i >= 0`` and a margin
    ``t_i <= 1``; the program maximizes the margins subject to
    ``X_i(tau_i) - t_i I >= 0``.
    """
    base = _as_affine(base)
    M = hat.size
    if base.size != M:
        raise ValueError(f"term counts differ: {M} upper vs {base.size} lower")
    if np.any(hat.weights <= 0) or np.any(base.weights <= 0):
        raise ValueError("dominance certificates need strictly positive weights")
    d = base.n + base.m
    if set.dim != d:
        raise ValueError(f"set dimension {set.dim} does not match argument dimension {d}")
    if hat.dim != base.n:
        raise ValueError("upper sum and lower sum act on different state dimensions")
    N = set.n_forms
    Amats = np.stack(set.matrices)
    n = hat.dim
    nv = M * (N + 1)
    blocks, lower = [], []
    for i in range(M):
        R0 = q_affine(base.A[i], base.B[i], base.c[i], base.means[i], base.precisions[i])
        R0 = R0 + _corner(d + 1, log_weight_entry(hat.weights[i], hat.logdets[i],
                                                  base.weights[i], base.logdets[i]))
        lower.append(R0)
        F0 = compact_block(hat.covs[i], hat.means[i], R0)
        F = np.zeros((nv, n + d + 1, n + d + 1))
        off = i * (N + 1)
        for j in range(N):
            F[off + j, n:, n:] = -Amats[j]
        F[off + N] = -np.eye(n + d + 1)
        blocks.append((F0, F))
    c = np.zeros(nv)
    rows_G, rows_h = [], []
    for i in range(M):
        off = i * (N + 1)
        c[off + N] = -1.0
        for j in range(N):
            g = np.zeros(nv)
            g[off + j] = 1.0
            rows_G.append(g)
            rows_h.append(0.0)
        g = np.zeros(nv)
        g[off + N] = -1.0
        rows_G.append(g)
        rows_h.append(1.0)
    prog = sdp.ConicProgram(c, blocks, G=np.array(rows_G), h=np.array(rows_h))
    return DominanceProblem(hat, base, set, prog, lower, N)


def certify_dominance(hat: RbfSum, base, set: QuadraticSet,
                      cfg: sdp.SolverConfig | None = None) -> DominanceCertificate:
    """Solve the feasibility program and re-check every block independently.

    ``Certified`` means every compact block has a nonnegative smallest
    eigenvalue at the returned (clipped) multipliers. Anything else is
    ``Indeterminate``: the condition is only sufficient.
    """
    prob = build_dominance_feasibility(hat, base, set)
    sol = sdp.solve(prob.program, cfg)
    N = prob.n_forms
    M = hat.size
    x = sol.x if sol.x.size else np.zeros(prob.program.n_vars)
    taus = [np.maximum(x[i * (N + 1): i * (N + 1) + N], 0.0) for i in range(M)]
    margins = [float(x[i * (N + 1) + N]) for i in range(M)]
    eigs = [float(np.linalg.eigvalsh(B)[0]) for B in prob.blocks_at(taus)]
    ok = sol.status in (sdp.Status.OPTIMAL, sdp.Status.ITERATION_LIMIT) and min(eigs) >= 0.0
    return DominanceCertificate("Certified" if ok else "Indeterminate", taus, eigs,
                                sol.status, margins)


# ---------------------------------------------------------------------------
# one recursion step: upper-bound SDP

@dataclass
class BoundStepConfig:
    sigma_floor: float = 1e-6     # Sigma_hat >= sigma_floor * I
    lmi_margin: float = 1e-7      # X_i, Xbar_i >= lmi_margin * I
    solver: sdp.SolverConfig = field(default_factory=sdp.SolverConfig)


@dataclass
class TermLayout:
    n: int
    n_s: int
    n_k: int

    @property
    def n_sigma(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def mu(self) -> slice:
        return slice(0, self.n)

    @property
    def sigma(self) -> slice:
        return slice(self.n, self.n + self.n_sigma)

    @property
    def y(self) -> int:
        return self.n + self.n_sigma

    @property
    def tau(self) -> slice:
        return slice(self.y + 1, self.y + 1 + self.n_s)

    @property
    def rho(self) -> slice:
        return slice(self.y + 1 + self.n_s, self.y + 1 + self.n_s + self.n_k)

    @property
    def size(self) -> int:
        return self.y + 1 + self.n_s + self.n_k

    def sigma_basis(self) -> np.ndarray:
        E = np.zeros((self.n_sigma, self.n, self.n))
        k = 0
        for a in range(self.n):
            for b in range(a, self.n):
                E[k, a, b] = E[k, b, a] = 1.0
                k += 1
        return E

    def unpack(self, v: np.ndarray) -> dict:
        E = self.sigma_basis()
        return dict(mu=v[self.mu].copy(), sigma=np.tensordot(v[self.sigma], E, axes=1),
                    y=float(v[self.y]), tau=v[self.tau].copy(), rho=v[self.rho].copy())

    def pack(self, mu, sigma, y, tau=(), rho=()) -> np.ndarray:
        v = np.zeros(self.size)
        v[self.mu] = mu
        iu = np.triu_indices(self.n)
        v[self.sigma] = np.asarray(sigma)[iu]
        v[self.y] = y
        v[self.tau] = tau if self.n_s else v[self.tau]
        v[self.rho] = rho if self.n_k else v[self.rho]
        return v


@dataclass
class TermProgram:
    """One term's share of the bound-step SDP (the step is block separable)."""

    index: int
    layout: TermLayout
    program: sdp.ConicProgram
    base_lower_right: np.ndarray | None   # constant part of X's lower-right block
    k_level: float                        # the K-constraint level (1/M)
    with_dynamics: bool
    margin: float
    sigma_floor: float


@dataclass
class BoundStepSdp:
    terms: list                      # TermProgram per expanded term
    n: int
    m: int
    S: QuadraticSet | None
    K: QuadraticSet
    base: AffineRbfSum | None
    cfg: BoundStepConfig

    @property
    def n_psd_constraints(self) -> int:
        return sum(t.program.n_psd_blocks for t in self.terms)

    @property
    def size(self) -> int:
        return len(self.terms)


def _term_program(i, layout, n, m, base: AffineRbfSum | None, S: QuadraticSet | None,
                  K: QuadraticSet, k_level: float, cfg: BoundStepConfig) -> TermProgram:
    nv = layout.size
    E = layout.sigma_basis()
    blocks = []
    margin = cfg.lmi_margin
    base_R = None
    if base is not None:
        d = n + m
        sz = n + d + 1
        R0 = q_affine(base.A[i], base.B[i], base.c[i], base.means[i], base.precisions[i])
        # 2 (y + log(sqrt|Sigma_i + Sigma_0| / w_i)); y enters linearly
        R0 = R0 + _corner(d + 1, base.logdets[i] - 2.0 * np.log(base.weights[i]))
        base_R = R0
        F0 = np.zeros((sz, sz))
        F0[:n, n:] = _gmat(n, d, np.zeros(n))
        F0[n:, :n] = F0[:n, n:].T
        F0[n:, n:] = R0
        F0 -= margin * np.eye(sz)
        F = np.zeros((nv, sz, sz))
        for a in range(n):
            F[layout.mu.start + a, a, sz - 1] = F[layout.mu.start + a, sz - 1, a] = -1.0
        F[layout.sigma, :n, :n] = E
        F[layout.y, sz - 1, sz - 1] = 2.0
        for j, Sj in enumerate(S.matrices):
            F[layout.tau.start + j, n:, n:] = -Sj
        blocks.append((F0, F))
    # K block: w_hat phi_hat >= k_level on K
    sz = 2 * n + 1
    F0 = np.zeros((sz, sz))
    F0[:n, n:] = _gmat(n, n, np.zeros(n))
    F0[n:, :n] = F0[:n, n:].T
    F0[-1, -1] = 2.0 * (-np.log(k_level) - 0.5 * n * LOG_2PI)
    F0 -= margin * np.eye(sz)
    F = np.zeros((nv, sz, sz))
    for a in range(n):
        F[layout.mu.start + a, a, sz - 1] = F[layout.mu.start + a, sz - 1, a] = -1.0
    F[layout.sigma, :n, :n] = E
    F[layout.y, sz - 1, sz - 1] = 2.0
    for j, Kj in enumerate(K.matrices):
        F[layout.rho.start + j, n:, n:] = -Kj
    blocks.append((F0, F))
    # Sigma_hat >= floor
    F = np.zeros((nv, n, n))
    F[layout.sigma] = E
    blocks.append((-cfg.sigma_floor * np.eye(n), F))
    # cost: y + tr(Sigma_hat) / 2
    c = np.zeros(nv)
    c[layout.y] = 1.0
    iu = np.triu_indices(n)
    c[layout.sigma] = np.where(iu[0] == iu[1], 0.5, 0.0)
    nlin = layout.n_s + layout.n_k
    G = np.zeros((nlin, nv))
    G[:, layout.y + 1:] = np.eye(nlin)
    prog = sdp.ConicProgram(c, blocks, G=G, h=np.zeros(nlin))
    return TermProgram(i, layout, prog, base_R, k_level, base is not None,
                       margin, cfg.sigma_floor)


def build_bound_step(prev: RbfSum, kernel: TransitionKernel, S: QuadraticSet,
                     K: QuadraticSet, cfg: BoundStepConfig | None = None) -> BoundStepSdp:
    """Assemble the bound-step SDP for ``prev`` pushed through ``kernel``.

    Mixture kernels expand to one term per (value term, component) pair; the
    upper sum is sized to match and each term must reach ``1/size`` on K.
    """
    cfg = cfg or BoundStepConfig()
    if np.any(prev.weights <= 0):
        raise ValueError("previous bound must have strictly positive weights")
    n, m = kernel.n, kernel.m
    if prev.dim != n or S.dim != n + m or K.dim != n:
        raise ValueError("dimension mismatch between bound, kernel and sets")
    base = pushforward_params(prev, kernel)
    layout = TermLayout(n, S.n_forms, K.n_forms)
    level = 1.0 / base.size
    terms = [_term_program(i, layout, n, m, base, S, K, level, cfg) for i in range(base.size)]
    return BoundStepSdp(terms, n, m, S, K, base, cfg)


def build_indicator_sdp(K: QuadraticSet, M: int, cfg: BoundStepConfig | None = None) -> BoundStepSdp:
    """Bound-step program without the dynamics blocks: ``sum_i w_i phi_i >= 1`` on K."""
    cfg = cfg or BoundStepConfig()
    n = K.dim
    layout = TermLayout(n, 0, K.n_forms)
    terms = [_term_program(i, layout, n, 0, None, None, K, 1.0 / M, cfg) for i in range(M)]
    return BoundStepSdp(terms, n, 0, None, K, None, cfg)


@dataclass
class StepSolution:
    bound: RbfSum | None
    statuses: list
    objective: float
    variables: list                  # unpacked per term
    min_eigs: list                   # per term, [X, Xbar, Sigma] at clipped multipliers
    certified: bool
    message: str = ""


def weight_from_log(y: float, sigma: np.ndarray) -> float:
    """``w_hat = e^y sqrt|Sigma_hat|``."""
    return float(np.exp(y + 0.5 * np.linalg.slogdet(sigma)[1]))


def log_from_weight(w: float, sigma: np.ndarray) -> float:
    return float(np.log(w) - 0.5 * np.linalg.slogdet(sigma)[1])


def unmargined_blocks(term: TermProgram, v: np.ndarray) -> list[np.ndarray]:
    """Blocks ``[X_i, Xbar_i, Sigma_hat_i]`` at ``v`` without the strictness
    margin or the covariance floor, i.e. what dominance actually needs."""
    vals = term.program.lmi_values(v)
    shifts = [term.margin] * (len(vals) - 1) + [term.sigma_floor]
    return [V + s * np.eye(V.shape[0]) for V, s in zip(vals, shifts)]


def solve_step(step: BoundStepSdp, *, executor=None, accept_inexact: bool = True) -> StepSolution:
    """Solve every term program and extract ``sum_i w_hat_i phi(x, mu_hat_i, Sigma_hat_i)``.

    The result is marked certified only if every block is PSD at the returned
    variables with multipliers clipped to be nonnegative.
    """
    cfg = step.cfg.solver
    progs = [t.program for t in step.terms]
    sols = list(executor.map(lambda p: sdp.solve(p, cfg), progs)) if executor else \
        [sdp.solve(p, cfg) for p in progs]
    return extract_bound(sols, step, accept_inexact=accept_inexact)


def extract_bound(sols, step: BoundStepSdp, *, accept_inexact: bool = False) -> StepSolution:
    """Turn per-term solutions into ``sum_i w_hat_i phi(x, mu_hat_i, Sigma_hat_i)``.

    With ``accept_inexact`` an iteration-limited solve is still used when its
    point passes the block check: the bound stays valid, only less tight.
    """
    statuses = [s.status for s in sols]
    usable = (sdp.Status.OPTIMAL, sdp.Status.ITERATION_LIMIT) if accept_inexact \
        else (sdp.Status.OPTIMAL,)
    if not all(s.status in usable and s.x.size for s in sols):
        bad = [i for i, s in enumerate(sols) if s.status not in usable or not s.x.size]
        return StepSolution(None, statuses, float("nan"), [], [], False,
                            f"terms {bad} not solved to optimality ({statuses[bad[0]].value})")
    weights, means, covs, variables, eigs = [], [], [], [], []
    certified = True
    for term, sol in zip(step.terms, sols):
        v = sol.x.copy()
        lay = term.layout
        v[lay.y + 1:] = np.maximum(v[lay.y + 1:], 0.0)
        parts = lay.unpack(v)
        variables.append(parts)
        blocks = unmargined_blocks(term, v)
        e = [float(np.linalg.eigvalsh(B)[0]) for B in blocks]
        eigs.append(e)
        if min(e[:-1]) < 0.0 or e[-1] <= 0.0:
            certified = False
        covs.append(0.5 * (parts["sigma"] + parts["sigma"].T))
        means.append(parts["mu"])
        weights.append(weight_from_log(parts["y"], parts["sigma"]))
    obj = float(sum(s.primal_objective for s in sols))
    bound = RbfSum(weights, np.stack(means), np.stack(covs), nonneg=True)
    return StepSolution(bound, statuses, obj, variables, eigs, certified,
                        "" if certified else "block check failed at extracted variables")


# ---------------------------------------------------------------------------
# sampling audit

@dataclass
class ViolationReport:
    samples: int
    violations: int
    worst_margin: float
    worst_point: np.ndarray | None


def verify_certificate(hat, base, set: QuadraticSet, samples: int, rng: np.random.Generator,
                       *, tol: float = 1e-9, max_attempts: int = 1000) -> ViolationReport:
    """Sample ``set`` uniformly and check ``hat(x) >= base(x, u) - tol`` pointwise.

    Raises:
        RuntimeError: when rejection sampling cannot find enough points.
    """
    base = _as_affine(base)
    if samples <= 0:
        return ViolationReport(0, 0, float("inf"), None)
    pts = set.sample(samples, rng, max_attempts=max_attempts)
    x, u = pts[:, :base.n], pts[:, base.n:]
    diff = np.asarray(hat(x)) - np.asarray(base.evaluate(x, u))
    k = int(np.argmin(diff))
    return ViolationReport(samples, int(np.sum(diff < -tol)), float(diff[k]), pts[k])
