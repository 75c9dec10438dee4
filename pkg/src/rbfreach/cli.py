"""Command-line front end: ``rbfreach VERB --config FILE [--out DIR] [--seed N] [--threads N]``.

Verbs:
    bound         indicator bound plus recursion; writes ``value_k{k}.txt``.
    grid          grid dynamic program; writes ``grid_k{k}.csv``.
    compare-grid  bound controller against the grid controller (value gap and policy gap).
    compare-lqg   bound controller against LQG on random stable systems.
    validate      sampled audit of existing value files (``--values DIR``).

Exit codes: 0 success, 1 solver failure or audit violations, 2 a recursion
step fell back to a constant, 64 invalid config, 65 grid node cap exceeded,
66 missing input file.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import bound as bd
from . import evaluation as ev
from . import gridoracle as go
from . import policy as po
from .dominance import BoundStepConfig
from .geometry import QuadraticForm, QuadraticSet, ellipsoid
from .rbf import KernelComponent, TransitionKernel, load
from .sdp import SolverConfig
from .seeding import derive_rng

log = logging.getLogger("rbfreach")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_FALLBACK = 2
EXIT_CONFIG = 64
EXIT_GRID_CAP = 65
EXIT_MISSING = 66


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# schema

SCHEMA = {
    "seed": int,
    "output": str,
    "problem": {
        "horizon": int,
        "target": dict,
        "safe": dict,
        "control": dict,
        "kernel": list,
        "benchmark": {"n": int, "m": int, "pattern": str, "noise": float,
                      "rho_s": float, "rho_t": float, "rho_u": float},
    },
    "bound": {"M": int, "indicator": str, "sigma_b": float, "lp_grid": int, "lp_refine": int,
              "lp_rounds": int, "weight_floor": float, "max_terms": int,
              "audit_samples": int, "sigma_floor": float, "lmi_margin": float,
              "solver": {"gap_tol": float, "feas_tol": float, "max_iter": int,
                         "stall_iters": int, "backend": str}},
    "grid": {"state_counts": int, "control_counts": int, "interpolation": str,
             "quadrature": str, "refine": int, "max_nodes": int},
    "eval": {"n_init": int, "n_traj": int, "reject_threshold": float, "policy": str,
             "multistart": int, "max_iter": int, "grad_tol": float, "grid_points": int,
             "max_candidates": int},
    "lqg": {"systems": int, "n": int, "m": int, "radius": float, "noise": float,
            "horizon": int, "rho_s": float, "rho_t": float, "rho_u": float},
    "validate": {"samples": int},
}

SET_KEYS = {"Q", "rho", "center", "forms"}
COMPONENT_KEYS = {"weight", "A", "B", "c", "cov"}


def _check(block, schema, path: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, val in block.items():
        if key not in schema:
            raise ConfigError(f"unknown key {path + key!r}")
        want = schema[key]
        if isinstance(want, dict):
            _check(val, want, f"{path}{key}.")
        elif want is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path + key} must be a number")
        elif want is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{path + key} must be an integer")
        elif not isinstance(val, want):
            raise ConfigError(f"{path + key} must be of type {want.__name__}")


def _matrix(val, shape, what: str) -> np.ndarray:
    try:
        M = np.array(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} is not a numeric matrix") from exc
    if M.shape != shape:
        raise ConfigError(f"{what} has shape {M.shape}, expected {shape}")
    if not np.all(np.isfinite(M)):
        raise ConfigError(f"{what} has non-finite entries")
    return M


def _set(spec: dict, dim: int, what: str) -> QuadraticSet:
    if not isinstance(spec, dict) or not set(spec) <= SET_KEYS:
        raise ConfigError(f"{what} must be a mapping with keys among {sorted(SET_KEYS)}")
    try:
        if "forms" in spec:
            if {"Q", "rho"} & set(spec):
                raise ConfigError(f"{what}: give either forms or Q/rho")
            forms = [QuadraticForm(dim, _matrix(F, (dim + 1, dim + 1), f"{what}.forms"))
                     for F in spec["forms"]]
            return QuadraticSet(dim, tuple(forms))
        if "Q" not in spec or "rho" not in spec:
            raise ConfigError(f"{what} needs Q and rho")
        Q = _matrix(spec["Q"], (dim, dim), f"{what}.Q")
        center = None
        if "center" in spec:
            center = _matrix(spec["center"], (dim,), f"{what}.center")
        return ellipsoid(Q, float(spec["rho"]), center)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _kernel(comps: list, n: int | None) -> TransitionKernel:
    if not comps:
        raise ConfigError("problem.kernel needs at least one component")
    out = []
    for i, comp in enumerate(comps):
        what = f"problem.kernel[{i}]"
        if not isinstance(comp, dict) or not set(comp) <= COMPONENT_KEYS:
            raise ConfigError(f"{what} must be a mapping with keys among {sorted(COMPONENT_KEYS)}")
        if "A" not in comp or "B" not in comp or "cov" not in comp:
            raise ConfigError(f"{what} needs A, B and cov")
        A = np.array(comp["A"], dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"{what}.A must be square")
        dim = A.shape[0] if n is None else n
        A = _matrix(comp["A"], (dim, dim), f"{what}.A")
        B = np.array(comp["B"], dtype=float)
        if B.ndim != 2:
            raise ConfigError(f"{what}.B must be a matrix")
        B = _matrix(comp["B"], (dim, B.shape[1]), f"{what}.B")
        c = _matrix(comp.get("c", [0.0] * dim), (dim,), f"{what}.c")
        cov = _matrix(comp["cov"], (dim, dim), f"{what}.cov")
        try:
            out.append(KernelComponent(float(comp.get("weight", 1.0)), A, B, c, cov))
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ConfigError(f"{what}: {exc}") from exc
        n = dim
    try:
        return TransitionKernel(out)
    except ValueError as exc:
        raise ConfigError(f"problem.kernel: {exc}") from exc


def build_problem(block: dict) -> bd.ReachAvoidProblem:
    """Problem from an explicit description or from the ``benchmark`` shorthand."""
    if "horizon" not in block:
        raise ConfigError("problem.horizon is required")
    T = block["horizon"]
    if T < 1:
        raise ConfigError("problem.horizon must be at least 1")
    if "benchmark" in block:
        extra = {"target", "safe", "control", "kernel"} & set(block)
        if extra:
            raise ConfigError(f"problem.benchmark excludes {sorted(extra)}")
        b = dict(block["benchmark"])
        if "n" not in b or "m" not in b:
            raise ConfigError("problem.benchmark needs n and m")
        try:
            return ev.benchmark_problem(b.pop("n"), b.pop("m"), horizon=T, **b)
        except ValueError as exc:
            raise ConfigError(f"problem.benchmark: {exc}") from exc
    for key in ("target", "safe", "control", "kernel"):
        if key not in block:
            raise ConfigError(f"problem.{key} is required")
    kernel = _kernel(block["kernel"], None)
    try:
        return bd.ReachAvoidProblem(_set(block["target"], kernel.n, "problem.target"),
                                    _set(block["safe"], kernel.n, "problem.safe"),
                                    _set(block["control"], kernel.m, "problem.control"),
                                    kernel, T)
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from exc


@dataclass
class RunConfig:
    raw: dict
    seed: int
    output: Path
    problem: bd.ReachAvoidProblem | None
    bound: bd.BoundConfig
    grid: go.GridConfig
    eval: dict
    policy: po.PolicyConfig
    lqg: dict
    validate_samples: int


def _positive(d: dict, keys, where: str, minimum=1) -> None:
    for k in keys:
        if k in d and d[k] < minimum:
            raise ConfigError(f"{where}.{k} must be at least {minimum}")


def parse_config(raw: dict, *, seed: int | None = None, out: str | None = None,
                 threads: int = 1, need_problem: bool = True) -> RunConfig:
    """Validate the whole config before anything runs.

    Raises:
        ConfigError: on unknown keys, wrong types, bad dimensions or values.
    """
    if raw is None:
        raw = {}
    _check(raw, SCHEMA, "")
    root = raw.get("seed", 0) if seed is None else seed
    output = Path(out if out is not None else raw.get("output", "out"))
    problem = None
    if "problem" in raw:
        problem = build_problem(raw["problem"])
    elif need_problem:
        raise ConfigError("problem block is required")

    b = raw.get("bound", {})
    _positive(b, ("M", "lp_grid", "lp_refine", "max_terms"), "bound")
    _positive(b, ("lp_rounds", "audit_samples"), "bound", 0)
    if b.get("indicator", "lp") not in ("lp", "sdp"):
        raise ConfigError("bound.indicator must be 'lp' or 'sdp'")
    s = b.get("solver", {})
    if s.get("backend", "internal") not in ("internal", "cvxpy"):
        raise ConfigError("bound.solver.backend must be 'internal' or 'cvxpy'")
    for k in ("gap_tol", "feas_tol"):
        if k in s and s[k] <= 0:
            raise ConfigError(f"bound.solver.{k} must be positive")
    solver = SolverConfig(**{k: s[k] for k in s})
    step = BoundStepConfig(**{k: b[k] for k in ("sigma_floor", "lmi_margin") if k in b},
                           solver=solver)
    bkeys = ("M", "indicator", "sigma_b", "lp_grid", "lp_refine", "lp_rounds", "weight_floor",
             "max_terms", "audit_samples")
    bcfg = bd.BoundConfig(**{k: b[k] for k in bkeys if k in b}, threads=threads, seed=root,
                          step=step)
    if bcfg.sigma_b <= 0:
        raise ConfigError("bound.sigma_b must be positive")

    g = raw.get("grid", {})
    _positive(g, ("state_counts", "control_counts", "refine", "max_nodes"), "grid")
    if g.get("interpolation", "linear") not in ("linear", "nearest"):
        raise ConfigError("grid.interpolation must be 'linear' or 'nearest'")
    if g.get("quadrature", "auto") not in ("auto", "exact1d", "lattice"):
        raise ConfigError("grid.quadrature must be 'auto', 'exact1d' or 'lattice'")
    gcfg = go.GridConfig(**g)

    e = {"n_init": 100, "n_traj": 100, "reject_threshold": 0.1, "policy": "newton",
         **raw.get("eval", {})}
    _positive(e, ("n_init", "n_traj", "multistart", "max_iter", "grid_points",
                  "max_candidates"), "eval")
    if not 0.0 <= e["reject_threshold"] <= 1.0:
        raise ConfigError("eval.reject_threshold must lie in [0, 1]")
    pkeys = ("multistart", "max_iter", "grad_tol", "grid_points")
    try:
        pcfg = po.PolicyConfig(mode=e["policy"], **{k: e[k] for k in pkeys if k in e})
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from exc

    lq = {"systems": 10, "n": 3, "m": 3, "radius": 0.9, "noise": 0.001, "horizon": 5,
          "rho_s": 1.0, "rho_t": 0.1, "rho_u": 0.1, **raw.get("lqg", {})}
    _positive(lq, ("systems", "n", "m", "horizon"), "lqg")
    if not 0 < lq["radius"] < 1:
        raise ConfigError("lqg.radius must lie in (0, 1)")
    v = raw.get("validate", {})
    _positive(v, ("samples",), "validate")
    return RunConfig(raw, int(root), output, problem, bcfg, gcfg, e, pcfg, lq,
                     v.get("samples", 10_000))


def load_config(path: str | Path, **kw) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return parse_config(raw, **kw)


# ---------------------------------------------------------------------------
# commands

def _manifest(cfg: RunConfig, verb: str) -> dict:
    p = cfg.problem
    out = {"command": verb, "seed": cfg.seed}
    if p is not None:
        out.update({"problem.n": p.n, "problem.m": p.m, "problem.horizon": p.horizon,
                    "problem.components": p.kernel.n_components})
    return out


def _run_bound(cfg: RunConfig) -> bd.ValueBoundSequence:
    return bd.run_recursion(cfg.problem, cfg.bound)


def cmd_bound(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    try:
        seq = _run_bound(cfg)
    except bd.IndicatorError as exc:
        log.error("indicator bound failed: %s", exc)
        return EXIT_FAILURE
    cfg.output.mkdir(parents=True, exist_ok=True)
    seq.write(cfg.output)
    man = _manifest(cfg, "bound")
    man.update({"bound.M": cfg.bound.M, "bound.indicator": cfg.bound.indicator,
                "fallback": int(seq.fallback_used)})
    man.update(bd.sequence_manifest(seq))
    man["time.total"] = time.perf_counter() - t0
    bd.write_manifest(cfg.output / "manifest_bound.txt", man)
    return EXIT_FALLBACK if seq.fallback_used else EXIT_OK


def cmd_grid(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    values = go.dp_recursion(cfg.problem, cfg.grid)
    cfg.output.mkdir(parents=True, exist_ok=True)
    for vf in values:
        go.write_csv(vf, cfg.output / f"grid_k{vf.k}.csv")
    man = _manifest(cfg, "grid")
    man.update({"grid.nodes": values[0].grid.size, "grid.counts": list(values[0].grid.counts)})
    man["time.total"] = time.perf_counter() - t0
    bd.write_manifest(cfg.output / "manifest_grid.txt", man)
    return EXIT_OK


def _bound_policy(cfg: RunConfig, seq: bd.ValueBoundSequence, problem) -> po.BoundPolicy:
    return po.BoundPolicy(seq.values, problem, cfg.policy, derive_rng(cfg.seed, "policy"))


def cmd_compare_grid(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    p = cfg.problem
    try:
        seq = _run_bound(cfg)
    except bd.IndicatorError as exc:
        log.error("indicator bound failed: %s", exc)
        return EXIT_FAILURE
    values = go.dp_recursion(p, cfg.grid)
    nodes = values[0].grid.nodes
    ring = p.ring.contains(nodes)
    sat = np.minimum(np.asarray(seq.values[0](nodes), dtype=float), 1.0)
    gap = sat[ring] - values[0].values[ring]
    report = ev.compare(p, _bound_policy(cfg, seq, p), go.GridPolicy(p, values, cfg.grid),
                        cfg.eval["n_init"], cfg.eval["n_traj"], 0.0, cfg.seed,
                        label_a="bound", label_b="grid",
                        max_candidates=cfg.eval.get("max_candidates"))
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "comparison_grid.csv")
    ev.write_slice(out / "slice_k0.csv", nodes,
                   {"bound": np.asarray(seq.values[0](nodes), dtype=float),
                    "bound_saturated": sat, "grid": values[0].values})
    head = "n,m,N_s,N_u,M,value_gap_mean,value_gap_min,policy_diff_mean,policy_diff_se"
    sc, uc = values[0].grid.counts[0], cfg.grid.control_counts
    row = [p.n, p.m, sc, uc, cfg.bound.M, float(np.mean(gap)), float(np.min(gap)),
           report.mean_diff, report.diff_se]
    (out / "summary_grid.csv").write_text(head + "\n" + ",".join(bd._fmt(v) for v in row) + "\n")
    man = _manifest(cfg, "compare-grid")
    man.update({"fallback": int(seq.fallback_used), "value_gap.mean": float(np.mean(gap)),
                "value_gap.min": float(np.min(gap))})
    man.update({f"compare.{k}": v for k, v in report.summary().items()})
    man["time.total"] = time.perf_counter() - t0
    bd.write_manifest(out / "manifest_compare_grid.txt", man)
    return EXIT_FALLBACK if seq.fallback_used else EXIT_OK


def cmd_compare_lqg(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    lq = cfg.lqg
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    rows, man = [], _manifest(cfg, "compare-lqg")
    fallback = False
    for i in range(lq["systems"]):
        system = ev.random_stable_system(lq["n"], lq["m"], derive_rng(cfg.seed, "systems", i),
                                         radius=lq["radius"], noise=lq["noise"], seed=cfg.seed)
        p = ev.benchmark_problem(lq["n"], lq["m"], A=system.A, B=system.B, cov=system.cov,
                                 horizon=lq["horizon"], rho_s=lq["rho_s"], rho_t=lq["rho_t"],
                                 rho_u=lq["rho_u"])
        seq = bd.run_recursion(p, cfg.bound)
        fallback |= seq.fallback_used
        report = ev.compare(p, _bound_policy(cfg, seq, p), ev.lqg_controller(p),
                            cfg.eval["n_init"], cfg.eval["n_traj"], cfg.eval["reject_threshold"],
                            int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0]),
                            label_a="bound", label_b="lqg",
                            max_candidates=cfg.eval.get("max_candidates"))
        report.write_csv(out / f"comparison_lqg_{i}.csv")
        rows.append([i, system.spectral_radius, float(np.mean(report.rate_a)),
                     float(np.mean(report.rate_b)), report.mean_diff, report.diff_se,
                     report.candidates])
        man[f"system.{i}.mean_diff"] = report.mean_diff
        man[f"system.{i}.fallback"] = int(seq.fallback_used)
    diffs = np.array([r[4] for r in rows])
    se = float(np.std(diffs, ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else float("nan")
    head = "system,spectral_radius,rate_bound,rate_lqg,diff_mean,diff_se,candidates"
    lines = [head] + [",".join(bd._fmt(v) for v in r) for r in rows]
    (out / "summary_lqg.csv").write_text("\n".join(lines) + "\n")
    man.update({"lqg.n": lq["n"], "lqg.m": lq["m"], "lqg.systems": lq["systems"],
                "diff.mean": float(np.mean(diffs)), "diff.se": se,
                "diff.ci95_low": float(np.mean(diffs)) - 1.96 * se,
                "diff.ci95_high": float(np.mean(diffs)) + 1.96 * se,
                "fallback": int(fallback), "time.total": time.perf_counter() - t0})
    bd.write_manifest(out / "manifest_compare_lqg.txt", man)
    return EXIT_FALLBACK if fallback else EXIT_OK


def cmd_validate(cfg: RunConfig, values_dir: Path) -> int:
    T = cfg.problem.horizon
    files = [values_dir / f"value_k{k}.txt" for k in range(T + 1)]
    missing = [f for f in files if not f.is_file()]
    if missing:
        log.error("missing value file %s", missing[0])
        return EXIT_MISSING
    try:
        values = [load(f) for f in files]
    except ValueError as exc:
        log.error("unreadable value file: %s", exc)
        return EXIT_FAILURE
    if any(v.dim != cfg.problem.n for v in values):
        log.error("value file dimension differs from the problem")
        return EXIT_FAILURE
    seq = bd.ValueBoundSequence(values, [])
    rep = bd.validate_sequence(seq, cfg.problem, cfg.validate_samples,
                               derive_rng(cfg.seed, "validate"))
    man = _manifest(cfg, "validate")
    man.update({"samples": rep.samples, "violations": rep.violations,
                "saturated.mean": rep.saturated_mean, "saturated.min": rep.saturated_min})
    for s in rep.steps:
        man[f"step.{s.k}.dynamics_worst"] = s.dynamics_worst
        man[f"step.{s.k}.dynamics_violations"] = s.dynamics_violations
        man[f"step.{s.k}.target_worst"] = s.target_worst
        man[f"step.{s.k}.target_violations"] = s.target_violations
    cfg.output.mkdir(parents=True, exist_ok=True)
    bd.write_manifest(cfg.output / "audit.txt", man)
    if not rep.ok:
        log.error("%d sampled constraint violations", rep.violations)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

VERBS = ("bound", "grid", "compare-grid", "compare-lqg", "validate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbfreach", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="root seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for SDP terms")
    ap.add_argument("--values", help="directory of value files for validate "
                                     "(default: the output directory)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        log.error("--threads must be at least 1")
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads,
                          need_problem=args.verb != "compare-lqg")
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (ConfigError, TypeError) as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    try:
        if args.verb == "bound":
            return cmd_bound(cfg)
        if args.verb == "grid":
            return cmd_grid(cfg)
        if args.verb == "compare-grid":
            return cmd_compare_grid(cfg)
        if args.verb == "compare-lqg":
            return cmd_compare_lqg(cfg)
        return cmd_validate(cfg, Path(args.values) if args.values else cfg.output)
    except go.GridCapError as exc:
        log.error("%s", exc)
        return EXIT_GRID_CAP
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
