"""Experiment configuration, orchestration and result emission.

Configs are strict JSON: unknown keys are rejected anywhere, since a typo in
a balancing constant would silently invalidate a theorem check.  Every run
writes a CSV trace plus a JSON summary carrying a reproducibility block
(seed, config hash, build id) and per-checker verdicts; the process exit
status is nonzero iff any enabled checker failed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .balancer import ScheduleKind, StepSchedule
from .core import BiasVector, LoadVector, ProblemDims, RandomSource
from .deterministic import (
    check_balance_convergence,
    check_lagrangian_identity,
    check_switch_direction,
    simulate_fixed_scores,
    trace_to_csv,
    ubar,
)
from .distributions import AffinityDistributionSet, from_spec
from .errors import ParseError, ValidationError
from .router import RawScoreMatrix, softmax_affinities
from .stochastic import (
    check_gradient_moments,
    edge_weights_quadrature,
    expected_loss_minimizer,
    pi_quadrature,
    regret_experiment,
    strong_convexity_estimate,
)

KINDS = (
    "deterministic_run",
    "balance_check",
    "moment_check",
    "hessian_check",
    "regret_sweep",
    "schedule_compare",
)

_SCHEDULE_NAMES = {k.value: k for k in ScheduleKind}

# Allowed keys per experiment kind (beyond the common ones).
_COMMON_KEYS = {"kind", "seed", "out_dir"}
_KIND_KEYS = {
    "deterministic_run": {"dims", "schedule", "iterations", "zero_sum"},
    "balance_check": {"dims", "u_fraction", "budget", "instances", "score_scale"},
    "moment_check": {"distributions", "T", "K", "replicas", "bias"},
    "hessian_check": {"distributions", "K", "bias", "directions", "fd_step"},
    "regret_sweep": {
        "distributions", "T", "K", "rounds", "replicas", "kappa",
        "grid_points", "checkpoints",
    },
    "schedule_compare": {"dims", "u", "iterations"},
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    raw: dict
    out_dir: Path | None = None
    params: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ValidationError(key, "missing")
    return cfg[key]


def _parse_dims(d: dict) -> ProblemDims:
    extra = set(d) - {"T", "E", "K"}
    if extra:
        raise ValidationError(sorted(extra)[0], "unknown key in dims")
    try:
        return ProblemDims(T=int(_need(d, "T")), E=int(_need(d, "E")), K=int(_need(d, "K")))
    except ValidationError:
        raise
    except Exception as exc:
        raise ValidationError("K" if "K" in str(exc) else "dims", str(exc)) from exc


def _parse_schedule(d: dict) -> StepSchedule:
    extra = set(d) - {"kind", "u"}
    if extra:
        raise ValidationError(sorted(extra)[0], "unknown key in schedule")
    name = _need(d, "kind")
    if name not in _SCHEDULE_NAMES:
        raise ValidationError("schedule.kind", f"unknown schedule {name!r}")
    return StepSchedule(kind=_SCHEDULE_NAMES[name], u=float(_need(d, "u")))


def load_config(path) -> ExperimentConfig:
    """Parse and strictly validate a JSON experiment config."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("<root>", "config must be a JSON object")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ValidationError("kind", f"must be one of {KINDS}, got {kind!r}")
    allowed = _COMMON_KEYS | _KIND_KEYS[kind]
    extra = set(raw) - allowed
    if extra:
        raise ValidationError(sorted(extra)[0], "unknown key")
    seed = int(raw.get("seed", 0))
    if seed < 0 or seed >= 2**64:
        raise ValidationError("seed", "must be a 64-bit unsigned integer")

    params: dict = {}
    if kind in ("deterministic_run", "balance_check", "schedule_compare"):
        params["dims"] = _parse_dims(_need(raw, "dims"))
    if kind == "deterministic_run":
        params["schedule"] = _parse_schedule(_need(raw, "schedule"))
        params["iterations"] = int(_need(raw, "iterations"))
        params["zero_sum"] = bool(raw.get("zero_sum", False))
    elif kind == "balance_check":
        if params["dims"].K != 1:
            raise ValidationError("K", "balance_check requires K=1")
        params["u_fraction"] = float(raw.get("u_fraction", 0.9))
        params["budget"] = raw.get("budget")
        params["instances"] = int(raw.get("instances", 1))
        params["score_scale"] = float(raw.get("score_scale", 1.0))
    elif kind == "schedule_compare":
        params["u"] = float(_need(raw, "u"))
        params["iterations"] = int(_need(raw, "iterations"))
    elif kind in ("moment_check", "hessian_check", "regret_sweep"):
        dist_specs = _need(raw, "distributions")
        params["dist"] = AffinityDistributionSet(
            tuple(from_spec(s) for s in dist_specs)
        )
        params["K"] = int(_need(raw, "K"))
        if params["K"] > params["dist"].E:
            raise ValidationError("K", "K exceeds the number of distributions")
        if kind == "moment_check":
            params["T"] = int(_need(raw, "T"))
            params["replicas"] = int(raw.get("replicas", 10_000))
            params["bias"] = np.asarray(
                raw.get("bias", [0.0] * params["dist"].E), dtype=np.float64
            )
        elif kind == "hessian_check":
            params["bias"] = np.asarray(
                raw.get("bias", [0.0] * params["dist"].E), dtype=np.float64
            )
            params["directions"] = int(raw.get("directions", 20))
            params["fd_step"] = float(raw.get("fd_step", 1e-3))
        else:
            params["T"] = int(_need(raw, "T"))
            params["rounds"] = int(raw.get("rounds", 10_000))
            params["replicas"] = int(raw.get("replicas", 32))
            params["kappa"] = float(raw.get("kappa", 0.1))
            params["grid_points"] = int(raw.get("grid_points", 200))
            params["checkpoints"] = [int(c) for c in raw.get(
                "checkpoints", [100, 1000, 10_000]
            )]

    out_dir = Path(raw["out_dir"]) if "out_dir" in raw else None
    return ExperimentConfig(kind=kind, seed=seed, raw=raw, out_dir=out_dir, params=params)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def report_imbalance(loads: LoadVector, L: float, normalized: bool = False) -> float:
    """Average absolute load deviation from the target, optionally / L."""
    dev = float(np.abs(loads.counts - L).mean())
    return dev / L if normalized else dev


def _imbalance_from_counts(counts: np.ndarray, L: float) -> float:
    return float(np.abs(counts - L).mean())


# ---------------------------------------------------------------------------
# Experiment handlers: each returns (verdicts, summary_extra) and writes CSVs
# ---------------------------------------------------------------------------

def _seeded_affinities(dims: ProblemDims, seed: int, scale: float = 1.0):
    rng = RandomSource(seed, stream=1).generator()
    raw = RawScoreMatrix(scale * rng.standard_normal((dims.T, dims.E)))
    return softmax_affinities(raw)


def _run_deterministic(cfg: ExperimentConfig, out: Path):
    dims: ProblemDims = cfg.params["dims"]
    sched: StepSchedule = cfg.params["schedule"]
    gamma = _seeded_affinities(dims, cfg.seed)
    trace = simulate_fixed_scores(
        gamma, sched, cfg.params["iterations"], K=dims.K,
        zero_sum=cfg.params["zero_sum"],
    )
    trace_to_csv(trace, out / "trace.csv")
    verdicts, extra = {}, {}
    if dims.K == 1:
        residuals = check_lagrangian_identity(trace)
        lag_scale = np.array(
            [1.0 + abs(s.lagrangian.value) for s in trace.steps[:-1]]
        )
        verdicts["theorem1"] = bool(np.all(residuals <= 1e-9 * lag_scale))
        extra["max_identity_residual"] = float(residuals.max()) if len(residuals) else 0.0
        if sched.kind is ScheduleKind.DEEPSEEK_SIGN:
            violations = 0
            audited = 0
            for m in range(len(trace.steps) - 1):
                a, b = trace.steps[m], trace.steps[m + 1]
                if a.tie_flag or b.tie_flag:
                    continue
                for chk in check_switch_direction(b.switches, a.designations, sched.u):
                    audited += 1
                    if not chk.ok:
                        violations += 1
            verdicts["theorem2"] = violations == 0
            extra["switches_audited"] = audited
    return verdicts, extra


def _balance_one(seed: int, dims_tuple: tuple[int, int, int], score_scale: float,
                 u_fraction: float, budget):
    dims = ProblemDims(*dims_tuple)
    gamma = _seeded_affinities(dims, seed, score_scale)
    u_bar = ubar(gamma)
    u = u_fraction * u_bar
    if budget is None:
        budget = max(10 * dims.T * dims.E, math.ceil(2.5 / u) + 100)
    report = check_balance_convergence(gamma, u, budget=int(budget))
    ok = report.converged and report.stayed and report.load_step_ok
    return {
        "seed": seed,
        "u": u,
        "ubar": u_bar,
        "converged": report.converged,
        "stayed": report.stayed,
        "load_step_ok": report.load_step_ok,
        "max_load_step": report.max_load_step,
        "iterations_run": report.iterations_run,
        "any_tie": report.any_tie,
        "pass": ok,
    }


def _run_balance(cfg: ExperimentConfig, out: Path, parallel: int = 1):
    dims: ProblemDims = cfg.params["dims"]
    instances = cfg.params["instances"]
    seeds = [cfg.seed + i for i in range(instances)]
    args = [
        (s, (dims.T, dims.E, dims.K), cfg.params["score_scale"],
         cfg.params["u_fraction"], cfg.params["budget"])
        for s in seeds
    ]
    if parallel > 1 and instances > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_balance_one_star, args))
    else:
        rows = [_balance_one(*a) for a in args]
    with open(out / "balance.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    verdicts = {"theorem3": all(r["pass"] for r in rows)}
    return verdicts, {"instances": instances, "failures": [r["seed"] for r in rows if not r["pass"]]}


def _balance_one_star(a):
    return _balance_one(*a)


def _run_moment(cfg: ExperimentConfig, out: Path):
    dist: AffinityDistributionSet = cfg.params["dist"]
    p = BiasVector(cfg.params["bias"])
    rng = RandomSource(cfg.seed, stream=2).generator()
    report = check_gradient_moments(
        dist, p, cfg.params["K"], cfg.params["T"], cfg.params["replicas"], rng
    )
    with open(out / "moments.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "pi", "expected_mean", "empirical_mean", "mean_z"])
        for k in range(dist.E):
            writer.writerow([
                k, f"{report.pi[k]:.17g}", f"{report.expected_mean[k]:.17g}",
                f"{report.empirical_mean[k]:.17g}", f"{report.mean_z[k]:.17g}",
            ])
    verdicts = {
        "mean_unbiased": bool(np.abs(report.mean_z).max() <= 4.0),
        "variance_formula": abs(report.var_z) <= 4.0,
        "second_moment_formula": abs(report.second_moment_z) <= 4.0,
    }
    extra = {
        "max_abs_z": report.max_abs_z,
        "var_z": report.var_z,
        "second_moment_z": report.second_moment_z,
    }
    return verdicts, extra


def _run_hessian(cfg: ExperimentConfig, out: Path):
    dist: AffinityDistributionSet = cfg.params["dist"]
    K = cfg.params["K"]
    p = BiasVector(cfg.params["bias"])
    h = cfg.params["fd_step"]
    rng = RandomSource(cfg.seed, stream=3).generator()
    weights = edge_weights_quadrature(dist, p, K)
    rel_errors = []
    for _ in range(cfg.params["directions"]):
        delta = rng.standard_normal(dist.E)
        delta -= delta.mean()
        delta /= np.linalg.norm(delta)
        quad_form = weights.quadratic_form(delta)
        dplus = pi_quadrature(dist, BiasVector(p.values + h * delta), K).pi
        dminus = pi_quadrature(dist, BiasVector(p.values - h * delta), K).pi
        fd = float(delta @ (dplus - dminus)) / (2.0 * h)
        rel_errors.append(abs(quad_form - fd) / max(abs(fd), 1e-12))
    rel_errors = np.array(rel_errors)
    with open(out / "hessian.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["direction", "relative_error"])
        for i, e in enumerate(rel_errors):
            writer.writerow([i, f"{e:.17g}"])
    verdicts = {"hessian_identity": bool(np.all(rel_errors <= 1e-3))}
    return verdicts, {"max_relative_error": float(rel_errors.max())}


def _run_regret(cfg: ExperimentConfig, out: Path):
    dist: AffinityDistributionSet = cfg.params["dist"]
    T, K = cfg.params["T"], cfg.params["K"]
    E = dist.E
    L = K * T / E
    kappa = cfg.params["kappa"]
    rng = RandomSource(cfg.seed, stream=4).generator()
    sc = strong_convexity_estimate(dist, K, kappa, T, cfg.params["grid_points"], rng)
    p_star = expected_loss_minimizer(dist, K, T, L)
    acct = regret_experiment(
        dist, T, K, sc.mu, p_star, cfg.params["rounds"], cfg.params["replicas"],
        rng, kappa=kappa,
    )
    with open(out / "regret.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "mean_regret", "bound", "diam_p", "s_n"])
        for n in range(acct.rounds):
            writer.writerow([
                n + 1,
                f"{acct.mean_cum_regret[n]:.17g}",
                f"{acct.bound[n]:.17g}",
                f"{acct.mean_diam[n]:.17g}",
                f"{acct.s_n_proxy[n]:.17g}",
            ])
    checkpoints = [c for c in cfg.params["checkpoints"] if c <= acct.rounds]
    cp_ok = {
        str(c): bool(acct.mean_cum_regret[c - 1] <= acct.bound[c - 1])
        for c in checkpoints
    }
    ratios = [
        acct.mean_cum_regret[c - 1] / (1.0 + math.log(c)) for c in checkpoints
    ]
    nonincreasing = all(b <= a * (1.0 + 1e-9) for a, b in zip(ratios, ratios[1:]))
    verdicts = {
        "regret_bound_checkpoints": all(cp_ok.values()),
        "regret_ratio_nonincreasing": nonincreasing,
    }
    extra = {
        "mu_hat": sc.mu,
        "c_hat": sc.c_hat,
        "sigma2": acct.sigma2,
        "p_star": [float(v) for v in p_star.values],
        "checkpoint_verdicts": cp_ok,
        "diam_violation_rounds": acct.diam_violations,
    }
    return verdicts, extra


def _run_schedule_compare(cfg: ExperimentConfig, out: Path):
    dims: ProblemDims = cfg.params["dims"]
    gamma = _seeded_affinities(dims, cfg.seed)
    L = dims.target_load
    kinds = [ScheduleKind.DEEPSEEK_SIGN, ScheduleKind.INVERSE_N, ScheduleKind.INVERSE_SQRT_N]
    traces = {
        k.value: simulate_fixed_scores(
            gamma, StepSchedule(kind=k, u=cfg.params["u"]),
            cfg.params["iterations"], K=dims.K,
        )
        for k in kinds
    }
    with open(out / "schedule_compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["n"]
        for name in traces:
            header += [f"imbalance_{name}", f"imbalance_norm_{name}"]
        writer.writerow(header)
        for i in range(cfg.params["iterations"]):
            row = [i + 1]
            for name, trace in traces.items():
                dev = _imbalance_from_counts(trace.steps[i].loads, L)
                row += [f"{dev:.17g}", f"{dev / L:.17g}"]
            writer.writerow(row)
    return {}, {"schedules": list(traces)}


_HANDLERS = {
    "deterministic_run": _run_deterministic,
    "moment_check": _run_moment,
    "hessian_check": _run_hessian,
    "regret_sweep": _run_regret,
    "schedule_compare": _run_schedule_compare,
}


def run(cfg: ExperimentConfig, out_dir=None, parallel: int = 1) -> int:
    """Execute one experiment; write artifacts; return the exit status."""
    out = Path(out_dir) if out_dir is not None else (cfg.out_dir or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind == "balance_check":
        verdicts, extra = _run_balance(cfg, out, parallel=parallel)
    else:
        verdicts, extra = _HANDLERS[cfg.kind](cfg, out)
    summary = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "build": __version__,
        "verdicts": {k: bool(v) for k, v in verdicts.items()},
        **extra,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0 if all(verdicts.values()) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="alflb",
        description="Load-balancing primal-dual simulator and verification lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind.replace("_", "-"), help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, help="path to a JSON config")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--parallel", type=int, default=1,
                        help="fan independent instances over N processes")
        sp.add_argument("--strict", action="store_true",
                        help="strict config validation (always on; accepted for compat)")
        sp.set_defaults(kind=kind)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if cfg.kind != args.kind:
        print(
            f"config error: kind: config says {cfg.kind!r}, "
            f"subcommand is {args.kind!r}",
            file=sys.stderr,
        )
        return 2
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
        cfg.seed = args.seed
    return run(cfg, out_dir=args.out, parallel=args.parallel)


if __name__ == "__main__":
    sys.exit(main())
