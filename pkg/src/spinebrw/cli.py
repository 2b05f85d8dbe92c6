"""Command-line harness: config parsing, experiment orchestration, CSV
emission, and the power-law fit that extracts the polynomial exponent and
prefactor from a sweep of estimates."""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .brw import DEFAULT_CAP, fpt_pmf
from .estimator import (AlgoParams, TruncationError, estimate_cdf,
                        plan_sample_size, run_batch)
from .model import (BrwModel, IsotropicGaussian, NumericFault, OffspringLaw,
                    extinction_prob, gamma_rate)
from .ratefn import InfeasibleError, derive_profile, solve_c1
from .upperdev import UpperDevProblem, solve_T

DEFAULT_OMEGAS = (1.0, 1.25, 1.5, 1.75, 2.0)


class ConfigError(Exception):
    """One or more configuration fields failed validation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    dimension: int = 3
    offspring: tuple = ((1, 0.9144), (3, 0.0856))
    jump: str = "gaussian"
    sigma: float = 1.0
    x: float = 100.0
    t: int = 0
    chat1_factor: float = 1.2
    omega: float = 1.5
    samples: int = 100_000
    seed: int = 1
    threads: int = 0
    K: int = 1
    r: float = -1.0  # negative means the default dimension/2 + 1
    horizon: int = 0  # 0 means floor(x / chat1)
    cap: int = DEFAULT_CAP
    omegas: tuple = DEFAULT_OMEGAS
    out: str = "-"

    @property
    def planner_r(self) -> float:
        return self.r if self.r >= 0 else self.dimension / 2.0 + 1.0

    @property
    def effective_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


def parse_pmf(text: str):
    entries = []
    for piece in text.replace(";", ",").split(","):
        piece = piece.strip()
        if not piece:
            continue
        if ":" not in piece:
            raise ValueError(f"pmf entry {piece!r} is not count:prob")
        k, p = piece.split(":", 1)
        entries.append((int(k.strip()), float(p.strip())))
    if not entries:
        raise ValueError("empty pmf")
    return tuple(entries)


def _parse_omegas(text: str):
    vals = tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    if not vals:
        raise ValueError("empty omega grid")
    return vals


_PARSERS = {
    "dimension": int,
    "offspring": parse_pmf,
    "jump": lambda s: s.strip().lower(),
    "sigma": float,
    "x": float,
    "t": int,
    "chat1_factor": float,
    "omega": float,
    "samples": int,
    "seed": int,
    "threads": int,
    "K": int,
    "r": float,
    "horizon": int,
    "cap": int,
    "omegas": _parse_omegas,
    "out": str,
}


def load_config(text: str) -> RunConfig:
    """Parse the key = value grammar (# comments, [section] lines allowed)."""
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value, got {raw!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            problems.append(f"key {key!r}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = replace(RunConfig(), **values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    problems = []
    if cfg.dimension < 1:
        problems.append("dimension: must be a positive integer")
    try:
        OffspringLaw(cfg.offspring)
    except ValueError as exc:
        problems.append(f"offspring: {exc}")
    if cfg.jump != "gaussian":
        problems.append(f"jump: unknown type {cfg.jump!r} (supported: gaussian)")
    if cfg.sigma <= 0:
        problems.append("sigma: must be positive")
    if cfg.x <= 1:
        problems.append("x: must exceed the target-ball radius 1")
    if cfg.t < 0:
        problems.append("t: must be nonnegative")
    if cfg.omega < 1:
        problems.append("omega: must be >= 1")
    if any(om < 1 for om in cfg.omegas):
        problems.append("omegas: every value must be >= 1")
    if cfg.samples < 1:
        problems.append("samples: must be >= 1")
    if cfg.K < 1:
        problems.append("K: must be >= 1")
    if cfg.threads < 0:
        problems.append("threads: must be >= 0 (0 = auto)")
    if cfg.horizon < 0:
        problems.append("horizon: must be >= 0 (0 = auto)")
    if cfg.cap < 1:
        problems.append("cap: must be >= 1")
    if problems:
        raise ConfigError(problems)


def build_model(cfg: RunConfig) -> BrwModel:
    law = OffspringLaw(cfg.offspring)
    jump = IsotropicGaussian(sigma=cfg.sigma, dim=cfg.dimension)
    return BrwModel(dim=cfg.dimension, offspring=law, jump=jump)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_csv(out: str, meta: dict, columns, rows) -> None:
    lines = [f"# {k} = {_fmt(v)}" for k, v in meta.items()]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _meta(cfg: RunConfig, command: str) -> dict:
    meta = {"command": command}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "offspring":
            v = ",".join(f"{k}:{p:g}" for k, p in v)
        elif f.name == "omegas":
            v = ",".join(f"{om:g}" for om in v)
        meta[f.name] = v
    return meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

ESTIMATE_COLUMNS = ("x", "n", "t", "chat1", "estimate", "stderr", "N",
                    "acceptance_rate", "truncations", "runtime_seconds",
                    "seed")


def _estimate_row(cfg, model, profile, x, t, omega, samples, seed):
    params = AlgoParams.from_model(model, profile, x, t=t, omega=omega,
                                   decoration_cap=cfg.cap)
    start = time.perf_counter()
    stats = run_batch(model, profile, params, samples, seed,
                      threads=cfg.effective_threads)
    runtime = time.perf_counter() - start
    row = (x, params.n, t, profile.chat1, stats.mean, stats.stderr, samples,
           stats.acceptance_rate, stats.truncated, runtime, seed)
    return params, stats, row


def cmd_estimate(cfg: RunConfig) -> None:
    model = build_model(cfg)
    profile = derive_profile(model, cfg.chat1_factor)
    _, _, row = _estimate_row(cfg, model, profile, cfg.x, cfg.t, cfg.omega,
                              cfg.samples, cfg.seed)
    write_csv(cfg.out, _meta(cfg, "estimate"), ESTIMATE_COLUMNS, [row])


CDF_COLUMNS = ("x", "K", "term", "n", "chat1", "omega", "estimate", "stderr",
               "N", "seed")


def cmd_cdf(cfg: RunConfig) -> None:
    model = build_model(cfg)
    profile = derive_profile(model, cfg.chat1_factor)
    est = estimate_cdf(model, profile, cfg.x, cfg.K, cfg.samples, cfg.seed,
                       omega=cfg.omega, threads=cfg.effective_threads,
                       decoration_cap=cfg.cap)
    rows = []
    for t, stats in enumerate(est.terms):
        n = math.floor(cfg.x / profile.chat1) - t
        rows.append((cfg.x, cfg.K, str(t), n, profile.chat1, cfg.omega,
                     stats.mean, stats.stderr, cfg.samples, cfg.seed))
    rows.append((cfg.x, cfg.K, "cdf", math.floor(cfg.x / profile.chat1),
                 profile.chat1, cfg.omega, est.value, est.stderr,
                 cfg.samples, cfg.seed))
    write_csv(cfg.out, _meta(cfg, "cdf"), CDF_COLUMNS, rows)


BRUTE_COLUMNS = ("x", "horizon", "runs", "generation", "count", "pmf",
                 "stderr", "truncated_runs", "cap", "seed")


def cmd_brute(cfg: RunConfig) -> None:
    model = build_model(cfg)
    if cfg.horizon > 0:
        horizon = cfg.horizon
    else:
        profile = derive_profile(model, cfg.chat1_factor)
        horizon = math.floor(cfg.x / profile.chat1)
    est = fpt_pmf(model, cfg.x, horizon, cfg.samples, cfg.seed, cap=cfg.cap,
                  threads=cfg.effective_threads)
    rows = []
    for g in range(horizon + 1):
        if est.hit_counts[g] == 0:
            continue
        rows.append((cfg.x, horizon, est.valid_runs, g,
                     int(est.hit_counts[g]), est.pmf(g), est.pmf_stderr(g),
                     est.truncated, cfg.cap, cfg.seed))
    write_csv(cfg.out, _meta(cfg, "brute"), BRUTE_COLUMNS, rows)


SCAN_COLUMNS = ("omega", "x", "n", "t", "chat1", "R1", "R2", "R3", "R4", "R5",
                "estimate", "stderr", "N", "acceptance_rate", "seed")


def cmd_omega_scan(cfg: RunConfig) -> None:
    model = build_model(cfg)
    profile = derive_profile(model, cfg.chat1_factor)
    rows = []
    for omega in cfg.omegas:
        params = AlgoParams.from_model(model, profile, cfg.x, t=cfg.t,
                                       omega=omega, decoration_cap=cfg.cap)
        stats = run_batch(model, profile, params, cfg.samples, cfg.seed,
                          threads=cfg.effective_threads)
        rows.append((omega, cfg.x, params.n, cfg.t, profile.chat1,
                     params.R1, params.R2, params.R3, params.R4, params.R5,
                     stats.mean, stats.stderr, cfg.samples,
                     stats.acceptance_rate, cfg.seed))
    write_csv(cfg.out, _meta(cfg, "omega-scan"), SCAN_COLUMNS, rows)


@dataclass(frozen=True)
class FitResult:
    """Ordinary least squares fit of the transformed decay law.

    The response ln(estimate) + (x/chat1) * (I(chat1) - log rho) regressed
    on ln n has slope -d/2 under the predicted law; exp(intercept) is the
    proportionality prefactor.
    """

    slope: float
    intercept: float
    beta: float
    residual_rms: float
    x_min: float
    x_max: float
    points: int


def fit_power_law(xs, estimates, profile, t: int = 0,
                  ns=None) -> FitResult:
    xs = np.asarray(xs, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    if np.any(estimates <= 0):
        raise ValueError("every estimate must be positive to fit logs")
    if xs.size < 2:
        raise ValueError("need at least two points to fit")
    if ns is None:
        ns = np.floor(xs / profile.chat1) - t
    ns = np.asarray(ns, dtype=np.float64)
    y = np.log(estimates) + (xs / profile.chat1) * profile.decay_rate
    X = np.log(ns)
    A = np.column_stack([X, np.ones_like(X)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = y - A @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return FitResult(slope=slope, intercept=intercept,
                     beta=math.exp(intercept), residual_rms=rms,
                     x_min=float(xs.min()), x_max=float(xs.max()),
                     points=int(xs.size))


def read_estimate_csv(path: str):
    """Columns x and estimate (and optionally n, t) from an emitted CSV."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh
                 if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"fit input {path!r} has no data")
    header = lines[0].split(",")
    try:
        ix = header.index("x")
        ie = header.index("estimate")
    except ValueError:
        raise ConfigError(
            f"fit input {path!r} must have columns x and estimate")
    in_ = header.index("n") if "n" in header else None
    rows = [ln.split(",") for ln in lines[1:]]
    xs = np.array([float(r[ix]) for r in rows])
    est = np.array([float(r[ie]) for r in rows])
    ns = (np.array([float(r[in_]) for r in rows])
          if in_ is not None else None)
    return xs, est, ns


FIT_COLUMNS = ("slope", "intercept", "beta", "residual_rms", "x_min",
               "x_max", "points", "chat1", "decay_rate")


def cmd_fit(cfg: RunConfig, input_path: str) -> None:
    model = build_model(cfg)
    profile = derive_profile(model, cfg.chat1_factor)
    xs, est, ns = read_estimate_csv(input_path)
    fit = fit_power_law(xs, est, profile, t=cfg.t, ns=ns)
    row = (fit.slope, fit.intercept, fit.beta, fit.residual_rms, fit.x_min,
           fit.x_max, fit.points, profile.chat1, profile.decay_rate)
    write_csv(cfg.out, _meta(cfg, "fit"), FIT_COLUMNS, [row])


UPPER_COLUMNS = ("chat1", "gamma", "T", "alpha_star", "active_constraint",
                 "feasible")


def cmd_upper_rate(cfg: RunConfig) -> None:
    if cfg.chat1_factor >= 1:
        raise ConfigError(
            "chat1_factor: must be < 1 for the slow-passage rate")
    model = build_model(cfg)
    rho = model.rho
    if rho <= 1:
        raise ConfigError("offspring: mean must exceed 1 (supercritical)")
    log_rho = math.log(rho)
    c1 = solve_c1(model.jump, log_rho)
    gamma = gamma_rate(model.offspring)
    problem = UpperDevProblem(chat1=cfg.chat1_factor * c1, gamma=gamma,
                              log_rho=log_rho, c1=c1, jump=model.jump)
    sol = solve_T(problem)
    row = (problem.chat1, gamma, sol.value, sol.alpha_star,
           sol.active_constraint, sol.feasible)
    write_csv(cfg.out, _meta(cfg, "upper-rate"), UPPER_COLUMNS, [row])


def cmd_rate_info(cfg: RunConfig) -> None:
    model = build_model(cfg)
    profile = derive_profile(model, cfg.chat1_factor)
    params = AlgoParams.from_model(model, profile, cfg.x, t=cfg.t,
                                   omega=cfg.omega, decoration_cap=cfg.cap)
    q = extinction_prob(model.offspring)
    gamma = gamma_rate(model.offspring)
    pairs = [
        ("rho", profile.rho), ("log_rho", profile.log_rho),
        ("extinction_prob", q), ("gamma", gamma),
        ("c1", profile.c1), ("chat1", profile.chat1),
        ("chat2", profile.chat2), ("I_chat1", profile.I_chat1),
        ("psi_chat2", profile.psi_chat2), ("cbar1", profile.cbar1),
        ("eps1", profile.eps1), ("decay_rate", profile.decay_rate),
        ("n", params.n), ("R1", params.R1), ("R2", params.R2),
        ("R3", params.R3), ("R4", params.R4), ("R5", params.R5),
        ("w2", params.w2), ("w3", params.w3), ("w5", params.w5),
        ("e11_offset", params.e11_offset),
        ("planned_samples_eps0.1_delta0.05",
         plan_sample_size(0.1, 0.05, cfg.x, cfg.planner_r)),
    ]
    write_csv(cfg.out, _meta(cfg, "rate-info"), ("name", "value"),
              [(k, v) for k, v in pairs])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_FLAGS = ("dimension", "offspring", "jump", "sigma", "x", "t",
          "chat1_factor", "omega", "samples", "seed", "threads", "K", "r",
          "horizon", "cap", "omegas", "out")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a key = value config file")
    for name in _FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinebrw",
        description="Rare-event first-passage estimators for supercritical "
                    "branching random walks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("estimate", "cdf", "brute", "omega-scan", "upper-rate",
                 "rate-info"):
        _add_common_flags(sub.add_parser(name))
    fit = sub.add_parser("fit")
    _add_common_flags(fit)
    fit.add_argument("--input", required=True,
                     help="CSV of estimate rows to fit")
    return parser


def config_from_args(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"config: {exc}")
        cfg = load_config(text)
    else:
        cfg = RunConfig()
    overrides = {}
    problems = []
    for name in _FLAGS:
        raw = getattr(args, name, None)
        if raw is None:
            continue
        try:
            overrides[name] = _PARSERS[name](raw)
        except ValueError as exc:
            problems.append(f"--{name.replace('_', '-')}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = replace(cfg, **overrides)
    validate_config(cfg)
    return cfg


_COMMANDS = {
    "estimate": cmd_estimate,
    "cdf": cmd_cdf,
    "brute": cmd_brute,
    "omega-scan": cmd_omega_scan,
    "upper-rate": cmd_upper_rate,
    "rate-info": cmd_rate_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = config_from_args(args)
        if args.command == "fit":
            cmd_fit(cfg, args.input)
        else:
            _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except (TruncationError, NumericFault, InfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # Invariant violations raised by model/params construction are
        # configuration problems, not numeric failures.
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
