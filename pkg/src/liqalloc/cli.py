"""Command-line front end.

Configuration is a flat list of dotted key = value pairs, read from an
optional file and overridden by trailing command-line arguments.  Every
command echoes the fully resolved configuration so runs are
reproducible from their logs alone, and writes it next to its outputs
as resolved.cfg.

Exit codes: 0 on success, 2 for configuration problems (unknown keys,
unparseable values, missing required keys or files), 1 for runtime
failures during a solve.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext

import numpy as np

from .evaluate import (
    benchmark_matrix,
    distribution_evolution,
    evaluate_policy,
    liquidity_blind_comparison,
    sweep,
    write_benchmark_csv,
    write_comparison_csv,
    write_evolution_csv,
    write_sweep_csv,
)
from .liquidity import LiquidityParams, PowerLaw, ProportionalTc, ZeroCost
from .lsmc import (
    ControlGrid,
    SolveConfig,
    load_policy,
    save_policy,
    solve_from_config,
    solve_with_iteration,
)
from .model import (
    IidLognormalModel,
    Var1Model,
    calibrate_var1,
    load_price_csv,
    simulate,
    synthetic_var1,
)
from .utility import Cara, Crra

COMMANDS = (
    "solve",
    "evaluate",
    "compare-blind",
    "evolution",
    "sweep",
    "calibrate",
    "benchmark",
)

THREADS_ENV = "LIQALLOC_THREADS"
MODEL_FORMAT = "liqalloc-var1-v1"


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_floats(raw: str):
    return tuple(float(part) for part in raw.split(",") if part.strip())


def _parse_ints(raw: str):
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _choice(*options):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return parse


# key -> (parser, default).  Defaults are the monthly desk-scale setup:
# 12 monthly periods, rf = 0.012/12 per period, w0 = 1e8.  grid.step has
# no default and must be set explicitly.
REGISTRY = {
    "utility.kind": (_choice("crra", "cara"), "cara"),
    "utility.gamma": (float, 5.0),
    "model.kind": (_choice("iid", "var1", "var1-synthetic"), "iid"),
    "model.mean": (float, 0.03),
    "model.vol": (float, 0.15),
    "model.period_length": (float, 1.0 / 12.0),
    "model.file": (str, None),
    "rates.rf": (float, 0.012 / 12.0),
    "horizon.steps": (int, 12),
    "wealth.w0": (float, 1e8),
    "wealth.s0": (float, 200.0),
    "grid.step": (float, None),
    "paths.train": (int, 100_000),
    "paths.eval": (int, 10_000),
    "seed.train": (int, 0),
    "seed.eval": (int, 1),
    "iteration.count": (int, 1),
    "algorithm": (_choice("per-level", "klp"), "per-level"),
    "cost.kind": (_choice("zero", "proportional", "power-law"), "zero"),
    "cost.tc_rate": (float, 0.0),
    "cost.sigma_day": (float, 2.5),
    "cost.vol_day": (float, 120e6),
    "cost.theta": (float, 988e6),
    "cost.delta": (float, 5.0 / 390.0),
    "cost.mi_coeff": (float, 0.314),
    "cost.lc_coeff": (float, 0.142),
    "basis.degree": (int, 2),
    "basis.cross_terms": (_parse_bool, True),
    "rebalance.tol": (float, 1e-4),
    "rebalance.max_iter": (int, 50),
    "sweep.axis": (str, None),
    "sweep.values": (_parse_floats, None),
    "benchmark.m_values": (_parse_ints, (1_000, 10_000, 100_000)),
    "benchmark.i_max": (int, 3),
    "calibrate.csv": (str, None),
}


def _read_config_file(path: str) -> list:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
            key, _, value = text.partition("=")
            pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(config_path=None, overrides=()) -> dict:
    """Merge defaults, config file, and overrides into typed values."""
    values = {key: default for key, (_, default) in REGISTRY.items()}
    pairs = _read_config_file(config_path) if config_path else []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        pairs.append((key.strip(), value.strip()))
    for key, raw in pairs:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = REGISTRY[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return values


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_resolved(values: dict) -> str:
    lines = [
        f"{key} = {_format_value(values[key])}"
        for key in sorted(values)
        if values[key] is not None
    ]
    return "\n".join(lines) + "\n"


def _build_utility(values):
    cls = Crra if values["utility.kind"] == "crra" else Cara
    return cls(gamma=values["utility.gamma"])


def _build_model(values):
    kind = values["model.kind"]
    if kind == "iid":
        return IidLognormalModel(
            annual_mean=values["model.mean"],
            annual_vol=values["model.vol"],
            period_length=values["model.period_length"],
        )
    if kind == "var1-synthetic":
        return synthetic_var1()
    path = values["model.file"]
    if path is None:
        raise ConfigError("model.kind = var1 needs model.file (see the calibrate command)")
    if not os.path.exists(path):
        raise ConfigError(f"model file not found: {path}")
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != MODEL_FORMAT:
        raise ConfigError(f"unrecognized model file format {data.get('format')!r}")
    return Var1Model(
        intercept=np.array(data["intercept"]),
        coefficient_matrix=np.array(data["coefficient_matrix"]),
        noise_covariance=np.array(data["noise_covariance"]),
        asset_index=data["asset_index"],
    )


def _build_cost(values):
    kind = values["cost.kind"]
    if kind == "zero":
        return ZeroCost()
    if kind == "proportional":
        return ProportionalTc(rate=values["cost.tc_rate"])
    params = LiquidityParams(
        sigma_day=values["cost.sigma_day"],
        vol_day=values["cost.vol_day"],
        theta=values["cost.theta"],
        delta=values["cost.delta"],
        mi_coeff=values["cost.mi_coeff"],
        lc_coeff=values["cost.lc_coeff"],
    )
    return PowerLaw(params=params, tc_rate=values["cost.tc_rate"])


def build_config(values: dict) -> SolveConfig:
    if values["grid.step"] is None:
        raise ConfigError("missing required config key grid.step")
    try:
        return SolveConfig(
            utility=_build_utility(values),
            rf=values["rates.rf"],
            w0=values["wealth.w0"],
            n_paths=values["paths.train"],
            n_steps=values["horizon.steps"],
            n_iterations=values["iteration.count"],
            seed=values["seed.train"],
            cost=_build_cost(values),
            grid=ControlGrid.from_step(values["grid.step"]),
            model=_build_model(values),
            s0=values["wealth.s0"],
            basis_degree=values["basis.degree"],
            basis_cross_terms=values["basis.cross_terms"],
            algorithm=values["algorithm"],
            rebalance_tol=values["rebalance.tol"],
            rebalance_max_iter=values["rebalance.max_iter"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _print_report(report, label="evaluation"):
    print(f"{label}: {report.n_paths} paths, {report.n_excluded} excluded")
    print(f"  cer: {report.cer_bps:.2f} bps per period")
    print(f"  terminal wealth: mean {report.mean_wealth:.6g}, std {report.std_wealth:.6g}")
    alloc = " ".join(f"{a:.3f}" for a in report.mean_alphas)
    print(f"  mean allocation by date: {alloc}")


def _cmd_solve(values, cfg, out_dir):
    if values["seed.eval"] == cfg.seed:
        raise ConfigError("seed.eval must differ from seed.train")
    eval_paths = simulate(
        cfg.model, values["paths.eval"], cfg.n_steps, seed=values["seed.eval"]
    )
    policy, diags = solve_with_iteration(
        simulate(cfg.model, cfg.n_paths, cfg.n_steps, seed=cfg.seed), cfg, eval_paths
    )
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    with open(diag_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "alpha0", "cer_bps"])
        for diag in diags:
            print(
                f"iteration {diag.iteration}: alpha0={diag.initial_action:.4f} "
                f"cer={diag.cer_bps:.2f} bps"
            )
            out.writerow([diag.iteration, diag.initial_action, diag.cer_bps])
    path = os.path.join(out_dir, "policy.json")
    save_policy(policy, path)
    print(f"policy written to {path}")
    print(f"diagnostics written to {diag_path}")


def _cmd_evaluate(values, cfg, out_dir, policy_path):
    if policy_path is None:
        policy_path = os.path.join(out_dir, "policy.json")
    if not os.path.exists(policy_path):
        raise ConfigError(f"policy file not found: {policy_path}")
    policy = load_policy(policy_path)
    report = evaluate_policy(
        policy, cfg, eval_seed=values["seed.eval"], n_paths=values["paths.eval"]
    )
    _print_report(report)


def _cmd_compare_blind(values, cfg, out_dir):
    result = liquidity_blind_comparison(
        cfg, eval_seed=values["seed.eval"], n_eval_paths=values["paths.eval"]
    )
    _print_report(result.aware, label="cost-aware")
    _print_report(result.blind, label="cost-blind")
    print(f"gap: {result.gap_bps:.2f} bps per period")
    path = os.path.join(out_dir, "compare_blind.csv")
    write_comparison_csv(result, path)
    print(f"comparison written to {path}")


def _cmd_evolution(values, cfg, out_dir, policy_path):
    if policy_path is not None:
        if not os.path.exists(policy_path):
            raise ConfigError(f"policy file not found: {policy_path}")
        policy = load_policy(policy_path)
    else:
        policy, _ = solve_from_config(cfg)
    rows = distribution_evolution(
        policy, cfg, eval_seed=values["seed.eval"], n_paths=values["paths.eval"]
    )
    path = os.path.join(out_dir, "evolution.csv")
    write_evolution_csv(rows, path)
    print(f"evolution written to {path}")


def _cmd_sweep(values, cfg, out_dir):
    axis = values["sweep.axis"]
    points = values["sweep.values"]
    if axis is None or points is None:
        raise ConfigError("sweep needs sweep.axis and sweep.values")
    results = sweep(
        cfg, axis, points, eval_seed=values["seed.eval"], n_eval_paths=values["paths.eval"]
    )
    for pt in results:
        print(f"{pt.axis}={pt.value:g}: cer={pt.cer_bps:.2f} bps alpha0={pt.initial_action:.4f}")
    path = os.path.join(out_dir, "sweep.csv")
    write_sweep_csv(results, path)
    print(f"sweep written to {path}")


def _cmd_calibrate(values, out_dir):
    src = values["calibrate.csv"]
    if src is None:
        raise ConfigError("calibrate needs calibrate.csv pointing at a price history")
    if not os.path.exists(src):
        raise ConfigError(f"price history not found: {src}")
    labels, history = load_price_csv(src)
    model = calibrate_var1(history)
    data = {
        "format": MODEL_FORMAT,
        "labels": labels,
        "intercept": model.intercept.tolist(),
        "coefficient_matrix": model.coefficient_matrix.tolist(),
        "noise_covariance": model.noise_covariance.tolist(),
        "asset_index": model.asset_index,
    }
    path = os.path.join(out_dir, "model.json")
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")
    print(f"fitted {len(labels)}-factor model from {history.shape[0]} observations")
    print(f"model written to {path}")


def _cmd_benchmark(values, cfg, out_dir):
    if values["seed.eval"] == cfg.seed:
        raise ConfigError("seed.eval must differ from seed.train")
    start = time.perf_counter()
    rows = benchmark_matrix(
        cfg,
        m_values=values["benchmark.m_values"],
        i_max=values["benchmark.i_max"],
        eval_seed=values["seed.eval"],
        n_eval_paths=values["paths.eval"],
    )
    elapsed = time.perf_counter() - start
    for row in rows:
        print(f"M={row.m} {row.arm}: cer={row.cer_bps:.2f} bps alpha0={row.alpha0:.4f}")
    path = os.path.join(out_dir, "benchmark.csv")
    write_benchmark_csv(rows, path)
    print(f"benchmark written to {path} ({elapsed:.1f} s)")


def _threads_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(command, config_path=None, overrides=(), out_dir=".", policy_path=None, dry_run=False) -> int:
    """Execute one command; returns the process exit code."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    values = resolve_config(config_path, overrides)
    resolved = format_resolved(values)
    print("resolved configuration:")
    print(resolved, end="")

    needs_solve_config = command != "calibrate"
    cfg = build_config(values) if needs_solve_config else None
    if dry_run:
        print("dry run: configuration is valid")
        return 0

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
        fh.write(resolved)

    with _threads_limit():
        if command == "solve":
            _cmd_solve(values, cfg, out_dir)
        elif command == "evaluate":
            _cmd_evaluate(values, cfg, out_dir, policy_path)
        elif command == "compare-blind":
            _cmd_compare_blind(values, cfg, out_dir)
        elif command == "evolution":
            _cmd_evolution(values, cfg, out_dir, policy_path)
        elif command == "sweep":
            _cmd_sweep(values, cfg, out_dir)
        elif command == "calibrate":
            _cmd_calibrate(values, out_dir)
        elif command == "benchmark":
            _cmd_benchmark(values, cfg, out_dir)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="liqalloc",
        description="Dynamic portfolio allocation under market impact and liquidity costs.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "overrides", nargs="*", metavar="key=value", help="config overrides"
    )
    parser.add_argument("--config", default=None, help="config file of key = value lines")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--policy", default=None, help="policy file to evaluate")
    parser.add_argument("--dry-run", action="store_true", help="validate and echo config only")
    args = parser.parse_args(argv)
    try:
        return run(
            args.command,
            config_path=args.config,
            overrides=args.overrides,
            out_dir=args.out,
            policy_path=args.policy,
            dry_run=args.dry_run,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
