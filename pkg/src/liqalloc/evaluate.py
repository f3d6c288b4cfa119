"""Out-of-sample policy evaluation and experiment drivers.

Performance is reported as a certainty-equivalent return: the constant
per-period rate whose deterministic terminal wealth the investor finds
exactly as attractive as the simulated distribution.  All comparisons
between policies reuse the same evaluation paths so sampling noise
cancels in the differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .liquidity import PowerLaw, strip_liquidity
from .lsmc import Policy, SolveConfig, forward_simulate, solve_with_iteration
from .model import PathSet, simulate
from .utility import Utility, floor_wealth

EVOLUTION_STATS = ("mean", "q05", "q25", "q50", "q75", "q95")
_QUANTILES = {"q05": 0.05, "q25": 0.25, "q50": 0.50, "q75": 0.75, "q95": 0.95}


def cer(utility: Utility, terminal_wealth: np.ndarray, w0: float, n_steps: int) -> float:
    """Certainty-equivalent per-period return of a terminal wealth sample.

    Inverts the mean utility of normalized terminal wealth and converts
    the resulting gross growth factor to a per-period rate.
    """
    if n_steps < 1:
        raise ValueError(f"need n_steps >= 1, got {n_steps}")
    w = np.atleast_1d(np.asarray(terminal_wealth, dtype=float))
    if w.size == 0:
        raise ValueError("terminal wealth sample is empty")
    if not np.isfinite(w).all():
        raise ValueError("terminal wealth sample contains non-finite values")
    mean_u = float(utility.u(floor_wealth(w, w0) / w0).mean())
    growth = float(utility.u_inv(mean_u))
    if growth <= 0:
        raise ValueError(f"certainty equivalent growth {growth} is not positive")
    return growth ** (1.0 / n_steps) - 1.0


WEALTH_QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)


@dataclass(frozen=True)
class EvaluationReport:
    """Summary of one policy run on fresh paths."""

    n_paths: int
    n_excluded: int
    cer: float
    cer_bps: float
    mean_wealth: float
    std_wealth: float
    wealth_quantiles: np.ndarray
    mean_alphas: np.ndarray

    @property
    def initial_action(self) -> float:
        return float(self.mean_alphas[0])


def _fresh_paths(cfg: SolveConfig, eval_seed: Optional[int], n_paths: Optional[int]) -> PathSet:
    if eval_seed is None:
        raise ValueError("provide eval_seed or explicit paths")
    if eval_seed == cfg.seed:
        raise ValueError(
            f"evaluation seed {eval_seed} equals the training seed; "
            "out-of-sample evaluation needs fresh paths"
        )
    return simulate(cfg.model, n_paths or cfg.n_paths, cfg.n_steps, seed=eval_seed)


def evaluate_policy(
    policy: Policy,
    cfg: SolveConfig,
    eval_seed: Optional[int] = None,
    n_paths: Optional[int] = None,
    paths: Optional[PathSet] = None,
    decision_cost=None,
) -> EvaluationReport:
    """Run a policy on paths the solver never saw and summarize it.

    Either pass simulated paths directly or an eval_seed (which must
    differ from the training seed) plus optionally n_paths.
    """
    if paths is None:
        paths = _fresh_paths(cfg, eval_seed, n_paths)
    fwd = forward_simulate(paths, policy, cfg, on_fail="exclude", decision_cost=decision_cost)
    keep = ~fwd.excluded
    if not keep.any():
        raise ValueError("every evaluation path failed to rebalance")
    wealth = fwd.terminal_wealth[keep]
    rate = cer(cfg.utility, wealth, cfg.w0, cfg.n_steps)
    return EvaluationReport(
        n_paths=paths.n_paths,
        n_excluded=int(fwd.excluded.sum()),
        cer=rate,
        cer_bps=rate * 1e4,
        mean_wealth=float(wealth.mean()),
        std_wealth=float(wealth.std()),
        wealth_quantiles=np.quantile(wealth, WEALTH_QUANTILES),
        mean_alphas=fwd.alphas[keep].mean(axis=0),
    )


@dataclass(frozen=True)
class ComparisonResult:
    """Cost-aware versus cost-unaware policy, same market, same paths."""

    aware: EvaluationReport
    blind: EvaluationReport
    gap_bps: float


def liquidity_blind_comparison(
    cfg: SolveConfig,
    eval_seed: int,
    n_eval_paths: Optional[int] = None,
) -> ComparisonResult:
    """Price the mistake of planning without the liquidity cost terms.

    Two policies are trained on identical paths: one under the full
    cost model, one under the same model with the impact and liquidity
    terms stripped out.  Both then trade in the true market; the blind
    policy also keeps making its decisions under its stripped cost
    model, so it systematically over-trades.  When the true model has
    no liquidity terms the two arms coincide.
    """
    blind_cost = strip_liquidity(cfg.cost)
    train_paths = simulate(cfg.model, cfg.n_paths, cfg.n_steps, seed=cfg.seed)
    aware_policy, _ = solve_with_iteration(train_paths, cfg)
    blind_policy, _ = solve_with_iteration(train_paths, replace(cfg, cost=blind_cost))

    eval_paths = _fresh_paths(cfg, eval_seed, n_eval_paths)
    aware = evaluate_policy(aware_policy, cfg, paths=eval_paths)
    blind = evaluate_policy(blind_policy, cfg, paths=eval_paths, decision_cost=blind_cost)
    return ComparisonResult(aware=aware, blind=blind, gap_bps=aware.cer_bps - blind.cer_bps)


@dataclass(frozen=True)
class EvolutionRow:
    step: int
    stat: str
    alpha: float
    wealth: float


def distribution_evolution(
    policy: Policy,
    cfg: SolveConfig,
    eval_seed: Optional[int] = None,
    n_paths: Optional[int] = None,
    paths: Optional[PathSet] = None,
) -> list:
    """Cross-sectional allocation and wealth statistics per date.

    Returns one row per (date, statistic); date n_steps reflects forced
    terminal liquidation, so its allocation column is identically zero.
    """
    if paths is None:
        paths = _fresh_paths(cfg, eval_seed, n_paths)
    fwd = forward_simulate(paths, policy, cfg, on_fail="exclude")
    keep = ~fwd.excluded
    if not keep.any():
        raise ValueError("every evaluation path failed to rebalance")
    alphas = fwd.alphas[keep]
    wealth = fwd.w_post[keep]
    rows = []
    for n in range(cfg.n_steps + 1):
        for stat in EVOLUTION_STATS:
            if stat == "mean":
                a, w = alphas[:, n].mean(), wealth[:, n].mean()
            else:
                qq = _QUANTILES[stat]
                a = np.quantile(alphas[:, n], qq)
                w = np.quantile(wealth[:, n], qq)
            rows.append(EvolutionRow(step=n, stat=stat, alpha=float(a), wealth=float(w)))
    return rows


@dataclass(frozen=True)
class SweepPoint:
    axis: str
    value: float
    cer: float
    cer_bps: float
    initial_action: float


SWEEP_AXES = ("sigma_day", "vol_day", "theta", "w0", "gamma", "horizon")


def apply_axis(cfg: SolveConfig, axis: str, value: float) -> SolveConfig:
    """Return a config with one problem dimension moved to value."""
    if axis == "w0":
        return replace(cfg, w0=float(value))
    if axis == "gamma":
        return replace(cfg, utility=type(cfg.utility)(gamma=float(value)))
    if axis == "horizon":
        return replace(cfg, n_steps=int(value))
    if axis in ("sigma_day", "vol_day", "theta"):
        if not isinstance(cfg.cost, PowerLaw):
            raise ValueError(f"axis {axis} needs a cost model with liquidity terms")
        params = replace(cfg.cost.params, **{axis: float(value)})
        return replace(cfg, cost=replace(cfg.cost, params=params))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep(
    cfg: SolveConfig,
    axis: str,
    values: Sequence[float],
    eval_seed: int,
    n_eval_paths: Optional[int] = None,
) -> list:
    """Solve and evaluate across one problem dimension.

    Apart from the horizon axis (which changes path length and must
    re-simulate), training and evaluation paths are simulated once and
    shared by all points, so the reported profile is not blurred by
    independent sampling noise.
    """
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    shared = axis != "horizon"
    if shared:
        train_paths = simulate(cfg.model, cfg.n_paths, cfg.n_steps, seed=cfg.seed)
        eval_paths = _fresh_paths(cfg, eval_seed, n_eval_paths)
    points = []
    for value in values:
        cfg_v = apply_axis(cfg, axis, value)
        if not shared:
            train_paths = simulate(cfg_v.model, cfg_v.n_paths, cfg_v.n_steps, seed=cfg_v.seed)
            eval_paths = _fresh_paths(cfg_v, eval_seed, n_eval_paths)
        policy, _ = solve_with_iteration(train_paths, cfg_v)
        report = evaluate_policy(policy, cfg_v, paths=eval_paths)
        points.append(
            SweepPoint(
                axis=axis,
                value=float(value),
                cer=report.cer,
                cer_bps=report.cer_bps,
                initial_action=policy.initial_action,
            )
        )
    return points


@dataclass(frozen=True)
class BenchmarkRow:
    m: int
    arm: str
    cer_bps: float
    alpha0: float


def benchmark_matrix(
    cfg: SolveConfig,
    m_values: Sequence[int],
    i_max: int,
    eval_seed: int,
    n_eval_paths: Optional[int] = None,
) -> list:
    """Accuracy of every algorithm arm across training sample sizes.

    For each M, runs the single-regression baseline and the per-level
    solver with i_max control iterations, reporting the out-of-sample
    certainty equivalent after each iteration on one shared evaluation
    sample.
    """
    if i_max < 0:
        raise ValueError(f"i_max must be nonnegative, got {i_max}")
    eval_paths = _fresh_paths(cfg, eval_seed, n_eval_paths)
    rows = []
    for m in m_values:
        cfg_m = replace(cfg, n_paths=int(m), n_iterations=i_max, algorithm="per-level")
        train_paths = simulate(cfg_m.model, cfg_m.n_paths, cfg_m.n_steps, seed=cfg_m.seed)
        klp_policy, _ = solve_with_iteration(
            train_paths, replace(cfg_m, algorithm="klp", n_iterations=0)
        )
        report = evaluate_policy(klp_policy, cfg_m, paths=eval_paths)
        rows.append(
            BenchmarkRow(
                m=int(m), arm="KLP", cer_bps=report.cer_bps,
                alpha0=klp_policy.initial_action,
            )
        )
        _, diags = solve_with_iteration(train_paths, cfg_m, eval_paths=eval_paths)
        for diag in diags:
            rows.append(
                BenchmarkRow(
                    m=int(m), arm=f"I{diag.iteration}", cer_bps=diag.cer_bps,
                    alpha0=diag.initial_action,
                )
            )
    return rows


def write_benchmark_csv(rows: Sequence[BenchmarkRow], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["m", "arm", "cer_bps", "alpha0"])
        for row in rows:
            out.writerow([row.m, row.arm, row.cer_bps, row.alpha0])


def write_sweep_csv(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["axis", "value", "cer_bps", "alpha0"])
        for pt in points:
            out.writerow([pt.axis, pt.value, pt.cer_bps, pt.initial_action])


def write_evolution_csv(rows: Sequence[EvolutionRow], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "stat", "alpha", "wealth"])
        for row in rows:
            out.writerow([row.step, row.stat, row.alpha, row.wealth])


def write_comparison_csv(result: ComparisonResult, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["arm", "cer_bps", "alpha0"])
        out.writerow(["aware", result.aware.cer_bps, result.aware.initial_action])
        out.writerow(["blind", result.blind.cer_bps, result.blind.initial_action])
