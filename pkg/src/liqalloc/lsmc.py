"""Simulation-and-regression solver for dynamic portfolio allocation.

The solver works in three stages.  A forward pass simulates endogenous
portfolio trajectories under allocations drawn uniformly at random
from a discrete control grid, so the state space is explored without
knowing the optimal policy.  A backward pass then walks the
rebalancing dates in reverse: at each date, for each grid level, every
path is re-rebalanced from its stored pre-trade state to that level,
rolled forward to the horizon following the already-estimated
continuation values, and the realized terminal utilities are regressed
on post-transaction state features, one regression per level.
Regressing realized performance rather than fitted values keeps
regression errors from compounding across dates.  Finally the whole
procedure can be iterated: the randomized controls are replaced by the
estimated policy and the backward pass is re-run on the refocused
sample.

A baseline variant ("klp") fits a single regression per date over an
extended basis that includes the randomized allocation itself as an
input, and optimizes the fitted surface over the grid at decision
time.

Terminal liquidation is enforced everywhere: every trajectory is
forced to allocation zero at the horizon and pays the associated
switching costs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .liquidity import CostModel, ZeroCost
from .model import (
    MarketModel,
    PathSet,
    STREAM_CONTROLS,
    rng_stream,
    simulate,
)
from .rebalance import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    PortfolioState,
    rebalance_paths,
    solve_rebalance,
)
from .regression import (
    BasisSpec,
    build_feature_matrix,
    build_features,
    lstsq_ridge,
    predictor_scales_from_sample,
)
from .utility import Crra, Utility, floor_wealth, utility_from_tag, utility_tag

ALGORITHMS = ("per-level", "klp")

# A backward step aborts if more than this fraction of paths drop out
# through failed rebalances.
MAX_EXCLUDED_FRACTION = 0.01

POLICY_FORMAT = "liqalloc-policy-v1"


@dataclass(frozen=True)
class ControlGrid:
    """Discrete allocation levels the solver optimizes over."""

    levels: np.ndarray
    step: float

    def __post_init__(self) -> None:
        levels = np.atleast_1d(np.asarray(self.levels, dtype=float))
        if levels.shape[0] < 2:
            raise ValueError("control grid needs at least two levels")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("control grid levels must be strictly increasing")
        if levels[0] < 0 or levels[-1] > 1:
            raise ValueError("control grid levels must lie in [0, 1]")
        if self.step <= 0:
            raise ValueError(f"grid step must be positive, got {self.step}")
        levels.flags.writeable = False
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_step(cls, step: float, lo: float = 0.0, hi: float = 1.0) -> "ControlGrid":
        if step <= 0:
            raise ValueError(f"grid step must be positive, got {step}")
        n = round((hi - lo) / step)
        if n < 1 or abs(lo + n * step - hi) > 1e-9:
            raise ValueError(f"step {step} does not divide [{lo}, {hi}]")
        return cls(levels=np.linspace(lo, hi, n + 1), step=step)

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]


@dataclass(frozen=True)
class SolveConfig:
    """Everything needed to pose and solve one allocation problem."""

    utility: Utility
    rf: float                  # risk-free rate per rebalancing period
    w0: float
    n_paths: int
    n_steps: int
    n_iterations: int          # control iterations beyond the first pass
    seed: int
    cost: CostModel
    grid: ControlGrid
    model: MarketModel
    s0: float = 200.0
    basis_degree: int = 2
    basis_cross_terms: bool = True
    algorithm: str = "per-level"
    rebalance_tol: float = DEFAULT_TOL
    rebalance_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self) -> None:
        if self.rf <= -1:
            raise ValueError(f"per-period risk-free rate must exceed -1, got {self.rf}")
        if self.w0 <= 0:
            raise ValueError(f"w0 must be positive, got {self.w0}")
        if self.s0 <= 0:
            raise ValueError(f"s0 must be positive, got {self.s0}")
        if self.n_paths < 2:
            raise ValueError(f"need at least two paths, got {self.n_paths}")
        if self.n_steps < 1:
            raise ValueError(f"need at least one period, got {self.n_steps}")
        if self.n_iterations < 0:
            raise ValueError(f"n_iterations must be nonnegative, got {self.n_iterations}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm}")
        if self.basis_degree < 1:
            raise ValueError(f"basis degree must be at least 1, got {self.basis_degree}")
        if self.rebalance_tol <= 0:
            raise ValueError("rebalance_tol must be positive")
        if self.rebalance_max_iter < 1:
            raise ValueError("rebalance_max_iter must be at least 1")


@dataclass(frozen=True)
class ForwardSample:
    """Endogenous trajectories recorded at every rebalancing date.

    Column n of the *_pre arrays holds the state entering date n before
    the trade; the *_post arrays hold the state right after it.  Column
    n_steps corresponds to terminal liquidation (allocation zero).
    """

    alphas: np.ndarray
    q_post: np.ndarray
    qf_post: np.ndarray
    s_post: np.ndarray
    w_post: np.ndarray
    s_pre: np.ndarray
    w_pre: np.ndarray
    excluded: np.ndarray

    @property
    def terminal_wealth(self) -> np.ndarray:
        return self.w_post[:, -1]


@dataclass(frozen=True)
class Policy:
    """Fitted continuation-value coefficients plus the date-0 decision.

    w_bounds records, per regression date, the wealth range of the
    sample each surface was fitted on; continuation values are only
    ever evaluated with wealth clamped into that range.  A quadratic in
    transformed wealth is meaningless outside the fitted support, and
    letting it extrapolate destabilizes both rollouts and the control
    iteration.
    """

    grid: ControlGrid
    basis: BasisSpec
    utility: Utility
    w0: float
    n_steps: int
    algorithm: str
    coefficients: dict
    initial_action: float
    initial_cv: np.ndarray
    terminal_rule: str = "liquidate"
    w_bounds: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm}")
        if self.terminal_rule != "liquidate":
            raise ValueError(f"unknown terminal rule {self.terminal_rule}")
        if not np.isclose(self.grid.levels, self.initial_action, atol=1e-12).any():
            raise ValueError(f"initial action {self.initial_action} is not a grid level")
        cv = np.atleast_1d(np.asarray(self.initial_cv, dtype=float))
        if cv.shape[0] != self.grid.n_levels:
            raise ValueError("initial_cv must have one entry per grid level")
        expect_j = self.grid.n_levels if self.algorithm == "per-level" else 1
        for n in range(1, self.n_steps):
            if n not in self.coefficients:
                raise ValueError(f"missing coefficients for date {n}")
            mat = self.coefficients[n]
            if mat.shape != (self.basis.n_features, expect_j):
                raise ValueError(
                    f"coefficients at date {n} have shape {mat.shape}, "
                    f"expected ({self.basis.n_features}, {expect_j})"
                )
            if self.w_bounds is not None:
                wb = self.w_bounds.get(n)
                if wb is None:
                    raise ValueError(f"missing wealth bounds for date {n}")
                if wb.ndim != 2 or wb.shape[1] != 2 or wb.shape[0] not in (1, expect_j):
                    raise ValueError(
                        f"wealth bounds at date {n} have shape {wb.shape}"
                    )
        object.__setattr__(self, "initial_cv", cv)


@dataclass(frozen=True)
class IterationDiagnostics:
    """Out-of-sample summary of the policy after each control iteration."""

    iteration: int
    initial_action: float
    cer: float
    cer_bps: float


def _basis_for(paths: PathSet, cfg: SolveConfig, n_action_inputs: int) -> BasisSpec:
    # Wealth enters the basis as log(W / W0).  With multiplicative
    # dynamics log wealth is the natural coordinate: it spreads the
    # bulk of the sample across the feature range instead of letting a
    # sharply curved utility collapse it against one end, where the
    # handful of near-ruin paths would dominate the squared error and
    # whipsaw the fit everyone else sees.  Ranking across action levels
    # only needs the surfaces to order states consistently, which a
    # quadratic in log wealth does at every risk aversion tried.
    #
    # Only predictors that condition future returns enter the basis; a
    # model may simulate more columns than it predicts with (an IID
    # stock's lagged return is data, not state), and fitting on pure
    # noise regressors visibly degrades the high-risk-aversion cells.
    n_state = getattr(cfg.model, "n_state_predictors", paths.n_predictors)
    return BasisSpec(
        predictor_scales=predictor_scales_from_sample(paths.predictors[..., :n_state]),
        wealth_transform=Crra(1.0),
        w0=cfg.w0,
        degree=cfg.basis_degree,
        include_cross_terms=cfg.basis_cross_terms,
        n_action_inputs=n_action_inputs,
    )


def _state_z(basis: BasisSpec, z: np.ndarray) -> np.ndarray:
    """Restrict predictor columns to the ones the basis was built over."""
    p = basis.predictor_scales.shape[0]
    return z if z.shape[-1] == p else z[..., :p]


def _check_paths(paths: PathSet, cfg: SolveConfig) -> None:
    if paths.n_assets != 1:
        raise ValueError("the shipped engine trades a single risky asset")
    if paths.n_steps != cfg.n_steps:
        raise ValueError(
            f"paths have {paths.n_steps} periods, config expects {cfg.n_steps}"
        )


def _clip_wealth(w, bounds, l: int = 0):
    """Clamp queried wealth into the fitted sample's range for one surface."""
    if bounds is None:
        return w
    row = bounds[l] if bounds.shape[0] > 1 else bounds[0]
    return np.clip(w, row[0], row[1])


def _clip_value(val, bounds, l: int = 0):
    """Clamp fitted continuation values into the fitted targets' range.

    A conditional mean can never leave the range of its own sample, but
    an extrapolated polynomial can, and by enough to outbid every honest
    value.  Backward-pass rollouts restart from every (date, level)
    pair, so they routinely query the later surfaces far outside the
    states those were fitted on; the clamp caps what extrapolation can
    claim there.  Decisions under the finished policy stay on the
    distribution the surfaces were trained on, so they are left
    unclamped (clamping them measurably hurts: it flattens the ranking
    at the edges of the sample).
    """
    if bounds is None:
        return val
    row = bounds[l] if bounds.shape[0] > 1 else bounds[0]
    return np.clip(val, row[0], row[1])


def _cv_all_levels_zero(basis, coeff_n, z_n, w, levels, klp: bool, bounds=None, vbounds=None) -> np.ndarray:
    """Continuation values (M, J) when rebalancing is costless.

    Costless trades leave wealth unchanged, so the post-transaction
    state is level-independent and one feature matrix serves all
    levels.
    """
    w = _clip_wealth(w, bounds)
    if not klp:
        x = build_feature_matrix(basis, z_n, w)
        cv = x @ coeff_n
    else:
        x_unit = build_feature_matrix(basis, z_n, w, actions=np.ones(w.shape[0]))
        a_exp = basis.exponents()[:, -1]
        beta = coeff_n[:, 0]
        parts = np.stack(
            [x_unit[:, a_exp == d] @ beta[a_exp == d] for d in range(basis.degree + 1)],
            axis=1,
        )
        powers = np.stack([levels ** d for d in range(basis.degree + 1)], axis=0)
        cv = parts @ powers
    if vbounds is not None:
        np.clip(cv, vbounds[:, 0], vbounds[:, 1], out=cv)
    return cv


def _cv_and_states_generic(basis, coeff_n, z_n, q, qf, s, w, levels, cost, cfg, klp, bounds=None, vbounds=None):
    """Candidate post-states and continuation values for every level."""
    m = w.shape[0]
    j = levels.shape[0]
    cv = np.empty((m, j))
    cand_q = np.empty((j, m))
    cand_qf = np.empty((j, m))
    cand_s = np.empty((j, m))
    cand_w = np.empty((j, m))
    for l, a in enumerate(levels):
        ql, qfl, sl, wl, _, okl = rebalance_paths(
            q, qf, s, w, a, cost, cfg.rebalance_tol, cfg.rebalance_max_iter
        )
        wq = _clip_wealth(wl, bounds, l)
        if klp:
            x = build_feature_matrix(basis, z_n, wq, actions=np.full(m, a))
            val = x @ coeff_n[:, 0]
        else:
            x = build_feature_matrix(basis, z_n, wq)
            val = x @ coeff_n[:, l]
        val = _clip_value(val, vbounds, l)
        cv[:, l] = np.where(okl, val, -np.inf)
        cand_q[l] = ql
        cand_qf[l] = qfl
        cand_s[l] = sl
        cand_w[l] = wl
    return cv, (cand_q, cand_qf, cand_s, cand_w)


def _gather(cand, idx):
    rows = np.arange(idx.shape[0])
    return tuple(c[idx, rows] for c in cand)


def _rollout_zero(w, n_from, z, er, coeffs, basis, levels, cfg, klp: bool, w_bounds=None, v_bounds=None) -> np.ndarray:
    """Roll costless wealth forward from date n_from to the horizon."""
    one_rf = 1.0 + cfg.rf
    for n in range(n_from, cfg.n_steps):
        bn = None if w_bounds is None else w_bounds.get(n)
        vn = None if v_bounds is None else v_bounds.get(n)
        cv = _cv_all_levels_zero(
            basis, coeffs[n], z[:, n, :], w, levels, klp, bounds=bn, vbounds=vn
        )
        a = levels[np.argmax(cv, axis=1)]
        w = w * ((1.0 - a) * one_rf + a * er[:, n + 1])
    return w


def _rollout_generic(q, qf, s, w, ok, n_from, z, er, coeffs, basis, levels, cost, cfg, klp: bool, w_bounds=None, v_bounds=None):
    """Roll full portfolio state forward, liquidating at the horizon."""
    one_rf = 1.0 + cfg.rf
    for n in range(n_from, cfg.n_steps):
        bn = None if w_bounds is None else w_bounds.get(n)
        vn = None if v_bounds is None else v_bounds.get(n)
        cv, cand = _cv_and_states_generic(
            basis, coeffs[n], z[:, n, :], q, qf, s, w, levels, cost, cfg, klp,
            bounds=bn, vbounds=vn,
        )
        ok &= np.isfinite(cv).any(axis=1)
        idx = np.argmax(cv, axis=1)
        q, qf, s, w = _gather(cand, idx)
        s = s * er[:, n + 1]
        qf = qf * one_rf
        w = q * s + qf
    _, _, _, w_final, _, ok_liq = rebalance_paths(
        q, qf, s, w, 0.0, cost, cfg.rebalance_tol, cfg.rebalance_max_iter
    )
    ok &= ok_liq
    return w_final, ok


def forward_simulate(
    paths: PathSet,
    controls,
    cfg: SolveConfig,
    on_fail: str = "raise",
    decision_cost: Optional[CostModel] = None,
) -> ForwardSample:
    """Simulate endogenous portfolio trajectories along exogenous paths.

    controls is either the string "uniform-random" (grid levels drawn
    IID uniformly per path and date) or a fitted Policy.  on_fail
    selects whether a failed rebalance raises (annotated with path and
    step) or excludes the path from the sample.  decision_cost lets a
    policy pick levels under a different cost model than the one trades
    actually execute against, which is how a cost-unaware policy is
    dropped into the true market; it defaults to cfg.cost.
    """
    _check_paths(paths, cfg)
    if on_fail not in ("raise", "exclude"):
        raise ValueError(f"on_fail must be 'raise' or 'exclude', got {on_fail}")
    m, n_steps = paths.n_paths, paths.n_steps
    levels = cfg.grid.levels
    z = paths.predictors
    er = np.exp(paths.log_returns[:, :, 0])
    one_rf = 1.0 + cfg.rf
    dec_cost = cfg.cost if decision_cost is None else decision_cost
    dec_zero = isinstance(dec_cost, ZeroCost)

    policy: Optional[Policy] = None
    if isinstance(controls, str):
        if controls != "uniform-random":
            raise ValueError(f"unknown control mode {controls!r}")
        draws = rng_stream(cfg.seed, STREAM_CONTROLS).integers(
            0, cfg.grid.n_levels, size=(m, n_steps)
        )
        random_alphas = levels[draws]
    elif isinstance(controls, Policy):
        policy = controls
        if policy.n_steps != n_steps:
            raise ValueError(
                f"policy has {policy.n_steps} periods, paths have {n_steps}"
            )
        z = _state_z(policy.basis, z)
    else:
        raise ValueError("controls must be 'uniform-random' or a Policy")

    shape = (m, n_steps + 1)
    alphas = np.zeros(shape)
    q_post = np.empty(shape)
    qf_post = np.empty(shape)
    s_post = np.empty(shape)
    w_post = np.empty(shape)
    s_pre = np.empty(shape)
    w_pre = np.empty(shape)
    excluded = np.zeros(m, dtype=bool)

    q = np.zeros(m)
    qf = np.full(m, float(cfg.w0))
    s = np.full(m, float(cfg.s0))
    w = np.full(m, float(cfg.w0))

    for n in range(n_steps + 1):
        s_pre[:, n] = s
        w_pre[:, n] = w
        if n == n_steps:
            a_n = 0.0
        elif policy is None:
            a_n = random_alphas[:, n]
        elif n == 0:
            a_n = np.full(m, policy.initial_action)
        else:
            coeff_n = policy.coefficients[n]
            klp = policy.algorithm == "klp"
            bn = None if policy.w_bounds is None else policy.w_bounds.get(n)
            if dec_zero:
                cv = _cv_all_levels_zero(
                    policy.basis, coeff_n, z[:, n, :], w, policy.grid.levels, klp,
                    bounds=bn,
                )
            else:
                cv, _ = _cv_and_states_generic(
                    policy.basis, coeff_n, z[:, n, :], q, qf, s, w,
                    policy.grid.levels, dec_cost, cfg, klp, bounds=bn,
                )
            feasible = np.isfinite(cv).any(axis=1)
            a_n = policy.grid.levels[np.argmax(cv, axis=1)]
            a_n = np.where(feasible, a_n, np.nan)

        q2, qf2, s2, w2, _, ok = rebalance_paths(
            q, qf, s, w, np.nan_to_num(a_n, nan=0.0) if np.ndim(a_n) else a_n,
            cfg.cost, cfg.rebalance_tol, cfg.rebalance_max_iter,
        )
        if np.ndim(a_n) and np.isnan(a_n).any():
            ok = ok & ~np.isnan(a_n)
        if not ok.all():
            if on_fail == "raise":
                bad = int(np.flatnonzero(~ok)[0])
                raise ValueError(
                    f"rebalance failed at step {n} on {int((~ok).sum())} paths "
                    f"(first failing path {bad})"
                )
            newly = ~ok & ~excluded
            excluded |= ~ok
            q2 = np.where(ok, q2, np.nan)
            qf2 = np.where(ok, qf2, np.nan)
            s2 = np.where(ok, s2, s)  # keep price positive to avoid spurious errors
            w2 = np.where(ok, w2, np.nan)
            del newly
        alphas[:, n] = a_n if np.ndim(a_n) else float(a_n)
        q_post[:, n] = q2
        qf_post[:, n] = qf2
        s_post[:, n] = s2
        w_post[:, n] = w2
        q, qf, s, w = q2, qf2, s2, w2
        if n < n_steps:
            s = s * er[:, n + 1]
            qf = qf * one_rf
            w = q * s + qf

    return ForwardSample(
        alphas=alphas, q_post=q_post, qf_post=qf_post, s_post=s_post,
        w_post=w_post, s_pre=s_pre, w_pre=w_pre, excluded=excluded,
    )


def _pre_state(fwd: ForwardSample, cfg: SolveConfig, n: int, m: int):
    """State entering date n before the trade, as stored by the forward pass."""
    if n == 0:
        return (
            np.zeros(m),
            np.full(m, float(cfg.w0)),
            np.full(m, float(cfg.s0)),
            np.full(m, float(cfg.w0)),
        )
    one_rf = 1.0 + cfg.rf
    return (
        fwd.q_post[:, n - 1].copy(),
        fwd.qf_post[:, n - 1] * one_rf,
        fwd.s_pre[:, n].copy(),
        fwd.w_pre[:, n].copy(),
    )


def _check_exclusions(ok: np.ndarray, n: int, level: float) -> np.ndarray:
    m = ok.shape[0]
    dropped = m - int(ok.sum())
    if dropped > MAX_EXCLUDED_FRACTION * m:
        raise ValueError(
            f"{dropped}/{m} paths dropped by failed rebalances at date {n}, "
            f"level {level:.4f}"
        )
    return ok


def backward_induction(
    paths: PathSet,
    fwd: ForwardSample,
    cfg: SolveConfig,
    basis: Optional[BasisSpec] = None,
) -> Policy:
    """One backward dynamic-programming pass with per-level regressions."""
    _check_paths(paths, cfg)
    if basis is None:
        basis = _basis_for(paths, cfg, 0)
    if basis.n_action_inputs != 0:
        raise ValueError("per-level induction uses a state-only basis")
    m, n_steps = paths.n_paths, paths.n_steps
    if m < basis.n_features:
        raise ValueError(f"need at least {basis.n_features} paths, got {m}")
    levels = cfg.grid.levels
    j = levels.shape[0]
    z = _state_z(basis, paths.predictors)
    er = np.exp(paths.log_returns[:, :, 0])
    one_rf = 1.0 + cfg.rf
    u = cfg.utility
    zero = isinstance(cfg.cost, ZeroCost)

    coeffs: dict = {}
    bounds: dict = {}
    vbounds: dict = {}
    cv0 = np.empty(j)
    for n in reversed(range(n_steps)):
        q_pre, qf_pre, s_pre, w_pre = _pre_state(fwd, cfg, n, m)
        if zero:
            targets = np.empty((m, j))
            for l, a in enumerate(levels):
                w1 = w_pre * ((1.0 - a) * one_rf + a * er[:, n + 1])
                w_term = _rollout_zero(
                    w1, n + 1, z, er, coeffs, basis, levels, cfg, False,
                    w_bounds=bounds, v_bounds=vbounds,
                )
                targets[:, l] = u.u(floor_wealth(w_term, cfg.w0) / cfg.w0)
            if n > 0:
                x = build_feature_matrix(basis, z[:, n, :], w_pre)
                coeffs[n] = lstsq_ridge(x, targets)
                bounds[n] = np.array([[w_pre.min(), w_pre.max()]])
                vbounds[n] = np.column_stack([targets.min(axis=0), targets.max(axis=0)])
            else:
                cv0 = targets.mean(axis=0)
        else:
            cols = []
            rows = np.empty((j, 2))
            vrows = np.empty((j, 2))
            for l, a in enumerate(levels):
                ql, qfl, sl, wl, _, ok = rebalance_paths(
                    q_pre, qf_pre, s_pre, w_pre, a,
                    cfg.cost, cfg.rebalance_tol, cfg.rebalance_max_iter,
                )
                s1 = sl * er[:, n + 1]
                qf1 = qfl * one_rf
                w1 = ql * s1 + qf1
                w_term, ok = _rollout_generic(
                    ql, qf1, s1, w1, ok, n + 1, z, er, coeffs, basis, levels,
                    cfg.cost, cfg, False, w_bounds=bounds, v_bounds=vbounds,
                )
                ok = _check_exclusions(ok, n, a)
                tgt = u.u(floor_wealth(w_term, cfg.w0) / cfg.w0)
                if n > 0:
                    x = build_feature_matrix(basis, z[:, n, :], wl)
                    cols.append(lstsq_ridge(x[ok], tgt[ok]))
                    rows[l] = wl[ok].min(), wl[ok].max()
                    vrows[l] = tgt[ok].min(), tgt[ok].max()
                else:
                    cv0[l] = tgt[ok].mean()
            if n > 0:
                coeffs[n] = np.column_stack(cols)
                bounds[n] = rows
                vbounds[n] = vrows

    best = int(np.argmax(cv0))
    return Policy(
        grid=cfg.grid,
        basis=basis,
        utility=cfg.utility,
        w0=cfg.w0,
        n_steps=n_steps,
        algorithm="per-level",
        coefficients=coeffs,
        initial_action=float(levels[best]),
        initial_cv=cv0,
        w_bounds=bounds,
    )


def klp_backward(
    paths: PathSet,
    fwd: ForwardSample,
    cfg: SolveConfig,
    basis: Optional[BasisSpec] = None,
) -> Policy:
    """Backward pass fitting one allocation-augmented regression per date."""
    _check_paths(paths, cfg)
    if basis is None:
        basis = _basis_for(paths, cfg, 1)
    if basis.n_action_inputs != 1:
        raise ValueError("klp induction needs an action input in the basis")
    m, n_steps = paths.n_paths, paths.n_steps
    if m < basis.n_features:
        raise ValueError(f"need at least {basis.n_features} paths, got {m}")
    levels = cfg.grid.levels
    z = _state_z(basis, paths.predictors)
    er = np.exp(paths.log_returns[:, :, 0])
    one_rf = 1.0 + cfg.rf
    u = cfg.utility
    zero = isinstance(cfg.cost, ZeroCost)

    coeffs: dict = {}
    bounds: dict = {}
    vbounds: dict = {}
    cv0 = np.empty(levels.shape[0])
    for n in reversed(range(n_steps)):
        if n > 0:
            # Regress rolled-forward utility on the forward sample's own
            # (state, randomized action) pairs at this date.
            if zero:
                a_n = fwd.alphas[:, n]
                w1 = fwd.w_post[:, n] * ((1.0 - a_n) * one_rf + a_n * er[:, n + 1])
                w_term = _rollout_zero(
                    w1, n + 1, z, er, coeffs, basis, levels, cfg, True,
                    w_bounds=bounds, v_bounds=vbounds,
                )
                tgt = u.u(floor_wealth(w_term, cfg.w0) / cfg.w0)
                x = build_feature_matrix(basis, z[:, n, :], fwd.w_post[:, n], actions=a_n)
                coeffs[n] = lstsq_ridge(x, tgt)[:, None]
                w_fit = fwd.w_post[:, n]
                bounds[n] = np.array([[w_fit.min(), w_fit.max()]])
                vbounds[n] = np.array([[tgt.min(), tgt.max()]])
            else:
                s1 = fwd.s_post[:, n] * er[:, n + 1]
                qf1 = fwd.qf_post[:, n] * one_rf
                q1 = fwd.q_post[:, n]
                w1 = q1 * s1 + qf1
                ok = ~fwd.excluded & np.isfinite(w1)
                w_term, ok = _rollout_generic(
                    q1, qf1, s1, w1, ok, n + 1, z, er, coeffs, basis, levels,
                    cfg.cost, cfg, True, w_bounds=bounds, v_bounds=vbounds,
                )
                ok = _check_exclusions(ok, n, float("nan"))
                tgt = u.u(floor_wealth(w_term, cfg.w0) / cfg.w0)
                x = build_feature_matrix(
                    basis, z[:, n, :], fwd.w_post[:, n], actions=fwd.alphas[:, n]
                )
                coeffs[n] = lstsq_ridge(x[ok], tgt[ok])[:, None]
                w_fit = fwd.w_post[ok, n]
                bounds[n] = np.array([[w_fit.min(), w_fit.max()]])
                vbounds[n] = np.array([[tgt[ok].min(), tgt[ok].max()]])
        else:
            # The first date is a regression like any other; the fitted
            # quadratic in the allocation picks the initial action, so a
            # curved value profile can bias it (unlike the per-level pass).
            a0 = fwd.alphas[:, 0]
            if zero:
                w1 = fwd.w_post[:, 0] * ((1.0 - a0) * one_rf + a0 * er[:, 1])
                w_term = _rollout_zero(
                    w1, 1, z, er, coeffs, basis, levels, cfg, True,
                    w_bounds=bounds, v_bounds=vbounds,
                )
                ok = np.ones(m, dtype=bool)
            else:
                s1 = fwd.s_post[:, 0] * er[:, 1]
                qf1 = fwd.qf_post[:, 0] * one_rf
                q1 = fwd.q_post[:, 0]
                w1 = q1 * s1 + qf1
                ok = ~fwd.excluded & np.isfinite(w1)
                w_term, ok = _rollout_generic(
                    q1, qf1, s1, w1, ok, 1, z, er, coeffs, basis, levels,
                    cfg.cost, cfg, True, w_bounds=bounds, v_bounds=vbounds,
                )
                ok = _check_exclusions(ok, 0, float("nan"))
            tgt = u.u(floor_wealth(w_term, cfg.w0) / cfg.w0)
            x = build_feature_matrix(basis, z[:, 0, :], fwd.w_post[:, 0], actions=a0)
            beta = lstsq_ridge(x[ok], tgt[ok])
            w_fit = fwd.w_post[ok, 0]
            lo0, hi0 = float(w_fit.min()), float(w_fit.max())
            q_pre, qf_pre, s_pre, w_pre = _pre_state(fwd, cfg, 0, 1)
            n_ok = int(ok.sum())
            for l, a in enumerate(levels):
                if zero:
                    w_post_l = cfg.w0
                else:
                    _, _, _, wl, _, ok_l = rebalance_paths(
                        q_pre, qf_pre, s_pre, w_pre, a,
                        cfg.cost, cfg.rebalance_tol, cfg.rebalance_max_iter,
                    )
                    if not ok_l[0]:
                        cv0[l] = -np.inf
                        continue
                    w_post_l = float(wl[0])
                xs = build_feature_matrix(
                    basis, z[ok, 0, :], np.full(n_ok, min(max(w_post_l, lo0), hi0)),
                    actions=np.full(n_ok, a),
                )
                cv0[l] = float((xs @ beta).mean())
            if not np.isfinite(cv0).any():
                raise ValueError("initial rebalance failed for every grid level")

    best = int(np.argmax(cv0))
    return Policy(
        grid=cfg.grid,
        basis=basis,
        utility=cfg.utility,
        w0=cfg.w0,
        n_steps=n_steps,
        algorithm="klp",
        coefficients=coeffs,
        initial_action=float(levels[best]),
        initial_cv=cv0,
        w_bounds=bounds,
    )


def solve_with_iteration(
    paths: PathSet,
    cfg: SolveConfig,
    eval_paths: Optional[PathSet] = None,
):
    """Full solve: forward exploration, backward pass, control iterations.

    Returns (policy, diagnostics) where diagnostics holds one entry per
    iteration with the out-of-sample certainty-equivalent return when
    eval_paths is supplied (nan otherwise).  Control iterations re-run
    the forward pass under the current policy and re-fit; they apply to
    the per-level algorithm only.
    """
    _check_paths(paths, cfg)
    if paths.n_paths != cfg.n_paths:
        raise ValueError(f"paths carry {paths.n_paths} paths, config expects {cfg.n_paths}")
    klp = cfg.algorithm == "klp"
    basis = _basis_for(paths, cfg, 1 if klp else 0)
    fwd = forward_simulate(paths, "uniform-random", cfg)
    if klp:
        policy = klp_backward(paths, fwd, cfg, basis=basis)
    else:
        policy = backward_induction(paths, fwd, cfg, basis=basis)
    diags = [_diagnose(0, policy, cfg, eval_paths)]
    if not klp:
        for i in range(1, cfg.n_iterations + 1):
            fwd = forward_simulate(paths, policy, cfg)
            policy = backward_induction(paths, fwd, cfg, basis=basis)
            diags.append(_diagnose(i, policy, cfg, eval_paths))
    return policy, diags


def _diagnose(iteration, policy, cfg, eval_paths) -> IterationDiagnostics:
    if eval_paths is None:
        rate = float("nan")
    else:
        from .evaluate import cer

        fwd = forward_simulate(eval_paths, policy, cfg, on_fail="exclude")
        wealth = fwd.terminal_wealth[~fwd.excluded]
        rate = cer(cfg.utility, wealth, cfg.w0, cfg.n_steps)
    return IterationDiagnostics(
        iteration=iteration,
        initial_action=policy.initial_action,
        cer=rate,
        cer_bps=rate * 1e4,
    )


def solve_from_config(cfg: SolveConfig, eval_paths: Optional[PathSet] = None):
    """Simulate training paths from the config's model and solve."""
    paths = simulate(cfg.model, cfg.n_paths, cfg.n_steps, seed=cfg.seed)
    return solve_with_iteration(paths, cfg, eval_paths=eval_paths)


def policy_action(
    policy: Policy,
    n: int,
    state: PortfolioState,
    z,
    model: CostModel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """Allocation the policy prescribes at date n in the given state.

    Date 0 returns the stored initial action, the horizon returns 0
    (forced liquidation).  In between, each grid level is tried through
    the rebalance solver and the fitted continuation value is evaluated
    at the candidate post-transaction state; infeasible levels are
    skipped.  Ties break toward the lower level.
    """
    if not 0 <= n <= policy.n_steps:
        raise ValueError(f"date {n} outside 0..{policy.n_steps}")
    if n == policy.n_steps:
        return 0.0
    if n == 0:
        return float(policy.initial_action)
    coeff = policy.coefficients[n]
    klp = policy.algorithm == "klp"
    bn = None if policy.w_bounds is None else policy.w_bounds.get(n)
    z = _state_z(policy.basis, np.atleast_1d(np.asarray(z, dtype=float)))
    best_val = -np.inf
    best_a = None
    for l, a in enumerate(policy.grid.levels):
        try:
            res = solve_rebalance(state, np.array([a]), model, tol=tol, max_iter=max_iter)
        except ValueError:
            continue
        wq = float(_clip_wealth(np.asarray(res.state.w), bn, l))
        if klp:
            feats = build_features(policy.basis, z, wq, action=a)
            val = float(feats @ coeff[:, 0])
        else:
            feats = build_features(policy.basis, z, wq)
            val = float(feats @ coeff[:, l])
        if val > best_val:
            best_val = val
            best_a = float(a)
    if best_a is None:
        raise ValueError(f"no feasible grid level at date {n}")
    return best_a


def save_policy(policy: Policy, path) -> None:
    """Serialize a policy to JSON; floats round-trip bit-exactly."""
    basis = policy.basis
    data = {
        "format": POLICY_FORMAT,
        "grid": {"levels": policy.grid.levels.tolist(), "step": policy.grid.step},
        "basis": {
            "predictor_scales": basis.predictor_scales.tolist(),
            "wealth_transform": utility_tag(basis.wealth_transform),
            "w0": basis.w0,
            "degree": basis.degree,
            "include_cross_terms": basis.include_cross_terms,
            "n_action_inputs": basis.n_action_inputs,
        },
        "utility": utility_tag(policy.utility),
        "w0": policy.w0,
        "n_steps": policy.n_steps,
        "algorithm": policy.algorithm,
        "initial_action": policy.initial_action,
        "initial_cv": policy.initial_cv.tolist(),
        "terminal_rule": policy.terminal_rule,
        "coefficients": {
            str(n): mat.tolist() for n, mat in sorted(policy.coefficients.items())
        },
        "w_bounds": None if policy.w_bounds is None else {
            str(n): wb.tolist() for n, wb in sorted(policy.w_bounds.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_policy(path) -> Policy:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != POLICY_FORMAT:
        raise ValueError(f"unrecognized policy format {data.get('format')!r}")
    basis = BasisSpec(
        predictor_scales=np.array(data["basis"]["predictor_scales"]),
        wealth_transform=utility_from_tag(data["basis"]["wealth_transform"]),
        w0=data["basis"]["w0"],
        degree=data["basis"]["degree"],
        include_cross_terms=data["basis"]["include_cross_terms"],
        n_action_inputs=data["basis"]["n_action_inputs"],
    )
    return Policy(
        grid=ControlGrid(levels=np.array(data["grid"]["levels"]), step=data["grid"]["step"]),
        basis=basis,
        utility=utility_from_tag(data["utility"]),
        w0=data["w0"],
        n_steps=data["n_steps"],
        algorithm=data["algorithm"],
        coefficients={int(n): np.array(mat) for n, mat in data["coefficients"].items()},
        initial_action=data["initial_action"],
        initial_cv=np.array(data["initial_cv"]),
        terminal_rule=data["terminal_rule"],
        w_bounds=None if data.get("w_bounds") is None else {
            int(n): np.array(wb) for n, wb in data["w_bounds"].items()
        },
    )
