"""Post-transaction portfolio solver.

Moving a portfolio to a target allocation changes wealth (through
costs) and prices (through market impact), which in turn change the
share count that realizes the target.  The coupled system

    alpha * W_t = q_t * S_t
    S_t = S_pre + MI(dq)
    W_t = W_pre - TC(dq) - LC(dq) + MI(dq) * q_t

is solved by fixed-point iteration on q_t, starting from the
frictionless guess alpha * W_pre / S_pre and stopping when the summed
relative change across assets drops to tol.  A vectorized variant
iterates many single-asset portfolios at once with per-portfolio
stopping, so each portfolio sees exactly the same iterates as a scalar
solve would.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liquidity import CostModel, ZeroCost, market_impact, switch_cost_components

# Components with |q| below this are compared absolutely in the
# convergence distance, avoiding division by a vanishing target.
SMALL_HOLDING = 1e-12

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 50


@dataclass(frozen=True)
class PortfolioState:
    """Snapshot of holdings: risky allocation, shares, cash, prices, wealth."""

    alpha: np.ndarray
    q: np.ndarray
    q_f: float
    s: np.ndarray
    w: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "s", np.atleast_1d(np.asarray(self.s, dtype=float)))
        object.__setattr__(self, "q_f", float(self.q_f))
        object.__setattr__(self, "w", float(self.w))
        if not (self.alpha.shape == self.q.shape == self.s.shape):
            raise ValueError("alpha, q and s must have matching shapes")
        if np.any(self.s <= 0):
            raise ValueError(f"prices must be positive, got {self.s}")
        held = float(np.dot(self.q, self.s)) + self.q_f
        scale = max(abs(self.w), 1.0)
        if abs(self.w - held) > 1e-8 * scale:
            raise ValueError(
                f"wealth {self.w} does not match holdings {held} (q*s + q_f)"
            )

    @classmethod
    def all_cash(cls, w: float, s) -> "PortfolioState":
        s = np.atleast_1d(np.asarray(s, dtype=float))
        zero = np.zeros_like(s)
        return cls(alpha=zero, q=zero, q_f=float(w), s=s, w=float(w))


@dataclass(frozen=True)
class RebalanceResult:
    state: PortfolioState
    dq: np.ndarray
    iterations: int
    residual: float


def solve_rebalance(
    pre: PortfolioState,
    alpha_target,
    model: CostModel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RebalanceResult:
    """Move a portfolio to a target allocation, settling costs and impact.

    Returns the post-transaction state together with the executed trade,
    the number of fixed-point iterations and the final residual.
    Raises ValueError if impact drives a price nonpositive, if costs
    exhaust wealth, or if the iteration fails to converge.
    """
    a = np.atleast_1d(np.asarray(alpha_target, dtype=float))
    if a.shape != pre.q.shape:
        raise ValueError("alpha_target shape does not match portfolio dimension")
    if np.any(a < 0) or np.any(a > 1) or a.sum() > 1 + 1e-12:
        raise ValueError(f"target allocation {a} outside the admissible set")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")

    q = a * pre.w / pre.s
    s_t = pre.s
    w_t = pre.w
    dist = np.inf
    for it in range(1, max_iter + 1):
        dq = q - pre.q
        mi = np.atleast_1d(market_impact(model, dq))
        s_t = pre.s + mi
        if np.any(s_t <= 0):
            raise ValueError(f"market impact drove a price nonpositive: {s_t}")
        tc, lc, _ = switch_cost_components(model, dq, q, pre.s)
        w_t = pre.w - float(np.sum(tc)) - float(np.sum(lc)) + float(np.sum(mi * q))
        if w_t <= 0:
            raise ValueError(f"switching costs exhausted wealth ({w_t})")
        q_aux = a * w_t / s_t
        step = np.abs(q_aux - q)
        small = np.abs(q_aux) < SMALL_HOLDING
        with np.errstate(invalid="ignore", divide="ignore"):
            dist = float(np.sum(np.where(small, step, step / np.abs(q_aux))))
        q = q_aux
        if dist <= tol:
            break
    else:
        raise ValueError(
            f"rebalance did not converge after {max_iter} iterations "
            f"(residual {dist:.3e})"
        )

    q_f = w_t - float(np.dot(q, s_t))
    state = PortfolioState(alpha=a, q=q, q_f=q_f, s=s_t, w=w_t)
    return RebalanceResult(state=state, dq=q - pre.q, iterations=it, residual=dist)


def transaction_volume(
    pre: PortfolioState,
    alpha_target,
    model: CostModel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Shares traded when moving pre to the target allocation."""
    return solve_rebalance(pre, alpha_target, model, tol=tol, max_iter=max_iter).dq


def rebalance_paths(
    q_pre: np.ndarray,
    qf_pre: np.ndarray,
    s_pre: np.ndarray,
    w_pre: np.ndarray,
    alpha,
    model: CostModel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """Solve many single-asset rebalances at once.

    Inputs are 1-d arrays over portfolios (alpha may be a scalar).
    Each portfolio iterates until its own convergence, mirroring the
    scalar solver exactly.  Returns (q, q_f, s, w, iterations, ok);
    portfolios whose solve fails keep nan state and ok = False instead
    of raising, so callers can exclude them path by path.
    """
    q_pre = np.asarray(q_pre, dtype=float)
    s_pre = np.asarray(s_pre, dtype=float)
    w_pre = np.asarray(w_pre, dtype=float)
    n = q_pre.shape[0]
    a = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))

    if isinstance(model, ZeroCost):
        # One exact iteration: prices and wealth are untouched.
        q = a * w_pre / s_pre
        qf = w_pre - q * s_pre
        iters = np.ones(n, dtype=np.int64)
        ok = np.ones(n, dtype=bool)
        return q, qf, s_pre.copy(), w_pre.copy(), iters, ok

    q_cur = a * w_pre / s_pre
    q_out = np.full(n, np.nan)
    s_out = np.full(n, np.nan)
    w_out = np.full(n, np.nan)
    iters = np.zeros(n, dtype=np.int64)
    ok = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    for it in range(1, max_iter + 1):
        if not active.any():
            break
        dq = q_cur - q_pre
        mi = market_impact(model, dq)
        s_t = s_pre + mi
        tc, lc, mi_ps = switch_cost_components(model, dq, q_cur, s_pre)
        w_t = w_pre - tc - lc + mi_ps * q_cur
        bad = active & ((s_t <= 0) | (w_t <= 0))
        with np.errstate(invalid="ignore", divide="ignore"):
            q_aux = a * w_t / s_t
            step = np.abs(q_aux - q_cur)
            small = np.abs(q_aux) < SMALL_HOLDING
            dist = np.where(small, step, step / np.abs(q_aux))
        iters[active] = it
        conv = active & ~bad & (dist <= tol)
        q_out[conv] = q_aux[conv]
        s_out[conv] = s_t[conv]
        w_out[conv] = w_t[conv]
        ok[conv] = True
        active &= ~(conv | bad)
        q_cur = np.where(active, q_aux, q_cur)

    qf_out = w_out - q_out * s_out
    return q_out, qf_out, s_out, w_out, iters, ok
