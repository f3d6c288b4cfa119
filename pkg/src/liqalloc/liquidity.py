"""Transaction cost, liquidity cost and market impact models.

Three cost structures are supported: a costless model, a proportional
commission on traded notional, and a power-law model in which a trade
of dq shares moves the quoted price permanently by

    MI(dq) = mi_coeff * sigma_day * (dq / vol_day) * (theta / vol_day) ** mi_exponent

dollars per share and costs, per share traded,

    LC(dq) = | MI(dq) / 2
              + lc_coeff * sign(dq) * sigma_day
                * |dq / (delta * vol_day)| ** lc_exponent |

in temporary execution slippage.  MI is signed (buys push the price
up), LC is nonnegative, and both vanish for dq = 0.  All functions
accept scalars or numpy arrays of transaction volumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class LiquidityParams:
    """Microstructure parameters of the traded asset.

    sigma_day and vol_day are the daily price volatility (dollars per
    share) and daily traded volume (shares); theta is shares
    outstanding; delta is the execution window as a fraction of one
    trading day (default five minutes of a 390-minute session).
    """

    sigma_day: float
    vol_day: float
    theta: float
    delta: float = 5.0 / 390.0
    mi_coeff: float = 0.314
    lc_coeff: float = 0.142
    mi_exponent: float = 0.25
    lc_exponent: float = 0.6

    def __post_init__(self) -> None:
        if self.sigma_day < 0:
            raise ValueError(f"sigma_day must be nonnegative, got {self.sigma_day}")
        if self.vol_day <= 0:
            raise ValueError(f"vol_day must be positive, got {self.vol_day}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class ZeroCost:
    """No transaction cost, no liquidity cost, no market impact."""


@dataclass(frozen=True)
class ProportionalTc:
    """Proportional commission only: rate * |dq| * pre-trade price."""

    rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"commission rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class PowerLaw:
    """Power-law liquidity cost and market impact, optional commission."""

    params: LiquidityParams
    tc_rate: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tc_rate < 1.0:
            raise ValueError(f"commission rate must be in [0, 1), got {self.tc_rate}")


CostModel = Union[ZeroCost, ProportionalTc, PowerLaw]


def _as_float_array(x):
    return np.asarray(x, dtype=float)


def market_impact(model: CostModel, dq):
    """Permanent price shift in dollars per share caused by trading dq shares.

    Odd in dq: buys (dq > 0) raise the price, sells lower it.
    """
    dq = _as_float_array(dq)
    if isinstance(model, PowerLaw):
        p = model.params
        out = (
            p.mi_coeff
            * p.sigma_day
            * (dq / p.vol_day)
            * (p.theta / p.vol_day) ** p.mi_exponent
        )
    else:
        out = np.zeros_like(dq)
    return float(out) if out.ndim == 0 else out


def liquidity_cost_per_share(model: CostModel, dq):
    """Temporary execution cost in dollars per share, nonnegative and even in dq."""
    dq = _as_float_array(dq)
    if isinstance(model, PowerLaw):
        p = model.params
        mi = p.mi_coeff * p.sigma_day * (dq / p.vol_day) * (p.theta / p.vol_day) ** p.mi_exponent
        bulk = (
            p.lc_coeff
            * np.sign(dq)
            * p.sigma_day
            * np.abs(dq / (p.delta * p.vol_day)) ** p.lc_exponent
        )
        out = np.abs(0.5 * mi + bulk)
    else:
        out = np.zeros_like(dq)
    return float(out) if out.ndim == 0 else out


def switch_cost_components(model: CostModel, dq, q_post, s_pre):
    """Split one rebalancing trade into its three wealth effects.

    Returns (tc_total, lc_total, mi_per_share): the commission paid on
    traded notional at the pre-trade price, the total temporary
    liquidity cost, and the signed permanent per-share price shift.
    The wealth identity for the trade is
    w_post = w_pre - tc_total - lc_total + mi_per_share * q_post.
    """
    dq = _as_float_array(dq)
    s_pre = _as_float_array(s_pre)
    if np.any(s_pre <= 0):
        raise ValueError("pre-trade price must be positive")
    if isinstance(model, ProportionalTc):
        rate = model.rate
    elif isinstance(model, PowerLaw):
        rate = model.tc_rate
    else:
        rate = 0.0
    tc = rate * np.abs(dq) * s_pre
    lc = liquidity_cost_per_share(model, dq) * np.abs(dq)
    mi = market_impact(model, dq)
    if np.ndim(tc) == 0:
        return float(tc), float(lc), float(mi)
    return tc, lc, mi


def strip_liquidity(model: CostModel) -> CostModel:
    """Drop liquidity cost and market impact, keeping any commission.

    Used to build the cost-blind twin of a problem: the blind solver
    trains as if the asset were perfectly liquid.
    """
    if isinstance(model, PowerLaw):
        if model.tc_rate > 0:
            return ProportionalTc(model.tc_rate)
        return ZeroCost()
    return model
