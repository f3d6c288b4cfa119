"""CRRA and CARA utility functions with closed-form inverses.

Wealth is always passed to these utilities after normalization by
initial wealth, so the risk-aversion parameter is scale free.  Both
utilities expose the forward map ``u`` and the inverse ``u_inv`` needed
for certainty-equivalent calculations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# Terminal wealth is floored at this fraction of initial wealth before
# any utility transform, keeping CRRA defined on disastrous paths.
WEALTH_FLOOR_FRACTION = 1e-6


@dataclass(frozen=True)
class Crra:
    """Constant relative risk aversion: u(w) = w**(1-gamma) / (1-gamma).

    gamma = 1 degenerates to log utility.
    """

    gamma: float

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"risk aversion must be positive, got {self.gamma}")

    def u(self, w):
        w = np.asarray(w, dtype=float)
        if self.gamma == 1.0:
            out = np.log(w)
        else:
            out = w ** (1.0 - self.gamma) / (1.0 - self.gamma)
        return float(out) if out.ndim == 0 else out

    def u_inv(self, y):
        y = np.asarray(y, dtype=float)
        if self.gamma == 1.0:
            out = np.exp(y)
        else:
            out = ((1.0 - self.gamma) * y) ** (1.0 / (1.0 - self.gamma))
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Cara:
    """Constant absolute risk aversion: u(w) = -exp(-gamma * w)."""

    gamma: float

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"risk aversion must be positive, got {self.gamma}")

    def u(self, w):
        out = -np.exp(-self.gamma * np.asarray(w, dtype=float))
        return float(out) if out.ndim == 0 else out

    def u_inv(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y >= 0):
            raise ValueError("CARA utility values must be negative")
        out = -np.log(-y) / self.gamma
        return float(out) if out.ndim == 0 else out


Utility = Union[Crra, Cara]


def utility_tag(u: Utility) -> str:
    """Serialize a utility to a short string tag, e.g. 'crra:5.0'."""
    if isinstance(u, Crra):
        return f"crra:{u.gamma!r}"
    if isinstance(u, Cara):
        return f"cara:{u.gamma!r}"
    raise ValueError(f"unknown utility type {type(u).__name__}")


def utility_from_tag(tag: str) -> Utility:
    kind, _, gamma = tag.partition(":")
    if kind == "crra":
        return Crra(float(gamma))
    if kind == "cara":
        return Cara(float(gamma))
    raise ValueError(f"unknown utility tag {tag!r}")


def floor_wealth(w, w0: float):
    """Floor wealth at WEALTH_FLOOR_FRACTION of initial wealth."""
    return np.maximum(w, WEALTH_FLOOR_FRACTION * w0)
