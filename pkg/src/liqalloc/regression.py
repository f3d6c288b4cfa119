"""Polynomial regression basis over transformed state variables.

Exogenous predictors are scaled by their unconditional sample means
and the wealth variable enters through a utility transform u(w / w0),
so all regression inputs live on comparable scales.  The feature
vector collects every monomial of total degree <= degree in the
transformed inputs.  Least squares is solved by SVD: rank-deficient
systems get the minimum-norm solution, and badly conditioned ones are
refit with a small ridge penalty.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .utility import Utility, floor_wealth

RIDGE_CONDITION_LIMIT = 1e12
RIDGE_SCALE = 1e-8


@lru_cache(maxsize=None)
def _monomial_exponents(n_inputs: int, degree: int, cross_terms: bool) -> np.ndarray:
    rows = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(n_inputs), deg):
            if not cross_terms and len(set(combo)) > 1:
                continue
            row = np.zeros(n_inputs, dtype=np.int64)
            for var in combo:
                row[var] += 1
            rows.append(row)
    out = np.array(rows, dtype=np.int64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BasisSpec:
    """Defines the regression inputs and their monomial expansion.

    Inputs are (scaled predictors, transformed wealth) plus
    n_action_inputs trailing raw control inputs for surfaces that
    regress on the allocation itself.
    """

    predictor_scales: np.ndarray
    wealth_transform: Utility
    w0: float
    degree: int = 2
    include_cross_terms: bool = True
    n_action_inputs: int = 0

    def __post_init__(self) -> None:
        scales = np.atleast_1d(np.asarray(self.predictor_scales, dtype=float))
        if np.any(scales == 0) or not np.isfinite(scales).all():
            raise ValueError(f"predictor scales must be finite and nonzero: {scales}")
        if self.degree < 1:
            raise ValueError(f"degree must be at least 1, got {self.degree}")
        if self.w0 <= 0:
            raise ValueError(f"w0 must be positive, got {self.w0}")
        if self.n_action_inputs not in (0, 1):
            raise ValueError("at most one action input is supported")
        scales.flags.writeable = False
        object.__setattr__(self, "predictor_scales", scales)

    @property
    def n_inputs(self) -> int:
        return self.predictor_scales.shape[0] + 1 + self.n_action_inputs

    def exponents(self) -> np.ndarray:
        return _monomial_exponents(self.n_inputs, self.degree, self.include_cross_terms)

    @property
    def n_features(self) -> int:
        return self.exponents().shape[0]


def predictor_scales_from_sample(predictors: np.ndarray) -> np.ndarray:
    """Scale each predictor by the magnitude of its sample mean.

    Falls back to the sample standard deviation for mean-zero factors,
    and to 1.0 for constant-zero factors.
    """
    predictors = np.asarray(predictors, dtype=float)
    if predictors.shape[-1] == 0:
        return np.zeros(0)
    flat = predictors.reshape(-1, predictors.shape[-1])
    mean = np.abs(flat.mean(axis=0))
    std = flat.std(axis=0)
    scales = mean.copy()
    weak = scales < 1e-12 * np.maximum(std, 1.0)
    scales[weak] = std[weak]
    scales[scales == 0] = 1.0
    return scales


def _transformed_inputs(spec: BasisSpec, z: np.ndarray, w: np.ndarray, actions) -> list:
    p = spec.predictor_scales.shape[0]
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None] if p == 1 and z.shape[0] != p else z[None, :]
    if z.shape[-1] != p:
        raise ValueError(f"predictors have {z.shape[-1]} columns, expected {p}")
    zs = z / spec.predictor_scales
    u = spec.wealth_transform.u(floor_wealth(np.asarray(w, dtype=float), spec.w0) / spec.w0)
    cols = [zs[:, i] for i in range(p)] + [np.atleast_1d(u)]
    if spec.n_action_inputs:
        if actions is None:
            raise ValueError("basis expects an action input")
        cols.append(np.atleast_1d(np.asarray(actions, dtype=float)))
    elif actions is not None:
        raise ValueError("basis does not take an action input")
    return cols


def build_feature_matrix(
    spec: BasisSpec,
    z: np.ndarray,
    w: np.ndarray,
    actions=None,
) -> np.ndarray:
    """Feature matrix (M, K) for M states (z rows, wealth entries)."""
    cols = _transformed_inputs(spec, z, w, actions)
    m = max(c.shape[0] for c in cols)
    exps = spec.exponents()
    out = np.ones((m, exps.shape[0]))
    for k, row in enumerate(exps):
        for var, e in enumerate(row):
            if e == 1:
                out[:, k] *= cols[var]
            elif e > 1:
                out[:, k] *= cols[var] ** e
    return out


def build_features(spec: BasisSpec, z, w, action=None) -> np.ndarray:
    """Feature vector (K,) for one state."""
    z = np.atleast_1d(np.asarray(z, dtype=float))[None, :]
    a = None if action is None else np.atleast_1d(float(action))
    return build_feature_matrix(spec, z, np.atleast_1d(float(w)), a)[0]


@dataclass(frozen=True)
class CoefficientVector:
    beta: np.ndarray
    basis: Optional[BasisSpec] = None

    def __post_init__(self) -> None:
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if not np.isfinite(beta).all():
            raise ValueError("coefficients contain non-finite values")
        if self.basis is not None and beta.shape[0] != self.basis.n_features:
            raise ValueError(
                f"{beta.shape[0]} coefficients for a {self.basis.n_features}-feature basis"
            )
        object.__setattr__(self, "beta", beta)


def lstsq_ridge(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least squares with a ridge fallback for near-singular systems.

    Columns are scaled to unit RMS before solving so the conditioning
    test reflects genuine collinearity rather than units; a utility
    transform can shrink the wealth feature by many orders of magnitude,
    and without equilibration the SVD cutoff silently drops it.  Solved
    by SVD; exactly singular systems return the minimum-norm solution.
    When the singular value spread still exceeds RIDGE_CONDITION_LIMIT
    the system is refit with a ridge penalty of RIDGE_SCALE *
    trace(X'X) / K.  Runs single-threaded so the result does not depend
    on the BLAS thread count.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows vs {y.shape[0]} targets")
    if not np.any(x):
        raise ValueError("feature matrix is identically zero")
    col_scale = np.sqrt(np.mean(x * x, axis=0))
    col_scale[col_scale == 0.0] = 1.0
    xs = x / col_scale
    with threadpool_limits(limits=1):
        beta, _, rank, sv = np.linalg.lstsq(xs, y, rcond=None)
        if sv[-1] > 0 and sv[0] / sv[-1] > RIDGE_CONDITION_LIMIT:
            k = x.shape[1]
            gram = xs.T @ xs
            gram.flat[:: k + 1] += RIDGE_SCALE * np.trace(gram) / k
            beta = np.linalg.solve(gram, xs.T @ y)
    return beta / (col_scale[:, None] if beta.ndim == 2 else col_scale)


def fit(features: np.ndarray, targets: np.ndarray, basis: Optional[BasisSpec] = None) -> CoefficientVector:
    """Regress targets on features, returning the coefficient vector."""
    beta = lstsq_ridge(features, np.asarray(targets, dtype=float))
    return CoefficientVector(beta=beta, basis=basis)


def evaluate(coef: CoefficientVector, z, w, action=None) -> float:
    """Evaluate a fitted value surface at one state."""
    if coef.basis is None:
        raise ValueError("coefficient vector has no basis attached")
    return float(build_features(coef.basis, z, w, action) @ coef.beta)
