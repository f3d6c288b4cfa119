"""Exogenous market models: path simulation and calibration.

A PathSet holds simulated return predictors and asset log-returns on a
fixed (path, time) grid with N+1 dates; the entry at date 0 is the
current predictor observation, not a traded return.  Two generators
are provided: a first-order vector autoregression with Gaussian
innovations, and an IID lognormal single-asset model.  Randomness
comes from a counter-based bit generator keyed by (seed, stream), so a
path's draws depend only on the seed, the purpose stream and its own
index, never on thread scheduling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

STREAM_RETURNS = 0
STREAM_CONTROLS = 1

_SYM_TOL = 1e-10


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for an independent (seed, stream) pair."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class PathSet:
    """Simulated exogenous risk factors on a (path, date) grid."""

    predictors: np.ndarray    # (M, N+1, p)
    log_returns: np.ndarray   # (M, N+1, d); column 0 is not a traded return
    period_length: float      # years per rebalancing period

    def __post_init__(self) -> None:
        pred = np.asarray(self.predictors, dtype=float)
        rets = np.asarray(self.log_returns, dtype=float)
        if pred.ndim != 3 or rets.ndim != 3:
            raise ValueError("predictors and log_returns must be 3-d arrays")
        if pred.shape[:2] != rets.shape[:2]:
            raise ValueError(
                f"path grids disagree: {pred.shape[:2]} vs {rets.shape[:2]}"
            )
        if pred.shape[0] < 1 or pred.shape[1] < 2:
            raise ValueError("need at least one path and one period")
        if not (np.isfinite(pred).all() and np.isfinite(rets).all()):
            raise ValueError("simulated paths contain non-finite values")
        if self.period_length <= 0:
            raise ValueError(f"period_length must be positive, got {self.period_length}")
        pred.flags.writeable = False
        rets.flags.writeable = False
        object.__setattr__(self, "predictors", pred)
        object.__setattr__(self, "log_returns", rets)

    @property
    def n_paths(self) -> int:
        return self.predictors.shape[0]

    @property
    def n_steps(self) -> int:
        return self.predictors.shape[1] - 1

    @property
    def n_predictors(self) -> int:
        return self.predictors.shape[2]

    @property
    def n_assets(self) -> int:
        return self.log_returns.shape[2]


@dataclass(frozen=True)
class Var1Model:
    """First-order vector autoregression z' = c + A z + eps, eps ~ N(0, Sigma)."""

    intercept: np.ndarray
    coefficient_matrix: np.ndarray
    noise_covariance: np.ndarray
    asset_index: int = 0

    def __post_init__(self) -> None:
        c = np.atleast_1d(np.asarray(self.intercept, dtype=float))
        a = np.atleast_2d(np.asarray(self.coefficient_matrix, dtype=float))
        cov = np.atleast_2d(np.asarray(self.noise_covariance, dtype=float))
        p = c.shape[0]
        if a.shape != (p, p) or cov.shape != (p, p):
            raise ValueError(
                f"dimension mismatch: intercept {c.shape}, A {a.shape}, cov {cov.shape}"
            )
        scale = max(float(np.abs(cov).max()), 1.0)
        if np.abs(cov - cov.T).max() > _SYM_TOL * scale:
            raise ValueError("noise covariance is not symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if eigs.min() < -_SYM_TOL * scale:
            raise ValueError(f"noise covariance is not PSD (min eigenvalue {eigs.min()})")
        if not 0 <= self.asset_index < p:
            raise ValueError(f"asset_index {self.asset_index} out of range for p={p}")
        object.__setattr__(self, "intercept", c)
        object.__setattr__(self, "coefficient_matrix", a)
        object.__setattr__(self, "noise_covariance", cov)

    @property
    def n_predictors(self) -> int:
        return self.intercept.shape[0]

    @property
    def n_state_predictors(self) -> int:
        """Every VAR factor conditions future returns."""
        return self.n_predictors

    def unconditional_mean(self) -> np.ndarray:
        p = self.n_predictors
        try:
            return np.linalg.solve(np.eye(p) - self.coefficient_matrix, self.intercept)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "VAR has no stationary mean (I - A is singular)"
            ) from exc


@dataclass(frozen=True)
class IidLognormalModel:
    """IID Gaussian per-period log-returns for a single asset.

    Per-period moments are annual_mean * period_length and
    annual_vol * sqrt(period_length); the predictor tensor carries the
    same values as the log-returns (p = d = 1).
    """

    annual_mean: float
    annual_vol: float
    period_length: float

    def __post_init__(self) -> None:
        if self.annual_vol < 0:
            raise ValueError(f"annual_vol must be nonnegative, got {self.annual_vol}")
        if self.period_length <= 0:
            raise ValueError(f"period_length must be positive, got {self.period_length}")

    @property
    def n_state_predictors(self) -> int:
        """IID returns carry no conditioning information, so the lagged
        return contributes nothing as a regression state."""
        return 0


MarketModel = Union[Var1Model, IidLognormalModel]


def simulate_var1(
    model: Var1Model,
    n_paths: int,
    n_steps: int,
    z0: Optional[np.ndarray] = None,
    seed: int = 0,
    period_length: float = 1.0 / 12.0,
) -> PathSet:
    """Simulate VAR(1) predictor paths from a common starting point.

    z0 defaults to the model's unconditional mean.  Path i is a pure
    function of (seed, i), independent of how many paths are drawn
    alongside it or of any threading.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("need n_paths >= 1 and n_steps >= 1")
    p = model.n_predictors
    if z0 is None:
        z0 = model.unconditional_mean()
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if z0.shape != (p,):
        raise ValueError(f"z0 has shape {z0.shape}, expected ({p},)")

    cov = 0.5 * (model.noise_covariance + model.noise_covariance.T)
    lam, vec = np.linalg.eigh(cov)
    chol_like = vec * np.sqrt(np.clip(lam, 0.0, None))
    normals = rng_stream(seed, STREAM_RETURNS).standard_normal((n_paths, n_steps, p))
    eps = normals @ chol_like.T

    z = np.empty((n_paths, n_steps + 1, p))
    z[:, 0, :] = z0
    a_t = model.coefficient_matrix.T
    for n in range(1, n_steps + 1):
        z[:, n, :] = model.intercept + z[:, n - 1, :] @ a_t + eps[:, n - 1, :]
    returns = z[:, :, [model.asset_index]].copy()
    return PathSet(predictors=z, log_returns=returns, period_length=period_length)


def simulate_iid_lognormal(
    model: IidLognormalModel,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
) -> PathSet:
    if n_paths < 1 or n_steps < 1:
        raise ValueError("need n_paths >= 1 and n_steps >= 1")
    mu = model.annual_mean * model.period_length
    sd = model.annual_vol * np.sqrt(model.period_length)
    normals = rng_stream(seed, STREAM_RETURNS).standard_normal((n_paths, n_steps + 1, 1))
    r = mu + sd * normals
    return PathSet(predictors=r, log_returns=r, period_length=model.period_length)


def simulate(
    model: MarketModel,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    z0: Optional[np.ndarray] = None,
) -> PathSet:
    """Dispatch simulation on the model type."""
    if isinstance(model, Var1Model):
        return simulate_var1(model, n_paths, n_steps, z0=z0, seed=seed)
    if isinstance(model, IidLognormalModel):
        return simulate_iid_lognormal(model, n_paths, n_steps, seed=seed)
    raise ValueError(f"unknown market model type {type(model).__name__}")


def calibrate_var1(history: np.ndarray, asset_index: int = 0) -> Var1Model:
    """Fit a VAR(1) to a (T, p) history by equation-wise least squares.

    The noise covariance is the sample covariance of the residuals.
    Raises ValueError when the regressor cross-moment matrix is rank
    deficient, naming constant columns when they are the cause.
    """
    h = np.asarray(history, dtype=float)
    if h.ndim != 2:
        raise ValueError(f"history must be 2-d (T, p), got shape {h.shape}")
    t_obs, p = h.shape
    if t_obs < p + 2:
        raise ValueError(f"need at least p + 2 = {p + 2} observations, got {t_obs}")
    if not np.isfinite(h).all():
        raise ValueError("history contains non-finite values")

    x = np.column_stack([np.ones(t_obs - 1), h[:-1]])
    y = h[1:]
    beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < p + 1:
        flat = np.flatnonzero(h.max(axis=0) - h.min(axis=0) == 0)
        hint = ""
        if flat.size:
            hint = f"; constant predictor column(s) {flat.tolist()}"
        raise ValueError(
            f"regressor cross-moment matrix is rank deficient (rank {rank} < {p + 1})"
            + hint
        )
    intercept = beta[0]
    coeff = beta[1:].T
    resid = y - x @ beta
    cov = np.atleast_2d(np.cov(resid, rowvar=False, ddof=1))
    return Var1Model(
        intercept=intercept,
        coefficient_matrix=coeff,
        noise_covariance=cov,
        asset_index=asset_index,
    )


def synthetic_var1() -> Var1Model:
    """Built-in two-factor monthly calibration for experiments without data.

    Factor 0 is the traded asset's monthly log-return; factor 1 is a
    slow mean-zero predictor that loads on next month's return.
    """
    intercept = np.array([0.0025, 0.0])
    coeff = np.array([[0.05, 0.10], [0.0, 0.90]])
    cov = np.array([[0.0433 ** 2, -0.2 * 0.0433 * 0.05], [-0.2 * 0.0433 * 0.05, 0.05 ** 2]])
    return Var1Model(intercept=intercept, coefficient_matrix=coeff, noise_covariance=cov)


def load_price_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a price-history CSV and convert it to per-period log-returns.

    The header names the instruments; an optional leading date column
    (ISO-8601, or any non-numeric first column) is ignored.  Returns
    (names, (T-1, p) log-return matrix).
    """
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if len(rows) < 3:
        raise ValueError(f"{path}: need a header and at least two price rows")
    header = [c.strip() for c in rows[0]]
    body = rows[1:]

    drop_first = False
    try:
        float(body[0][0])
    except ValueError:
        drop_first = True
    if drop_first:
        header = header[1:]
        body = [row[1:] for row in body]
    if not header:
        raise ValueError(f"{path}: no instrument columns")

    try:
        prices = np.array([[float(c) for c in row] for row in body])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric price cell ({exc})") from exc
    if prices.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    if np.any(prices <= 0):
        raise ValueError(f"{path}: prices must be positive to take log-returns")
    returns = np.diff(np.log(prices), axis=0)
    return header, returns
