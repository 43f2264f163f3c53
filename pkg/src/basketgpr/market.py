"""Multi-asset Black-Scholes model: parameters, payoffs, state clouds.

All state propagation is exact lognormal stepping on the Cholesky-rotated
driving Brownian motion; there is no Euler discretisation anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NotPositiveDefinite
from .lowdisc import gaussian_block

__all__ = [
    "ModelParams",
    "Payoff",
    "PointCloud",
    "cholesky_root",
    "payoff_eval",
    "design_points",
    "propagate",
]

GEOMETRIC_PUT = "GeometricPut"
ARITHMETIC_PUT = "ArithmeticPut"
MAX_CALL = "MaxCall"
_PAYOFF_KINDS = (GEOMETRIC_PUT, ARITHMETIC_PUT, MAX_CALL)


@dataclass(frozen=True)
class ModelParams:
    """Spot vector, flat rate, dividend/vol vectors, correlation, maturity."""

    spot: np.ndarray
    rate: float
    dividends: np.ndarray
    vols: np.ndarray
    corr: np.ndarray
    maturity: float

    def __post_init__(self) -> None:
        spot = np.atleast_1d(np.asarray(self.spot, dtype=np.float64))
        divs = np.atleast_1d(np.asarray(self.dividends, dtype=np.float64))
        vols = np.atleast_1d(np.asarray(self.vols, dtype=np.float64))
        corr = np.asarray(self.corr, dtype=np.float64)
        d = spot.shape[0]
        if divs.shape != (d,) or vols.shape != (d,) or corr.shape != (d, d):
            raise ConfigError("spot, dividends, vols and corr have inconsistent shapes")
        if not (spot > 0).all():
            raise ConfigError("all spot entries must be strictly positive")
        if (vols < 0).any():
            raise ConfigError("volatilities must be nonnegative")
        if self.maturity <= 0:
            raise ConfigError("maturity must be strictly positive")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise ConfigError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            raise ConfigError("correlation matrix must have unit diagonal")
        if np.abs(corr).max() > 1.0 + 1e-12:
            raise ConfigError("correlation entries must lie in [-1, 1]")
        object.__setattr__(self, "spot", spot)
        object.__setattr__(self, "dividends", divs)
        object.__setattr__(self, "vols", vols)
        object.__setattr__(self, "corr", corr)

    @property
    def dim(self) -> int:
        return self.spot.shape[0]

    def drift(self) -> np.ndarray:
        """Risk-neutral log-drift rate r - eta_i - sigma_i^2 / 2, per asset."""
        return self.rate - self.dividends - 0.5 * self.vols**2

    @staticmethod
    def equicorrelated(d: int, spot: float, rate: float, dividend: float,
                       vol: float, rho: float, maturity: float) -> "ModelParams":
        """Symmetric basket used throughout the experiments."""
        corr = np.full((d, d), rho)
        np.fill_diagonal(corr, 1.0)
        return ModelParams(
            spot=np.full(d, float(spot)),
            rate=rate,
            dividends=np.full(d, float(dividend)),
            vols=np.full(d, float(vol)),
            corr=corr,
            maturity=maturity,
        )


@dataclass(frozen=True)
class Payoff:
    """Cashflow family: geometric-mean put, arithmetic-mean put or max call."""

    kind: str
    strike: float

    def __post_init__(self) -> None:
        if self.kind not in _PAYOFF_KINDS:
            raise ConfigError(f"unknown payoff kind {self.kind!r}; one of {_PAYOFF_KINDS}")
        if self.strike <= 0:
            raise ConfigError("strike must be strictly positive")


@dataclass(frozen=True)
class PointCloud:
    """P points of d-dimensional state space tagged with their date index."""

    points: np.ndarray
    time_index: int

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ConfigError("PointCloud.points must be a P x d matrix")
        if not (pts > 0).all():
            raise ConfigError("state points must be strictly positive")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def cholesky_root(corr: np.ndarray) -> np.ndarray:
    """Lower-triangular square root of a correlation matrix.

    Retries with escalating diagonal jitter: equicorrelated matrices at
    d ~ 100 sit close to the PSD boundary in floating point.
    """
    corr = np.asarray(corr, dtype=np.float64)
    jitter = 0.0
    for attempt in range(4):
        try:
            root = np.linalg.cholesky(corr + jitter * np.eye(corr.shape[0]))
            return root
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
    raise NotPositiveDefinite(
        "correlation matrix is not positive definite (jitter escalation exhausted)"
    )


def payoff_eval(payoff: Payoff, states: np.ndarray) -> np.ndarray | float:
    """Evaluate the cashflow at one state (d,) or a batch (P, d)."""
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 1
    pts = np.atleast_2d(states)
    if payoff.kind == GEOMETRIC_PUT:
        vals = np.maximum(payoff.strike - np.exp(np.log(pts).mean(axis=1)), 0.0)
    elif payoff.kind == ARITHMETIC_PUT:
        vals = np.maximum(payoff.strike - pts.mean(axis=1), 0.0)
    else:
        vals = np.maximum(pts.max(axis=1) - payoff.strike, 0.0)
    return float(vals[0]) if single else vals


def design_points(params: ModelParams, grid_dt: float, n: int, count: int,
                  leap: int | None = None, skip: int = 0) -> PointCloud:
    """Deterministic predictor cloud at date t_n = n * grid_dt.

    Point p is the forward map of the p-th leaped Halton point pushed through
    the normal quantile:  S0_i * exp(drift_i * t_n + sqrt(t_n) * sigma_i *
    (Sigma g_p)_i)  with Sigma the correlation root.
    """
    if n < 1:
        raise ConfigError("design points live on interior dates, n >= 1")
    if count < 2:
        raise ConfigError("need at least two design points")
    t_n = n * grid_dt
    g = gaussian_block(params.dim, count, leap=leap, skip=skip)
    root = cholesky_root(params.corr)
    shocks = np.sqrt(t_n) * params.vols * (g @ root.T)
    pts = params.spot * np.exp(params.drift() * t_n + shocks)
    return PointCloud(points=pts, time_index=n)


def propagate(points: np.ndarray, params: ModelParams, dt: float,
              gaussians: np.ndarray, chol: np.ndarray | None = None) -> np.ndarray:
    """One exact lognormal step of each point under caller-supplied normals.

    ``points`` is (P, d); ``gaussians`` is (P, M, d) (or (M, d) for P = 1
    broadcasting). Returns successors with matching leading shape. The
    Gaussian supply is explicit so seed control stays with the caller.
    """
    if dt <= 0:
        raise ConfigError("time step must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = np.asarray(gaussians, dtype=np.float64)
    if g.ndim == 2:
        g = g[np.newaxis, :, :]
    if g.shape[0] != pts.shape[0] or g.shape[2] != pts.shape[1]:
        raise ConfigError("gaussians must have shape (P, M, d) matching the points")
    root = cholesky_root(params.corr) if chol is None else chol
    shocks = np.sqrt(dt) * params.vols * (g @ root.T)
    log_step = params.drift() * dt + shocks
    return pts[:, np.newaxis, :] * np.exp(log_step)
