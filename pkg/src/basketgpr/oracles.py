"""Independent benchmarks and variance-study statistics.

The geometric-basket reduction plus a 1-D binomial tree gives an exact
American benchmark in any dimension; the Ekvall lattice cross-checks small
baskets including the arithmetic payoff. Neither path shares code with the
GPR engines, so they can referee them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc

from .errors import ConfigError, DimensionTooLarge, NonPositiveVariance
from .market import (ARITHMETIC_PUT, GEOMETRIC_PUT, MAX_CALL, ModelParams,
                     Payoff, cholesky_root, payoff_eval)

__all__ = [
    "crr_american_put_1d",
    "geometric_to_1d",
    "ekvall_price",
    "RepetitionStudy",
    "sample_std_ci",
    "hartley_fmax",
    "chi2_quantile",
]


def crr_american_put_1d(spot: float, strike: float, rate: float, dividend: float,
                        sigma: float, maturity: float, steps: int = 1000,
                        american: bool = True) -> float:
    """Cox-Ross-Rubinstein put price with continuous dividend yield.

    ``american=False`` switches off early exercise (used as a Black-Scholes
    convergence check).
    """
    if steps < 1:
        raise ConfigError("need at least one tree step")
    dt = maturity / steps
    if sigma * math.sqrt(dt) < 1e-12:
        # Degenerate diffusion: deterministic forward path.
        t = np.linspace(0.0, maturity, steps + 1)
        s_t = spot * np.exp((rate - dividend) * t)
        if american:
            return float(np.max(np.exp(-rate * t) * np.maximum(strike - s_t, 0.0)))
        return float(math.exp(-rate * maturity) * max(strike - s_t[-1], 0.0))
    u = math.exp(sigma * math.sqrt(dt))
    p = (math.exp((rate - dividend) * dt) - 1.0 / u) / (u - 1.0 / u)
    if not 0.0 < p < 1.0:
        raise ConfigError("tree step too coarse: risk-neutral probability outside (0,1)")
    disc = math.exp(-rate * dt)
    j = np.arange(steps + 1)
    values = np.maximum(strike - spot * u ** (2.0 * j - steps), 0.0)
    for n in range(steps - 1, -1, -1):
        values = disc * (p * values[1:n + 2] + (1.0 - p) * values[:n + 1])
        if american:
            s_n = spot * u ** (2.0 * np.arange(n + 1) - n)
            np.maximum(values, strike - s_n, out=values)
    return float(values[0])


def geometric_to_1d(params: ModelParams) -> tuple[float, float, float]:
    """Map a geometric-mean basket to an equivalent 1-D Black-Scholes asset.

    The log of the geometric mean is a Brownian motion with drift
    mean_i(r - eta_i - sigma_i^2/2) and variance (1/d^2) sum_ij rho_ij
    sigma_i sigma_j; the effective dividend makes the 1-D risk-neutral
    drift match. Returns (spot_hat, sigma_hat, eta_hat).
    """
    pi = params.corr * np.outer(params.vols, params.vols)
    d = params.dim
    sigma_hat = math.sqrt(float(pi.sum()) / (d * d))
    mu_bar = float(params.drift().mean())
    eta_hat = params.rate - mu_bar - 0.5 * sigma_hat**2
    spot_hat = float(np.exp(np.log(params.spot).mean()))
    return spot_hat, sigma_hat, eta_hat


_EKVALL_DEFAULT_STEPS = {1: 1000, 2: 200, 3: 100, 4: 50, 5: 50}
_EKVALL_F32_NODES = 60_000_000


def ekvall_price(params: ModelParams, payoff: Payoff, steps: int | None = None,
                 dim_cap: int = 5) -> float:
    """American price on the 2^d-branch recombining lattice.

    Early exercise is allowed at every lattice date. Node count grows as
    (steps+1)^d, so dimensions beyond ``dim_cap`` are refused; very large
    grids drop to float32 to stay inside memory.
    """
    d = params.dim
    if d > dim_cap:
        raise DimensionTooLarge(f"Ekvall lattice limited to d <= {dim_cap}, got {d}")
    if steps is None:
        steps = _EKVALL_DEFAULT_STEPS[d]
    if steps < 1:
        raise ConfigError("need at least one lattice step")
    n_nodes_final = (steps + 1) ** d
    dtype = np.float32 if n_nodes_final > _EKVALL_F32_NODES else np.float64

    dt = params.maturity / steps
    root = cholesky_root(params.corr)
    disc = math.exp(-params.rate * dt)
    drift_dt = params.drift() * dt
    step_w = math.sqrt(dt) * params.vols[:, None] * root  # (d, d): asset i vs axis k

    def payoff_grid(n: int) -> np.ndarray:
        """Payoff over the (n+1)^d lattice at step n."""
        counts = 2.0 * np.arange(n + 1) - n  # m_k = 2 j_k - n
        if payoff.kind == GEOMETRIC_PUT:
            # log geometric mean separates across axes
            base = float(np.log(params.spot).mean() + n * drift_dt.mean())
            v = step_w.mean(axis=0)  # (d,) axis loadings
            log_gm = np.zeros((1,) * d, dtype=dtype)
            for k in range(d):
                shape = [1] * d
                shape[k] = n + 1
                log_gm = log_gm + (v[k] * counts).astype(dtype).reshape(shape)
            return np.maximum(payoff.strike - np.exp(base + log_gm), 0.0)
        acc = None
        for i in range(d):
            log_s = np.zeros((1,) * d, dtype=dtype)
            for k in range(d):
                shape = [1] * d
                shape[k] = n + 1
                log_s = log_s + (step_w[i, k] * counts).astype(dtype).reshape(shape)
            s_i = np.exp(math.log(params.spot[i]) + n * drift_dt[i] + log_s)
            if acc is None:
                acc = s_i
            elif payoff.kind == ARITHMETIC_PUT:
                acc += s_i
            else:
                np.maximum(acc, s_i, out=acc)
        if payoff.kind == ARITHMETIC_PUT:
            return np.maximum(payoff.strike - acc / d, 0.0)
        return np.maximum(acc - payoff.strike, 0.0)

    values = payoff_grid(steps)
    for n in range(steps - 1, -1, -1):
        for axis in range(d):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[axis] = slice(0, n + 1)
            hi[axis] = slice(1, n + 2)
            values = 0.5 * (values[tuple(lo)] + values[tuple(hi)])
        values *= dtype(disc)
        np.maximum(values, payoff_grid(n), out=values)
    return float(values.reshape(-1)[0])


@dataclass(frozen=True)
class RepetitionStudy:
    """Prices of the same contract re-estimated under different seeds."""

    prices: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        p = np.asarray(self.prices, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] < 2:
            raise ConfigError("a repetition study needs at least two prices")
        if not np.isfinite(p).all():
            raise ConfigError("repetition prices must be finite")
        object.__setattr__(self, "prices", p)

    @property
    def count(self) -> int:
        return self.prices.shape[0]


def chi2_quantile(q: float, dof: int) -> float:
    """Chi-square quantile via Wilson-Hilferty start and bisection refinement.

    Accurate to ~1e-10 absolute in the regularized gamma, which is far
    tighter than the confidence intervals built on top of it.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError("quantile level must lie in (0, 1)")
    if dof < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    from .lowdisc import inv_normal_cdf

    z = inv_normal_cdf(q)
    c = 2.0 / (9.0 * dof)
    x = dof * (1.0 - c + z * math.sqrt(c)) ** 3
    x = max(x, 1e-12)

    def cdf(v: float) -> float:
        return float(gammainc(0.5 * dof, 0.5 * v))

    lo, hi = x, x
    while cdf(lo) > q and lo > 1e-300:
        lo *= 0.5
    while cdf(hi) < q:
        hi = max(hi * 2.0, 1e-12)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def sample_std_ci(study: RepetitionStudy | np.ndarray,
                  level: float = 0.95) -> tuple[float, float, float]:
    """Sample standard deviation with its chi-square confidence interval.

    Bounds are sqrt((R-1) s^2 / chi2_{upper}) and sqrt((R-1) s^2 /
    chi2_{lower}) with the usual upper/lower-tail critical values.
    """
    prices = study.prices if isinstance(study, RepetitionStudy) else \
        RepetitionStudy(np.asarray(study)).prices
    r = prices.shape[0]
    s = float(prices.std(ddof=1))
    if s == 0.0:
        return 0.0, 0.0, 0.0
    alpha = 1.0 - level
    upper = chi2_quantile(1.0 - alpha / 2.0, r - 1)
    lower = chi2_quantile(alpha / 2.0, r - 1)
    return s, s * math.sqrt((r - 1) / upper), s * math.sqrt((r - 1) / lower)


def hartley_fmax(variances) -> float:
    """Largest-to-smallest variance ratio (the homogeneity test statistic).

    The comparison against a critical value is left to the caller; no
    quantile tables are embedded.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.size < 2:
        raise ConfigError("need at least two variances")
    if (v <= 0).any() or not np.isfinite(v).all():
        raise NonPositiveVariance("variances must be finite and strictly positive")
    return float(v.max() / v.min())
