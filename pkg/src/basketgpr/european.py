"""European basket prices: exact-integration surrogate, QMC, closed forms.

The exact-integration route fits a squared-exponential GPR to the payoff in
log-shock space; the Gaussian expectation of that surrogate then has a
closed form, so one fit prices the option at inception and at every later
rebalancing date almost for free. That is what makes it usable as a control
variate inside the backward recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import ndtr

from .errors import ConfigError, NotPositiveDefinite, UncachedDate, WrongPayoff
from .gpr import SQEXP, GprModel, fit
from .lowdisc import gaussian_block, halton_points, HaltonConfig
from .market import (ARITHMETIC_PUT, GEOMETRIC_PUT, MAX_CALL, ModelParams,
                     Payoff, cholesky_root, payoff_eval)
from .oracles import geometric_to_1d

__all__ = [
    "EiSurrogate",
    "build_ei_surrogate",
    "ei_price_t0",
    "ei_price_t",
    "ei_price_batch",
    "qmc_european",
    "qmc_european_batch",
    "geometric_closed_form",
    "bs_put",
]


@dataclass(frozen=True)
class _DateFactor:
    """Cached pieces of ((T-t) Pi + ls^2 I) for one valuation date."""

    chol: np.ndarray          # lower triangular L
    log_norm: float           # d*log(ls) - 0.5*logdet
    v: np.ndarray             # L^-1 Z^T, (d, Q)
    vsq: np.ndarray           # squared column norms of v, (Q,)


@dataclass(frozen=True)
class EiSurrogate:
    """Squared-exponential payoff surrogate in log-shock space.

    Immutable after construction; the per-date factor cache is built
    eagerly, so pricing calls never mutate shared state.
    """

    params: ModelParams
    payoff: Payoff
    z_points: np.ndarray                       # (Q, d)
    gpr: GprModel
    pi_matrix: np.ndarray                      # rho_ij sigma_i sigma_j
    maturity: float
    date_factors: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.z_points.shape[0]


def _make_factor(s: "EiSurrogate", t: float) -> _DateFactor:
    tau = s.maturity - t
    ls = s.gpr.kernel.length_scale
    d = s.pi_matrix.shape[0]
    a = tau * s.pi_matrix + ls * ls * np.eye(d)
    try:
        low = cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"covariance factor at t={t} not PD") from exc
    log_norm = d * math.log(ls) - float(np.log(np.diag(low)).sum())
    v = solve_triangular(low, s.z_points.T, lower=True, check_finite=False)
    return _DateFactor(chol=low, log_norm=log_norm, v=v, vsq=(v * v).sum(axis=0))


def build_ei_surrogate(params: ModelParams, payoff: Payoff, q_points: int,
                       dates: tuple[float, ...] = (0.0,),
                       quantile_map: bool = True,
                       leap: int | None = None, skip: int = 0,
                       seed: int = 0) -> EiSurrogate:
    """Fit the payoff surrogate on Q quasi-random terminal log-shocks.

    ``quantile_map`` pushes Halton points through the normal quantile so the
    z-points follow the law of the terminal shock vector; switching it off
    reproduces the rawer construction that scales cube points directly.
    Every date whose covariance factor will be queried must be listed.
    """
    if q_points < 2:
        raise ConfigError("need at least two surrogate points")
    t_mat = params.maturity
    if quantile_map:
        g = gaussian_block(params.dim, q_points, leap=leap, skip=skip)
    else:
        g = halton_points(HaltonConfig(params.dim, leap=leap, skip=skip), 1, q_points)
    root = cholesky_root(params.corr)
    z = math.sqrt(t_mat) * params.vols * (g @ root.T)
    states = params.spot * np.exp(params.drift() * t_mat + z)
    targets = payoff_eval(payoff, states)
    model = fit(z, targets, family=SQEXP, seed=seed)
    pi = params.corr * np.outer(params.vols, params.vols)
    s = EiSurrogate(params=params, payoff=payoff, z_points=z, gpr=model,
                    pi_matrix=pi, maturity=t_mat)
    for t in dict.fromkeys((0.0, *dates)):
        if not 0.0 <= t < t_mat:
            raise ConfigError("surrogate dates must lie in [0, maturity)")
        if not s.gpr.is_constant:
            s.date_factors[float(t)] = _make_factor(s, float(t))
    return s


def _shocks_from_states(s: EiSurrogate, t: float, states: np.ndarray) -> np.ndarray:
    """Invert states = spot * exp(drift t + z) for the shock vectors z."""
    return np.log(states / s.params.spot) - s.params.drift() * t


def ei_price_batch(s: EiSurrogate, t: float, states: np.ndarray) -> np.ndarray:
    """Surrogate European prices at date ``t`` for a batch of states (n, d)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    tau = s.maturity - t
    if s.gpr.is_constant:
        return np.full(states.shape[0], math.exp(-s.params.rate * tau) * s.gpr.y_mean)
    key = float(t)
    if key not in s.date_factors:
        raise UncachedDate(f"no covariance factor cached for t={t}; "
                           "pass the date to build_ei_surrogate")
    fac: _DateFactor = s.date_factors[key]
    zt = _shocks_from_states(s, t, states)
    w = solve_triangular(fac.chol, zt.T, lower=True, check_finite=False)
    # (Q, n) quadratic forms |L^-1 (z_q - z~_i)|^2 via the inner-product split
    quad = fac.vsq[:, None] - 2.0 * (fac.v.T @ w) + (w * w).sum(axis=0)[None, :]
    kernel_part = np.exp(fac.log_norm - 0.5 * quad)
    sf2 = s.gpr.kernel.signal_var
    vals = s.gpr.y_mean + sf2 * (s.gpr.weights @ kernel_part)
    return math.exp(-s.params.rate * tau) * vals


def ei_price_t(s: EiSurrogate, t: float, state: np.ndarray) -> float:
    """Surrogate European price at date ``t`` given the spot vector there."""
    return float(ei_price_batch(s, t, np.asarray(state, dtype=np.float64))[0])


def ei_price_t0(s: EiSurrogate) -> float:
    """Price at inception; identical to `ei_price_t` at (0, spot)."""
    return ei_price_t(s, 0.0, s.params.spot)


_QMC_CHUNK_ENTRIES = 16_000_000


def qmc_european_batch(params: ModelParams, payoff: Payoff, t: float,
                       states: np.ndarray, n_samples: int,
                       leap: int | None = None, skip: int = 0) -> np.ndarray:
    """Deterministic QMC European prices at date ``t`` for a batch of states.

    One leaped-Halton Gaussian block drives every state in the batch; the
    per-state work is a rank-one rescaling of the shared terminal shocks.
    """
    if n_samples < 2:
        raise ConfigError("need at least two QMC samples")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n_states, d = states.shape
    tau = params.maturity - t
    if tau < 0:
        raise ConfigError("valuation date beyond maturity")
    disc = math.exp(-params.rate * tau)
    forward = states * np.exp(params.drift() * tau)
    if tau == 0.0 or (params.vols == 0).all():
        return disc * np.atleast_1d(payoff_eval(payoff, forward))

    root = cholesky_root(params.corr)
    acc = np.zeros(n_states)
    chunk = max(1024, _QMC_CHUNK_ENTRIES // d)
    done = 0
    block = gaussian_block(d, n_samples, leap=leap, skip=skip)
    while done < n_samples:
        m = min(chunk, n_samples - done)
        w = block[done:done + m] @ root.T
        scaled = math.sqrt(tau) * params.vols * w
        if payoff.kind == GEOMETRIC_PUT:
            gm_shock = np.exp(scaled.mean(axis=1))          # (m,)
            gm_fwd = np.exp(np.log(forward).mean(axis=1))   # (n_states,)
            pay = np.maximum(payoff.strike - gm_fwd[:, None] * gm_shock[None, :], 0.0)
            acc += pay.sum(axis=1)
        else:
            b = np.exp(scaled)                              # (m, d)
            if payoff.kind == ARITHMETIC_PUT:
                means = (b @ forward.T) / d                 # (m, n_states)
                acc += np.maximum(payoff.strike - means, 0.0).sum(axis=0)
            else:
                buf = np.empty_like(b)
                for i in range(n_states):
                    np.multiply(b, forward[i], out=buf)
                    acc[i] += np.maximum(buf.max(axis=1) - payoff.strike, 0.0).sum()
        done += m
    return disc * acc / n_samples


def qmc_european(params: ModelParams, payoff: Payoff, t: float, state: np.ndarray,
                 n_samples: int = 1_000_000, seed: int = 0,
                 leap: int | None = None, skip: int = 0) -> float:
    """Discounted QMC average payoff from one state; deterministic given config.

    ``seed`` is accepted for interface symmetry with the Monte Carlo engines
    but has no effect: the Halton stream is fixed by (leap, skip).
    """
    del seed
    return float(qmc_european_batch(params, payoff, t, state, n_samples,
                                    leap=leap, skip=skip)[0])


def bs_put(spot: float, strike: float, rate: float, dividend: float,
           sigma: float, tau: float) -> float:
    """Plain Black-Scholes European put with continuous dividend yield."""
    if tau <= 0 or sigma <= 0:
        return max(strike - spot * math.exp((rate - dividend) * max(tau, 0.0)), 0.0) \
            * math.exp(-rate * max(tau, 0.0))
    srt = sigma * math.sqrt(tau)
    d1 = (math.log(spot / strike) + (rate - dividend + 0.5 * sigma * sigma) * tau) / srt
    d2 = d1 - srt
    return float(strike * math.exp(-rate * tau) * ndtr(-d2)
                 - spot * math.exp(-dividend * tau) * ndtr(-d1))


def geometric_closed_form(params: ModelParams, payoff: Payoff, t: float,
                          state: np.ndarray) -> float:
    """Exact European price of the geometric-mean put via the 1-D reduction."""
    if payoff.kind != GEOMETRIC_PUT:
        raise WrongPayoff("closed form only exists for the geometric-mean put")
    state = np.atleast_1d(np.asarray(state, dtype=np.float64))
    _, sigma_hat, eta_hat = geometric_to_1d(params)
    spot_hat = float(np.exp(np.log(state).mean()))
    return bs_put(spot_hat, payoff.strike, params.rate, eta_hat, sigma_hat,
                  params.maturity - t)
