"""Backward Bermudan dynamic programs on GPR surrogates.

Four engines share one recursion skeleton and differ only in how the
one-step continuation expectation is estimated:

* gpr-mc      — per-point Monte Carlo clouds, Matern 3/2 surrogate;
* gpr-tree    — 2^d equally weighted lattice branches, Matern 3/2;
* gpr-ei      — exact Gaussian integration of a squared-exponential
                surrogate fitted in log-shock space;
* *-cv        — the same recursion run on the payoff minus the European
                value (the price gap); the European price at inception is
                added back at the end.

At the last interior date the continuation to maturity needs no surrogate:
the terminal value is the payoff itself (identically zero in gap terms), so
the date-(N-1) value is max(payoff, one-step European estimate) — computed
by simulation, branch averaging or exact integration depending on the
engine — and the backward recursion starts from a regression on those
values.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import ConfigError, DimensionTooLarge, NotPositiveDefinite
from .european import (EiSurrogate, build_ei_surrogate, ei_price_batch,
                       ei_price_t, qmc_european, qmc_european_batch)
from .gpr import MATERN32, SQEXP, GprModel, fit, predict_fast
from .lowdisc import gaussian_block
from .market import (GEOMETRIC_PUT, MAX_CALL, ModelParams, Payoff, PointCloud,
                     cholesky_root, design_points, payoff_eval, propagate)

__all__ = [
    "ExerciseGrid",
    "MethodConfig",
    "PricingResult",
    "price",
    "gpr_mc_price",
    "gpr_mc_cv_price",
    "gpr_tree_price",
    "gpr_ei_american_price",
    "repetition_study",
    "METHODS",
]

GPR_MC = "gpr-mc"
GPR_MC_CV = "gpr-mc-cv"
GPR_TREE = "gpr-tree"
GPR_TREE_CV = "gpr-tree-cv"
GPR_EI = "gpr-ei"
GPR_EI_CV = "gpr-ei-cv"
METHODS = (GPR_MC, GPR_MC_CV, GPR_TREE, GPR_TREE_CV, GPR_EI, GPR_EI_CV)

EI_FORMULA = "ei-formula"
QMC = "qmc"

_MC_TEST_ROWS = 4_000_000   # successor rows predicted per engine block


@dataclass(frozen=True)
class ExerciseGrid:
    """Uniform Bermudan exercise dates t_n = n * T / N, n = 1..N."""

    n_dates: int
    maturity: float

    def __post_init__(self) -> None:
        if self.n_dates < 1:
            raise ConfigError("need at least one exercise date")
        if self.maturity <= 0:
            raise ConfigError("maturity must be positive")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_dates

    def date(self, n: int) -> float:
        return n * self.dt

    @property
    def interior(self) -> range:
        """Indices of the dates carrying design clouds (1 .. N-1)."""
        return range(1, self.n_dates)


@dataclass(frozen=True)
class MethodConfig:
    """Budget knobs of one pricing run.

    ``q_european`` sizes the exact-integration surrogate; ``qmc_samples``
    sizes the QMC European source. ``european_source=None`` resolves to the
    exact-integration formula for basket puts and QMC for the max-call,
    whose long-maturity payoff the formula handles poorly.
    """

    method: str
    n_design: int = 1000
    n_sims: int = 10_000
    q_european: int = 8000
    european_source: str | None = None
    qmc_samples: int = 1_000_000
    seed: int = 0
    tree_dim_cap: int = 10
    leap: int | None = None
    skip: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; one of {METHODS}")
        if self.n_design < 2:
            raise ConfigError("n_design (P) must be >= 2")
        if self.method in (GPR_MC, GPR_MC_CV) and self.n_sims < 1:
            raise ConfigError("n_sims (M) must be >= 1 for Monte Carlo methods")
        if self.q_european < 2:
            raise ConfigError("q_european (Q) must be >= 2")
        if self.qmc_samples < 2:
            raise ConfigError("qmc_samples must be >= 2")
        if self.european_source not in (None, EI_FORMULA, QMC):
            raise ConfigError(f"european_source must be one of ({EI_FORMULA!r}, {QMC!r})")

    @property
    def use_cv(self) -> bool:
        return self.method in (GPR_MC_CV, GPR_TREE_CV, GPR_EI_CV)

    def resolved_source(self, payoff: Payoff) -> str:
        if self.european_source is not None:
            return self.european_source
        return QMC if payoff.kind == MAX_CALL else EI_FORMULA


@dataclass(frozen=True)
class PricingResult:
    """Price plus audit trail; ``gap``/``european`` only for CV methods."""

    price: float
    method: str
    config: dict
    wallclock_ms: float
    gap: float | None = None
    european: float | None = None
    rep_prices: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Precomputed, seed-independent plan shared across repetitions


@dataclass(frozen=True)
class _Plan:
    params: ModelParams
    payoff: Payoff
    grid: ExerciseGrid
    cfg: MethodConfig
    chol: np.ndarray
    clouds: dict                      # n -> PointCloud for interior dates
    intrinsic: dict                   # n -> payoff values at the cloud
    euro_design: dict                 # n -> European values at the cloud (CV)
    euro_at0: float | None
    surrogate: EiSurrogate | None     # kept for audit; may back euro_design
    z_clouds: dict = field(default_factory=dict)   # gpr-ei predictors per date
    tree_factors: np.ndarray | None = None         # (2^d, d) branch multipliers
    terminal_model: GprModel | None = None         # payoff surrogate at t_N = T


def _config_echo(params: ModelParams, payoff: Payoff, grid: ExerciseGrid,
                 cfg: MethodConfig) -> dict:
    return {
        "method": cfg.method,
        "payoff": payoff.kind,
        "strike": payoff.strike,
        "d": params.dim,
        "P": cfg.n_design,
        "M": cfg.n_sims,
        "Q": cfg.q_european,
        "N": grid.n_dates,
        "seed": cfg.seed,
        "european_source": cfg.resolved_source(payoff) if cfg.use_cv else "",
        "qmc_samples": cfg.qmc_samples,
    }


def _build_plan(params: ModelParams, payoff: Payoff, grid: ExerciseGrid,
                cfg: MethodConfig) -> _Plan:
    if abs(grid.maturity - params.maturity) > 1e-12:
        raise ConfigError("exercise grid maturity must match the model maturity")
    d = params.dim
    if cfg.method in (GPR_TREE, GPR_TREE_CV) and d > cfg.tree_dim_cap:
        raise DimensionTooLarge(
            f"tree branching is 2^d; d={d} exceeds the cap {cfg.tree_dim_cap}")

    chol = cholesky_root(params.corr)
    clouds: dict[int, PointCloud] = {}
    intrinsic: dict[int, np.ndarray] = {}
    z_clouds: dict[int, np.ndarray] = {}
    g = gaussian_block(d, cfg.n_design, leap=cfg.leap, skip=cfg.skip)
    rotated = g @ chol.T
    for n in grid.interior:
        t_n = grid.date(n)
        z = math.sqrt(t_n) * params.vols * rotated
        pts = params.spot * np.exp(params.drift() * t_n + z)
        clouds[n] = PointCloud(points=pts, time_index=n)
        intrinsic[n] = payoff_eval(payoff, pts)
        if cfg.method in (GPR_EI, GPR_EI_CV):
            z_clouds[n] = z

    euro_design: dict[int, np.ndarray] = {}
    euro_at0 = None
    surrogate = None
    if cfg.use_cv:
        source = cfg.resolved_source(payoff)
        if source == EI_FORMULA:
            dates = tuple(grid.date(n) for n in grid.interior)
            surrogate = build_ei_surrogate(params, payoff, cfg.q_european,
                                           dates=dates, leap=cfg.leap,
                                           skip=cfg.skip, seed=cfg.seed)
            for n in grid.interior:
                euro_design[n] = ei_price_batch(surrogate, grid.date(n), clouds[n].points)
            euro_at0 = ei_price_t(surrogate, 0.0, params.spot)
        else:
            for n in grid.interior:
                euro_design[n] = qmc_european_batch(
                    params, payoff, grid.date(n), clouds[n].points,
                    cfg.qmc_samples, leap=cfg.leap, skip=cfg.skip)
            euro_at0 = qmc_european(params, payoff, 0.0, params.spot,
                                    cfg.qmc_samples, leap=cfg.leap, skip=cfg.skip)

    tree_factors = None
    if cfg.method in (GPR_TREE, GPR_TREE_CV):
        eps = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
        shocks = math.sqrt(grid.dt) * params.vols * (eps @ chol.T)
        tree_factors = np.exp(params.drift() * grid.dt + shocks)

    terminal_model = None
    if cfg.method == GPR_EI:
        # Payoff surrogate at maturity: the plain exact-integration engine
        # integrates it for the last one-step continuation.
        z_t = math.sqrt(grid.maturity) * params.vols * rotated
        states_t = params.spot * np.exp(params.drift() * grid.maturity + z_t)
        terminal_model = fit(z_t, payoff_eval(payoff, states_t),
                             family=SQEXP, seed=grid.n_dates)

    return _Plan(params=params, payoff=payoff, grid=grid, cfg=cfg, chol=chol,
                 clouds=clouds, intrinsic=intrinsic, euro_design=euro_design,
                 euro_at0=euro_at0, surrogate=surrogate, z_clouds=z_clouds,
                 tree_factors=tree_factors, terminal_model=terminal_model)


def _modified_payoff(plan: _Plan, n: int) -> np.ndarray:
    """Psi at the date-n cloud, minus the European value in CV mode."""
    base = plan.intrinsic[n]
    if plan.cfg.use_cv:
        return base - plan.euro_design[n]
    return base


def _gauss_stream(seed: int, n: int, p: int) -> np.random.Generator:
    """Gaussian supply partitioned by (date, design point) for determinism."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(n, p)))


def _mc_terminal_continuation(plan: _Plan, points: np.ndarray, seed: int,
                              n: int) -> np.ndarray:
    """Undiscounted mean payoff over M one-step simulations to maturity."""
    cfg = plan.cfg
    m = cfg.n_sims
    d = points.shape[1]
    out = np.empty(points.shape[0])
    step = max(1, _MC_TEST_ROWS // m)
    for p0 in range(0, points.shape[0], step):
        batch = points[p0:p0 + step]
        gauss = np.stack([
            _gauss_stream(seed, n, p).standard_normal((m, d))
            for p in range(p0, p0 + batch.shape[0])
        ])
        succ = propagate(batch, plan.params, plan.grid.dt, gauss, chol=plan.chol)
        pay = payoff_eval(plan.payoff, succ.reshape(-1, d))
        out[p0:p0 + batch.shape[0]] = pay.reshape(batch.shape[0], m).mean(axis=1)
    return out


def _mc_continuation(plan: _Plan, model: GprModel, points: np.ndarray,
                     seed: int, n: int) -> np.ndarray:
    """Undiscounted mean of the date-(n+1) surrogate over M successors."""
    cfg = plan.cfg
    m = cfg.n_sims
    d = points.shape[1]
    n_pts = points.shape[0]
    out = np.empty(n_pts)
    step = max(1, _MC_TEST_ROWS // m)
    for p0 in range(0, n_pts, step):
        batch = points[p0:p0 + step]
        gauss = np.stack([
            _gauss_stream(seed, n, p).standard_normal((m, d))
            for p in range(p0, p0 + batch.shape[0])
        ])
        succ = propagate(batch, plan.params, plan.grid.dt, gauss, chol=plan.chol)
        preds = predict_fast(model, succ.reshape(-1, d))
        out[p0:p0 + batch.shape[0]] = preds.reshape(batch.shape[0], m).mean(axis=1)
    return out


def _tree_continuation(plan: _Plan, model: GprModel, points: np.ndarray) -> np.ndarray:
    succ = points[:, None, :] * plan.tree_factors[None, :, :]
    n_branch = plan.tree_factors.shape[0]
    preds = predict_fast(model, succ.reshape(-1, points.shape[1]))
    return preds.reshape(points.shape[0], n_branch).mean(axis=1)


def _ei_continuation(plan: _Plan, model: GprModel, z_next: np.ndarray,
                     z_here: np.ndarray) -> np.ndarray:
    """Exact one-step Gaussian integral of the squared-exponential surrogate.

    The shock increment over dt has covariance dt*Pi, so the integral of
    each kernel bump is the closed-form Gaussian convolution.
    """
    if model.is_constant:
        return np.full(z_here.shape[0], model.y_mean)
    d = z_next.shape[1]
    ls = model.kernel.length_scale
    pi = plan.params.corr * np.outer(plan.params.vols, plan.params.vols)
    a = plan.grid.dt * pi + ls * ls * np.eye(d)
    try:
        low = cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("one-step integration factor not PD") from exc
    log_norm = d * math.log(ls) - float(np.log(np.diag(low)).sum())
    v = solve_triangular(low, z_next.T, lower=True, check_finite=False)
    w = solve_triangular(low, z_here.T, lower=True, check_finite=False)
    quad = (v * v).sum(axis=0)[:, None] - 2.0 * (v.T @ w) + (w * w).sum(axis=0)[None, :]
    kernel_part = np.exp(log_norm - 0.5 * quad)
    return model.y_mean + model.kernel.signal_var * (model.weights @ kernel_part)


def _run_plan(plan: _Plan, seed: int) -> tuple[float, float | None, float | None]:
    """Backward recursion; returns (price, gap, european)."""
    cfg, grid, params, payoff = plan.cfg, plan.grid, plan.params, plan.payoff
    n_dates = grid.n_dates
    disc = math.exp(-params.rate * grid.dt)
    is_mc = cfg.method in (GPR_MC, GPR_MC_CV)
    is_tree = cfg.method in (GPR_TREE, GPR_TREE_CV)
    is_ei = cfg.method in (GPR_EI, GPR_EI_CV)
    kernel_family = SQEXP if is_ei else MATERN32

    model = None
    if n_dates >= 2:
        # Last interior date: the terminal value is the payoff itself (zero
        # gap), so the continuation is a one-step European estimate.
        n_last = n_dates - 1
        pts = plan.clouds[n_last].points
        if cfg.use_cv:
            y = np.maximum(_modified_payoff(plan, n_last), 0.0)
        else:
            if is_mc:
                cont = _mc_terminal_continuation(plan, pts, seed, n_last)
            elif is_tree:
                succ = pts[:, None, :] * plan.tree_factors[None, :, :]
                pay = payoff_eval(payoff, succ.reshape(-1, params.dim))
                cont = pay.reshape(pts.shape[0], -1).mean(axis=1)
            else:
                cont = _ei_continuation(plan, plan.terminal_model,
                                        plan.terminal_model.predictors,
                                        plan.z_clouds[n_last])
            y = np.maximum(plan.intrinsic[n_last], disc * cont)
        x = plan.z_clouds[n_last] if is_ei else pts
        model = fit(x, y, family=kernel_family, seed=n_last)
        for n in range(n_dates - 2, 0, -1):
            pts = plan.clouds[n].points
            if is_mc:
                cont = _mc_continuation(plan, model, pts, seed, n)
            elif is_tree:
                cont = _tree_continuation(plan, model, pts)
            else:
                cont = _ei_continuation(plan, model, plan.z_clouds[n + 1],
                                        plan.z_clouds[n])
            y = np.maximum(_modified_payoff(plan, n), disc * cont)
            x = plan.z_clouds[n] if is_ei else pts
            model = fit(x, y, family=kernel_family, seed=n)

    # Inception step from the actual spot.
    spot = params.spot
    if n_dates == 1:
        if cfg.use_cv:
            cont0 = 0.0  # the gap vanishes at maturity
        elif is_mc:
            gauss = _gauss_stream(seed, 0, 0).standard_normal((cfg.n_sims, params.dim))
            succ = propagate(spot[None, :], params, grid.dt, gauss[None, ...],
                             chol=plan.chol)
            cont0 = float(np.mean(payoff_eval(payoff, succ.reshape(-1, params.dim))))
        elif is_tree:
            succ = spot[None, :] * plan.tree_factors
            cont0 = float(np.mean(payoff_eval(payoff, succ)))
        else:
            cont0 = float(_ei_continuation(plan, plan.terminal_model,
                                           plan.terminal_model.predictors,
                                           np.zeros((1, params.dim)))[0])
    elif is_mc:
        gauss = _gauss_stream(seed, 0, 0).standard_normal((cfg.n_sims, params.dim))
        succ = propagate(spot[None, :], params, grid.dt, gauss[None, ...],
                         chol=plan.chol)
        cont0 = float(predict_fast(model, succ.reshape(-1, params.dim)).mean())
    elif is_tree:
        succ = spot[None, :] * plan.tree_factors
        cont0 = float(predict_fast(model, succ).mean())
    else:
        cont0 = float(_ei_continuation(plan, model, plan.z_clouds[1],
                                       np.zeros((1, params.dim)))[0])

    intrinsic0 = float(payoff_eval(payoff, spot))
    if cfg.use_cv:
        # The inception max runs on the gap as everywhere else in the
        # recursion; adding the European back preserves price >= intrinsic.
        gap0 = max(intrinsic0 - plan.euro_at0, disc * cont0)
        return gap0 + plan.euro_at0, gap0, plan.euro_at0
    return max(intrinsic0, disc * cont0), None, None


def price(params: ModelParams, payoff: Payoff, grid: ExerciseGrid,
          cfg: MethodConfig) -> PricingResult:
    """Run the configured engine once and echo the full configuration."""
    start = time.perf_counter()
    plan = _build_plan(params, payoff, grid, cfg)
    p, gap, euro = _run_plan(plan, cfg.seed)
    return PricingResult(price=p, method=cfg.method,
                         config=_config_echo(params, payoff, grid, cfg),
                         wallclock_ms=1e3 * (time.perf_counter() - start),
                         gap=gap, european=euro)


def gpr_mc_price(params, payoff, grid, cfg: MethodConfig) -> PricingResult:
    if cfg.method != GPR_MC:
        raise ConfigError("gpr_mc_price requires method=gpr-mc")
    return price(params, payoff, grid, cfg)


def gpr_mc_cv_price(params, payoff, grid, cfg: MethodConfig) -> PricingResult:
    if cfg.method != GPR_MC_CV:
        raise ConfigError("gpr_mc_cv_price requires method=gpr-mc-cv")
    return price(params, payoff, grid, cfg)


def gpr_tree_price(params, payoff, grid, cfg: MethodConfig,
                   use_cv: bool | None = None) -> PricingResult:
    method = cfg.method
    if use_cv is not None:
        method = GPR_TREE_CV if use_cv else GPR_TREE
        cfg = replace(cfg, method=method)
    if cfg.method not in (GPR_TREE, GPR_TREE_CV):
        raise ConfigError("gpr_tree_price requires a tree method")
    return price(params, payoff, grid, cfg)


def gpr_ei_american_price(params, payoff, grid, cfg: MethodConfig,
                          use_cv: bool | None = None) -> PricingResult:
    method = cfg.method
    if use_cv is not None:
        method = GPR_EI_CV if use_cv else GPR_EI
        cfg = replace(cfg, method=method)
    if cfg.method not in (GPR_EI, GPR_EI_CV):
        raise ConfigError("gpr_ei_american_price requires an exact-integration method")
    return price(params, payoff, grid, cfg)


def repetition_study(params: ModelParams, payoff: Payoff, grid: ExerciseGrid,
                     cfg: MethodConfig, repetitions: int) -> PricingResult:
    """Reprice under ``repetitions`` seeds, reusing the seed-independent plan.

    Seeds are cfg.seed, cfg.seed+1, ...; design clouds and European values
    carry no Monte Carlo noise, so only the Gaussian streams change.
    """
    if repetitions < 2:
        raise ConfigError("a repetition study needs repetitions >= 2")
    start = time.perf_counter()
    plan = _build_plan(params, payoff, grid, cfg)
    prices = np.empty(repetitions)
    gap = euro = None
    for r in range(repetitions):
        prices[r], gap, euro = _run_plan(plan, cfg.seed + r)
    return PricingResult(price=float(prices.mean()), method=cfg.method,
                         config=_config_echo(params, payoff, grid, cfg),
                         wallclock_ms=1e3 * (time.perf_counter() - start),
                         gap=gap, european=euro, rep_prices=prices)
