"""Batch front-end: single pricing runs, repetition studies, table grids.

Configuration comes from flags, an optional flat key=value file (flags win)
and named presets for the two experiment families. Output is RFC-4180 CSV
with a mandatory header; every row echoes the effective configuration so a
result can be reproduced from the file alone.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import american, oracles
from .american import ExerciseGrid, MethodConfig, METHODS
from .errors import BasketGprError, ConfigError, NumericalError, UnknownTable
from .european import geometric_closed_form, qmc_european
from .european import build_ei_surrogate, ei_price_t0
from .market import (ARITHMETIC_PUT, GEOMETRIC_PUT, MAX_CALL, ModelParams,
                     Payoff)
from .oracles import crr_american_put_1d, ekvall_price, geometric_to_1d, sample_std_ci

__all__ = ["RunConfig", "run", "reproduce_table", "main", "TABLE_IDS"]

CSV_COLUMNS = ["method", "payoff", "d", "P", "M", "Q", "N", "seed",
               "price", "gap", "european", "wallclock_ms"]

_PAYOFF_NAMES = {
    "geometric-put": GEOMETRIC_PUT,
    "arithmetic-put": ARITHMETIC_PUT,
    "max-call": MAX_CALL,
}

PRESETS = {
    # Symmetric basket put family: T=1, S=K=100, r=5%, no dividends,
    # sigma=20%, rho=0.2, ten exercise dates.
    "basket-put": dict(rate=0.05, dividend=0.0, vol=0.2, rho=0.2,
                       maturity=1.0, spot=100.0, strike=100.0,
                       n_dates=10, payoff="geometric-put",
                       european_source="ei-formula"),
    # Max-call family: T=3, S=K=100, r=5%, 10% dividends, sigma=20%,
    # independent assets, nine exercise dates, QMC European source.
    "max-call": dict(rate=0.05, dividend=0.1, vol=0.2, rho=0.0,
                     maturity=3.0, spot=100.0, strike=100.0,
                     n_dates=9, payoff="max-call",
                     european_source="qmc"),
}


@dataclass
class RunConfig:
    """One pricing job. Unset fields fall back to preset values."""

    payoff: str | None = None
    strike: float | None = None
    dim: int | None = None
    method: str | None = None
    n_design: int | None = None          # P
    n_sims: int | None = None            # M
    q_european: int | None = None        # Q
    n_dates: int | None = None           # N
    seed: int = 0
    repeats: int = 1
    preset: str | None = None
    european_source: str | None = None
    scale: float = 1.0
    out: str | None = None
    threads: int | None = None
    qmc_samples: int = 1_000_000
    rate: float | None = None
    dividend: float | None = None
    vol: float | None = None
    rho: float | None = None
    maturity: float | None = None
    spot: float | None = None
    ci_level: float = 0.95

    def resolve(self) -> tuple[ModelParams, Payoff, ExerciseGrid, MethodConfig]:
        base = dict(PRESETS[self.preset]) if self.preset else {}
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")

        def pick(name, default=None):
            explicit = getattr(self, name)
            if explicit is not None:
                return explicit
            return base.get(name, default)

        payoff_name = pick("payoff")
        if payoff_name not in _PAYOFF_NAMES:
            raise ConfigError(
                f"payoff must be one of {sorted(_PAYOFF_NAMES)}, got {payoff_name!r}")
        dim = pick("dim")
        if dim is None or dim < 1:
            raise ConfigError("dimension (--dim) must be a positive integer")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.scale <= 1.0:
            raise ConfigError("scale must lie in (0, 1]")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

        params = ModelParams.equicorrelated(
            d=int(dim),
            spot=pick("spot", 100.0),
            rate=pick("rate", 0.05),
            dividend=pick("dividend", 0.0),
            vol=pick("vol", 0.2),
            rho=pick("rho", 0.0),
            maturity=pick("maturity", 1.0),
        )
        payoff = Payoff(kind=_PAYOFF_NAMES[payoff_name], strike=pick("strike", 100.0))
        grid = ExerciseGrid(n_dates=int(pick("n_dates", 10)), maturity=params.maturity)
        cfg = MethodConfig(
            method=self.method,
            n_design=_scaled(pick("n_design", 1000), self.scale, floor=16),
            n_sims=_scaled(pick("n_sims", 10_000), self.scale, floor=8),
            q_european=_scaled(pick("q_european", 8000), self.scale, floor=64),
            european_source=pick("european_source"),
            qmc_samples=_scaled(self.qmc_samples, self.scale, floor=1024),
            seed=self.seed,
        )
        return params, payoff, grid, cfg


def _scaled(value: int, scale: float, floor: int) -> int:
    return max(floor, int(round(int(value) * scale)))


def _result_row(res: american.PricingResult, seed: int | None = None,
                price: float | None = None) -> dict:
    row = {c: res.config.get(c, "") for c in CSV_COLUMNS}
    row["price"] = f"{res.price if price is None else price:.6f}"
    row["gap"] = "" if res.gap is None else f"{res.gap:.6f}"
    row["european"] = "" if res.european is None else f"{res.european:.6f}"
    row["wallclock_ms"] = f"{res.wallclock_ms:.1f}"
    if seed is not None:
        row["seed"] = seed
    return row


def _write_csv(path: str, rows: list[dict], columns: list[str] = CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        writer.writerows(rows)


def run(config: RunConfig) -> int:
    """Execute one job and write its CSV; returns the exit status."""
    params, payoff, grid, cfg = config.resolve()
    out = config.out or "basketgpr_run.csv"
    rows: list[dict] = []
    if config.repeats > 1:
        res = american.repetition_study(params, payoff, grid, cfg, config.repeats)
        per_rep = res.wallclock_ms / config.repeats
        for r, p in enumerate(res.rep_prices):
            row = _result_row(res, seed=cfg.seed + r, price=float(p))
            row["wallclock_ms"] = f"{per_rep:.1f}"
            rows.append(row)
        std, lo, hi = sample_std_ci(res.rep_prices, level=config.ci_level)
        summary = [{
            "method": cfg.method, "payoff": payoff.kind, "d": params.dim,
            "P": cfg.n_design, "M": cfg.n_sims, "Q": cfg.q_european,
            "N": grid.n_dates, "R": config.repeats, "level": config.ci_level,
            "mean_price": f"{res.price:.6f}", "std": f"{std:.6e}",
            "ci_lo": f"{lo:.6e}", "ci_hi": f"{hi:.6e}",
        }]
        _write_csv(_summary_path(out), summary, columns=list(summary[0]))
    else:
        rows.append(_result_row(american.price(params, payoff, grid, cfg)))
    _write_csv(out, rows)
    return 0


def _summary_path(out: str) -> str:
    return out[:-4] + ".summary.csv" if out.endswith(".csv") else out + ".summary.csv"


# ---------------------------------------------------------------------------
# Table reproduction


TABLE_IDS = tuple(f"T{i}" for i in range(1, 15))

_PUT_DIMS = (2, 5, 10, 20, 40, 100)
_MAXCALL_DIMS = (2, 5, 10, 20, 30, 50, 100)
_P_GRID = (250, 500, 1000)
_M_GRID = (1_000, 10_000, 100_000)


def _bench_rows(kind: str, dims, scale: float, maturity: float) -> list[dict]:
    """Oracle rows for the geometric put family (CRR on the 1-D reduction)."""
    rows = []
    for d in dims:
        params = ModelParams.equicorrelated(d, 100.0, 0.05, 0.0, 0.2, 0.2, maturity)
        start = time.perf_counter()
        spot_hat, sig_hat, eta_hat = geometric_to_1d(params)
        p = crr_american_put_1d(spot_hat, 100.0, params.rate, eta_hat, sig_hat,
                                maturity, steps=1000)
        rows.append({"method": "benchmark-crr", "payoff": kind, "d": d,
                     "P": "", "M": "", "Q": "", "N": "", "seed": "",
                     "price": f"{p:.6f}", "gap": "", "european": "",
                     "wallclock_ms": f"{1e3 * (time.perf_counter() - start):.1f}"})
        if d <= 2 or (d <= 5 and scale >= 1.0):
            start = time.perf_counter()
            pe = ekvall_price(params, Payoff(GEOMETRIC_PUT, 100.0))
            rows.append({"method": "benchmark-ekvall", "payoff": kind, "d": d,
                         "P": "", "M": "", "Q": "", "N": "", "seed": "",
                         "price": f"{pe:.6f}", "gap": "", "european": "",
                         "wallclock_ms": f"{1e3 * (time.perf_counter() - start):.1f}"})
    return rows


def _european_table(payoffs, dims, scale: float, preset: str, seed: int) -> list[dict]:
    rows = []
    base = PRESETS[preset]
    q_grid = [_scaled(q, scale, 64) for q in (250, 500, 1000, 8000)]
    for payoff_name in payoffs:
        kind = _PAYOFF_NAMES[payoff_name]
        for d in dims:
            params = ModelParams.equicorrelated(
                d, base["spot"], base["rate"], base["dividend"], base["vol"],
                base["rho"], base["maturity"])
            payoff = Payoff(kind, base["strike"])
            for q in q_grid:
                start = time.perf_counter()
                surr = build_ei_surrogate(params, payoff, q, seed=seed)
                p = ei_price_t0(surr)
                rows.append({"method": "gpr-ei-european", "payoff": kind, "d": d,
                             "P": "", "M": "", "Q": q, "N": "", "seed": seed,
                             "price": f"{p:.6f}", "gap": "", "european": "",
                             "wallclock_ms": f"{1e3 * (time.perf_counter() - start):.1f}"})
            start = time.perf_counter()
            n_qmc = _scaled(1_000_000, scale, 1024)
            if kind == GEOMETRIC_PUT:
                bench = geometric_closed_form(params, payoff, 0.0, params.spot)
                bench_name = "benchmark-closed-form"
            else:
                bench = qmc_european(params, payoff, 0.0, params.spot, n_qmc)
                bench_name = "benchmark-qmc"
            rows.append({"method": bench_name, "payoff": kind, "d": d,
                         "P": "", "M": "", "Q": "", "N": "", "seed": "",
                         "price": f"{bench:.6f}", "gap": "", "european": "",
                         "wallclock_ms": f"{1e3 * (time.perf_counter() - start):.1f}"})
    return rows


def _american_grid(method: str, payoff_name: str, preset: str, dims,
                   p_grid, m_grid, scale: float, seed: int) -> list[dict]:
    rows = []
    base = PRESETS[preset]
    kind = _PAYOFF_NAMES[payoff_name]
    for d in dims:
        params = ModelParams.equicorrelated(
            d, base["spot"], base["rate"], base["dividend"], base["vol"],
            base["rho"], base["maturity"])
        payoff = Payoff(kind, base["strike"])
        grid = ExerciseGrid(n_dates=base["n_dates"], maturity=base["maturity"])
        for p in p_grid:
            for m in m_grid:
                cfg = MethodConfig(
                    method=method,
                    n_design=_scaled(p, scale, 16),
                    n_sims=_scaled(m, scale, 8) if m else 1,
                    q_european=_scaled(8000, scale, 64),
                    european_source=base["european_source"],
                    qmc_samples=_scaled(1_000_000, scale, 1024),
                    seed=seed,
                )
                try:
                    res = american.price(params, payoff, grid, cfg)
                except NumericalError as exc:
                    rows.append({"method": method, "payoff": kind, "d": d,
                                 "P": cfg.n_design, "M": cfg.n_sims,
                                 "Q": cfg.q_european, "N": grid.n_dates,
                                 "seed": seed, "price": f"error: {exc}",
                                 "gap": "", "european": "", "wallclock_ms": ""})
                    continue
                rows.append(_result_row(res))
    return rows


def _variance_grid(method: str, scale: float, seed: int) -> list[dict]:
    rows = []
    base = PRESETS["basket-put"]
    reps = max(4, int(round(100 * scale)))
    for d in _PUT_DIMS:
        params = ModelParams.equicorrelated(
            d, base["spot"], base["rate"], base["dividend"], base["vol"],
            base["rho"], base["maturity"])
        payoff = Payoff(GEOMETRIC_PUT, base["strike"])
        grid = ExerciseGrid(n_dates=base["n_dates"], maturity=base["maturity"])
        for p in _P_GRID:
            for m in (1_000, 10_000):
                cfg = MethodConfig(
                    method=method,
                    n_design=_scaled(p, scale, 16),
                    n_sims=_scaled(m, scale, 8),
                    q_european=_scaled(8000, scale, 64),
                    european_source=base["european_source"],
                    seed=seed,
                )
                res = american.repetition_study(params, payoff, grid, cfg, reps)
                std, lo, hi = sample_std_ci(res.rep_prices)
                row = _result_row(res)
                row["price"] = f"{res.price:.6f}"
                row["gap"] = f"{std:.6e}"        # std column of the study tables
                row["european"] = f"{lo:.6e}/{hi:.6e}"
                rows.append(row)
    return rows


def reproduce_table(table_id: str, budget_scale: float = 1.0, seed: int = 0) -> list[dict]:
    """Grid of cells mirroring one results table, as CSV-ready rows.

    ``budget_scale`` shrinks P/M/Q/repetitions proportionally so the grids
    run at desk scale; benchmark rows ride along where an oracle exists.
    """
    if table_id not in TABLE_IDS:
        raise UnknownTable(f"unknown table id {table_id!r}; expected one of {TABLE_IDS}")
    if not 0.0 < budget_scale <= 1.0:
        raise ConfigError("budget_scale must lie in (0, 1]")
    s = budget_scale
    put_dims = _PUT_DIMS
    tree_dims = (2, 5, 10)
    if table_id == "T1":
        return _european_table(("geometric-put", "arithmetic-put"), put_dims, s,
                               "basket-put", seed)
    if table_id == "T2":
        return (_american_grid("gpr-mc", "geometric-put", "basket-put", put_dims,
                               _P_GRID, _M_GRID, s, seed)
                + _bench_rows(GEOMETRIC_PUT, put_dims, s, 1.0))
    if table_id == "T3":
        return (_american_grid("gpr-mc-cv", "geometric-put", "basket-put", put_dims,
                               _P_GRID, _M_GRID, s, seed)
                + _bench_rows(GEOMETRIC_PUT, put_dims, s, 1.0))
    if table_id == "T4":
        return (_american_grid("gpr-tree", "geometric-put", "basket-put", tree_dims,
                               _P_GRID, (0,), s, seed)
                + _american_grid("gpr-ei", "geometric-put", "basket-put", put_dims,
                                 _P_GRID, (0,), s, seed)
                + _bench_rows(GEOMETRIC_PUT, put_dims, s, 1.0))
    if table_id == "T5":
        return (_american_grid("gpr-tree-cv", "geometric-put", "basket-put", tree_dims,
                               _P_GRID, (0,), s, seed)
                + _american_grid("gpr-ei-cv", "geometric-put", "basket-put", put_dims,
                                 _P_GRID, (0,), s, seed)
                + _bench_rows(GEOMETRIC_PUT, put_dims, s, 1.0))
    if table_id == "T6":
        return _american_grid("gpr-mc", "arithmetic-put", "basket-put", put_dims,
                              _P_GRID, _M_GRID, s, seed)
    if table_id == "T7":
        return _european_table(("max-call",), _MAXCALL_DIMS, s, "max-call", seed)
    if table_id == "T8":
        return _american_grid("gpr-mc-cv", "arithmetic-put", "basket-put", put_dims,
                              _P_GRID, _M_GRID, s, seed)
    if table_id == "T9":
        return (_american_grid("gpr-tree", "arithmetic-put", "basket-put", tree_dims,
                               _P_GRID, (0,), s, seed)
                + _american_grid("gpr-tree-cv", "arithmetic-put", "basket-put",
                                 tree_dims, _P_GRID, (0,), s, seed)
                + _american_grid("gpr-ei", "arithmetic-put", "basket-put", put_dims,
                                 _P_GRID, (0,), s, seed)
                + _american_grid("gpr-ei-cv", "arithmetic-put", "basket-put", put_dims,
                                 _P_GRID, (0,), s, seed))
    if table_id == "T10":
        return _variance_grid("gpr-mc", s, seed)
    if table_id == "T11":
        return _variance_grid("gpr-mc-cv", s, seed)
    if table_id == "T12":
        return _american_grid("gpr-mc", "max-call", "max-call", _MAXCALL_DIMS,
                              _P_GRID, _M_GRID, s, seed)
    if table_id == "T13":
        return _american_grid("gpr-mc-cv", "max-call", "max-call", _MAXCALL_DIMS,
                              _P_GRID, _M_GRID, s, seed)
    # T14: lattice/exact-integration variants of the max-call
    return (_american_grid("gpr-tree", "max-call", "max-call", tree_dims,
                           _P_GRID, (0,), s, seed)
            + _american_grid("gpr-tree-cv", "max-call", "max-call", tree_dims,
                             _P_GRID, (0,), s, seed)
            + _american_grid("gpr-ei", "max-call", "max-call", _MAXCALL_DIMS,
                             (1000, 2000, 4000), (0,), s, seed)
            + _american_grid("gpr-ei-cv", "max-call", "max-call", _MAXCALL_DIMS,
                             (1000, 2000, 4000), (0,), s, seed))


# ---------------------------------------------------------------------------
# Argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="basketgpr", description=__doc__)
    p.add_argument("--payoff", choices=sorted(_PAYOFF_NAMES))
    p.add_argument("--strike", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--P", type=int, dest="n_design")
    p.add_argument("--M", type=int, dest="n_sims")
    p.add_argument("--Q", type=int, dest="q_european")
    p.add_argument("--N", type=int, dest="n_dates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--european-source", choices=("ei-formula", "qmc"),
                   dest="european_source")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", type=str)
    p.add_argument("--threads", type=int)
    p.add_argument("--config", type=str, help="flat key=value file; flags win")
    p.add_argument("--table", type=str,
                   help="reproduce a results table (T1..T14) instead of a single run")
    return p


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}
_INT_KEYS = {"dim", "n_design", "n_sims", "q_european", "n_dates", "seed",
             "repeats", "threads", "qmc_samples"}
_FLOAT_KEYS = {"strike", "scale", "rate", "dividend", "vol", "rho", "maturity",
               "spot", "ci_level"}


def _read_config_file(path: str) -> dict:
    values: dict = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "P":
                key = "n_design"
            elif key == "M":
                key = "n_sims"
            elif key == "Q":
                key = "q_european"
            elif key == "N":
                key = "n_dates"
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
    return values


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    import numba
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=threads)
    numba.set_num_threads(threads)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        file_values = _read_config_file(ns.config) if ns.config else {}
        cfg_kwargs = dict(file_values)
        for f in fields(RunConfig):
            flag_val = getattr(ns, f.name, None)
            default = parser.get_default(f.name)
            if flag_val is not None and (default is None or flag_val != default):
                cfg_kwargs[f.name] = flag_val
        config = RunConfig(**cfg_kwargs)
        _apply_threads(config.threads)
        if ns.table:
            rows = reproduce_table(ns.table, config.scale, seed=config.seed)
            _write_csv(config.out or f"basketgpr_{ns.table}.csv", rows)
            return 0
        return run(config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
