"""Leaped Halton sequences and the inverse normal quantile function.

The Halton generator is the single source of deterministic space-filling
points in the package: design points for the backward recursion, the
z-points of the exact-integration European surrogate, and the Gaussian
nodes of the quasi-Monte Carlo European pricer all flow through here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DomainError

__all__ = [
    "HaltonConfig",
    "default_leap",
    "halton_points",
    "halton_point",
    "inv_normal_cdf",
    "gaussian_block",
    "first_primes",
]


def first_primes(n: int) -> list[int]:
    """Return the first ``n`` primes (trial division; n is small here)."""
    if n < 1:
        raise ConfigError("need at least one prime base")
    primes: list[int] = []
    cand = 2
    while len(primes) < n:
        if all(cand % p for p in primes if p * p <= cand):
            primes.append(cand)
        cand += 1
    return primes


def _next_prime_after(p: int) -> int:
    cand = p + 1
    while True:
        is_prime = cand > 1 and all(cand % q for q in range(2, int(math.isqrt(cand)) + 1))
        if is_prime:
            return cand
        cand += 1


def default_leap(dim: int) -> int:
    """Leap such that leap+1 is the smallest prime above the last base prime.

    A leap+1 that is itself prime and unused as a base is coprime with every
    base, so the leaped subsequence stays a uniform point set.
    """
    last_base = first_primes(dim)[-1]
    return _next_prime_after(last_base) - 1


@dataclass(frozen=True)
class HaltonConfig:
    """Leaped, skipped Halton sequence in the first ``dim`` prime bases.

    The generated index for the p-th point (p >= 1) is
    ``skip + 1 + (p - 1) * (leap + 1)``; index 0 (the cube corner) is never
    emitted so the points can be pushed through the normal quantile.
    """

    dim: int
    leap: int | None = None
    skip: int = 0
    bases: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigError("HaltonConfig.dim must be >= 1")
        if self.skip < 0:
            raise ConfigError("HaltonConfig.skip must be >= 0")
        bases = tuple(first_primes(self.dim))
        leap = default_leap(self.dim) if self.leap is None else self.leap
        if leap < 0:
            raise ConfigError("HaltonConfig.leap must be >= 0")
        for b in bases:
            if math.gcd(leap + 1, b) != 1:
                raise ConfigError(
                    f"leap+1 = {leap + 1} shares a factor with base {b}; "
                    "the leaped sequence would miss whole sub-rectangles"
                )
        object.__setattr__(self, "leap", leap)
        object.__setattr__(self, "bases", bases)


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    """Van der Corput radical inverse of integer ``indices`` in ``base``."""
    idx = indices.astype(np.int64).copy()
    out = np.zeros(idx.shape, dtype=np.float64)
    f = 1.0 / base
    while idx.max(initial=0) > 0:
        out += (idx % base) * f
        idx //= base
        f /= base
    return out


def halton_points(cfg: HaltonConfig, p_start: int, count: int) -> np.ndarray:
    """Points ``p_start .. p_start+count-1`` of the leaped sequence, (count, dim).

    All coordinates lie in the open interval (0, 1).
    """
    if p_start < 1:
        raise ConfigError("Halton point index starts at 1")
    if count < 1:
        raise ConfigError("need count >= 1")
    p = np.arange(p_start, p_start + count, dtype=np.int64)
    indices = cfg.skip + 1 + (p - 1) * (cfg.leap + 1)
    out = np.empty((count, cfg.dim), dtype=np.float64)
    for j, b in enumerate(cfg.bases):
        out[:, j] = _radical_inverse(indices, b)
    return out


def halton_point(cfg: HaltonConfig, p: int) -> np.ndarray:
    """The p-th point (p >= 1) of the leaped sequence."""
    return halton_points(cfg, p, 1)[0]


# Acklam's rational approximation of the standard normal quantile,
# followed by one Halley refinement against the exact CDF.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def inv_normal_cdf(u):
    """Inverse standard normal CDF, accurate to ~1e-15 after refinement.

    Accepts scalars or arrays; every input must lie strictly inside (0, 1).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if u_arr.size and (u_arr.min() <= 0.0 or u_arr.max() >= 1.0):
        raise DomainError("inv_normal_cdf argument must lie in the open interval (0, 1)")
    scalar = u_arr.ndim == 0
    q = np.atleast_1d(u_arr).copy()
    x = np.empty_like(q)

    lo = q < _P_LOW
    hi = q > 1.0 - _P_LOW
    mid = ~(lo | hi)
    if lo.any():
        t = np.sqrt(-2.0 * np.log(q[lo]))
        x[lo] = ((((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5])
                 / ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0))
    if hi.any():
        t = np.sqrt(-2.0 * np.log(1.0 - q[hi]))
        x[hi] = -((((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5])
                  / ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0))
    if mid.any():
        t = q[mid] - 0.5
        s = t * t
        x[mid] = ((((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * t
                  / (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0))

    # One Halley step: e = Phi(x) - u, x <- x - e/(phi(x) (1 + x e / (2 phi)))
    err = ndtr(x) - q
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    step = err / pdf
    x -= step / (1.0 + 0.5 * x * step)
    return float(x[0]) if scalar else x.reshape(u_arr.shape)


_BLOCK_CACHE: dict[tuple, np.ndarray] = {}
_BLOCK_CACHE_MAX = 3


def gaussian_block(dim: int, count: int, leap: int | None = None, skip: int = 0,
                   cache: bool = True) -> np.ndarray:
    """(count, dim) standard normal quasi-random block from leaped Halton points.

    Deterministic; heavy blocks are memoised because the same block is reused
    across dates and repetitions.
    """
    key = (dim, count, leap, skip)
    if cache and key in _BLOCK_CACHE:
        return _BLOCK_CACHE[key]
    cfg = HaltonConfig(dim=dim, leap=leap, skip=skip)
    block = inv_normal_cdf(halton_points(cfg, 1, count))
    block.setflags(write=False)
    if cache:
        if len(_BLOCK_CACHE) >= _BLOCK_CACHE_MAX:
            _BLOCK_CACHE.pop(next(iter(_BLOCK_CACHE)))
        _BLOCK_CACHE[key] = block
    return block
