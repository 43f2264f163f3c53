"""Throughput-optimised kernel-weighted sums for the backward recursion.

The continuation estimate needs sum_q w_q k(x_test, x_q) for P*M test
points per exercise date, which is billions of kernel evaluations per
pricing run. libm exp does not vectorise, so these kernels evaluate
exp(-x) with a clamped Taylor-and-squaring scheme in float32 lanes;
absolute error is ~1e-5 * sum|w|, far below the Monte Carlo noise of the
estimates they feed. Exact float64 evaluation lives in `gpr.predict`.

Layouts: tests are passed SoA (d, n) so the inner loops stay contiguous.
Results are deterministic for fixed inputs regardless of thread count
(each output element is reduced by a single thread in a fixed order).
"""

from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")  # container TBB is too old

import numpy as np
from numba import njit, prange

__all__ = ["kernel_weighted_sum", "MATERN32", "SQEXP"]

MATERN32 = "matern32"
SQEXP = "sqexp"

_BLK = 1024
_GEMM_DIM = 17          # switch to BLAS squared distances at this dimension
_GEMM_CHUNK = 4096

# exp(-x) ~= taylor8(x/32)^32 for x in [0, cap]; kernel tails below
# (1+cap)e^-cap ~ 1.7e-8 are clamped flat.
_CAP = 21.0


@njit(parallel=True, fastmath=True, cache=True)
def _matern_d2(t0, t1, x0, x1, w, a, out):
    n = t0.shape[0]
    P = x0.shape[0]
    c2 = np.float32(1 / 2); c3 = np.float32(1 / 6); c4 = np.float32(1 / 24)
    c5 = np.float32(1 / 120); c6 = np.float32(1 / 720); c7 = np.float32(1 / 5040)
    c8 = np.float32(1 / 40320)
    one = np.float32(1.0); inv32 = np.float32(1.0 / 32.0); cap = np.float32(_CAP)
    af = np.float32(a)
    nblk = (n + _BLK - 1) // _BLK
    for blk in prange(nblk):
        i0 = blk * _BLK
        m = min(_BLK, n - i0)
        acc = np.zeros(m, dtype=np.float32)
        for q in range(P):
            xq0 = x0[q]; xq1 = x1[q]; wq = w[q]
            for i in range(m):
                d0 = t0[i0 + i] - xq0
                d1 = t1[i0 + i] - xq1
                ar = min(af * np.sqrt(d0 * d0 + d1 * d1), cap)
                y = ar * inv32
                p = one - y * (one - y * (c2 - y * (c3 - y * (c4 - y * (c5 - y * (c6 - y * (c7 - y * c8)))))))
                p = p * p; p = p * p; p = p * p; p = p * p; p = p * p
                acc[i] += wq * ((one + ar) * p)
        for i in range(m):
            out[i0 + i] = acc[i]


def _make_fused(d: int, matern: bool):
    # d is a closure constant: numba unrolls the coordinate loop and keeps
    # the i-loops vectorised.
    @njit(parallel=True, fastmath=True)
    def kern(tt, x, w, a, out):
        n = tt.shape[1]
        P = x.shape[0]
        c2 = np.float32(1 / 2); c3 = np.float32(1 / 6); c4 = np.float32(1 / 24)
        c5 = np.float32(1 / 120); c6 = np.float32(1 / 720); c7 = np.float32(1 / 5040)
        c8 = np.float32(1 / 40320)
        one = np.float32(1.0); inv32 = np.float32(1.0 / 32.0); cap = np.float32(_CAP)
        half = np.float32(0.5)
        af = np.float32(a)
        nblk = (n + _BLK - 1) // _BLK
        for blk in prange(nblk):
            i0 = blk * _BLK
            m = min(_BLK, n - i0)
            acc = np.zeros(m, dtype=np.float32)
            for q in range(P):
                wq = w[q]
                for i in range(m):
                    s = np.float32(0.0)
                    for k in range(d):
                        dd = tt[k, i0 + i] - x[q, k]
                        s += dd * dd
                    if matern:
                        ar = min(af * np.sqrt(s), cap)
                    else:
                        ar = min(af * af * s * half, cap)
                    y = ar * inv32
                    p = one - y * (one - y * (c2 - y * (c3 - y * (c4 - y * (c5 - y * (c6 - y * (c7 - y * c8)))))))
                    p = p * p; p = p * p; p = p * p; p = p * p; p = p * p
                    if matern:
                        acc[i] += wq * ((one + ar) * p)
                    else:
                        acc[i] += wq * p
            for i in range(m):
                out[i0 + i] = acc[i]
    return kern


@njit(parallel=True, fastmath=True, cache=True)
def _reduce_sq(sq_t, w, a, matern, out):
    # sq_t: (P, m) float32 squared distances, one column per test point.
    P, m = sq_t.shape
    c2 = np.float32(1 / 2); c3 = np.float32(1 / 6); c4 = np.float32(1 / 24)
    c5 = np.float32(1 / 120); c6 = np.float32(1 / 720); c7 = np.float32(1 / 5040)
    c8 = np.float32(1 / 40320)
    one = np.float32(1.0); inv32 = np.float32(1.0 / 32.0); cap = np.float32(_CAP)
    half = np.float32(0.5); zero = np.float32(0.0)
    af = np.float32(a)
    nblk = (m + _BLK - 1) // _BLK
    for blk in prange(nblk):
        i0 = blk * _BLK
        mm = min(_BLK, m - i0)
        acc = np.zeros(mm, dtype=np.float32)
        for q in range(P):
            wq = w[q]
            for i in range(mm):
                s = max(sq_t[q, i0 + i], zero)
                if matern:
                    ar = min(af * np.sqrt(s), cap)
                else:
                    ar = min(af * af * s * half, cap)
                y = ar * inv32
                p = one - y * (one - y * (c2 - y * (c3 - y * (c4 - y * (c5 - y * (c6 - y * (c7 - y * c8)))))))
                p = p * p; p = p * p; p = p * p; p = p * p; p = p * p
                if matern:
                    acc[i] += wq * ((one + ar) * p)
                else:
                    acc[i] += wq * p
        for i in range(mm):
            out[i0 + i] = acc[i]


_FUSED_CACHE: dict[tuple[int, bool], object] = {}


def _fused_kernel(d: int, matern: bool):
    key = (d, matern)
    if key not in _FUSED_CACHE:
        _FUSED_CACHE[key] = _make_fused(d, matern)
    return _FUSED_CACHE[key]


def kernel_weighted_sum(tests: np.ndarray, train: np.ndarray, weights: np.ndarray,
                        kind: str, signal_var: float, length_scale: float) -> np.ndarray:
    """sum_q weights_q * k(tests_i, train_q), fast reduced-precision path.

    ``tests`` is (n, d) float64; returns (n,) float64. `kind` selects the
    Matern 3/2 or squared exponential radial profile; signal variance is
    applied after the reduction.
    """
    tests = np.ascontiguousarray(tests, dtype=np.float64)
    n, d = tests.shape
    P = train.shape[0]
    matern = kind == MATERN32
    a = np.sqrt(3.0) / length_scale if matern else 1.0 / length_scale
    out32 = np.empty(n, dtype=np.float32)
    w32 = np.asarray(weights, dtype=np.float32)

    if d >= _GEMM_DIM:
        x32 = np.ascontiguousarray(train, dtype=np.float32)
        t32 = tests.astype(np.float32)
        yy = np.einsum("ij,ij->i", x32, x32)[:, None]
        for i0 in range(0, n, _GEMM_CHUNK):
            tc = t32[i0:i0 + _GEMM_CHUNK]
            sq_t = yy + np.einsum("ij,ij->i", tc, tc)[None, :]
            sq_t -= 2.0 * (x32 @ tc.T)
            _reduce_sq(sq_t, w32, a, matern, out32[i0:i0 + tc.shape[0]])
    elif d == 2 and matern:
        t0 = np.ascontiguousarray(tests[:, 0], dtype=np.float32)
        t1 = np.ascontiguousarray(tests[:, 1], dtype=np.float32)
        _matern_d2(t0, t1, train[:, 0].astype(np.float32),
                   train[:, 1].astype(np.float32), w32, a, out32)
    else:
        tt = np.ascontiguousarray(tests.T, dtype=np.float32)
        x32 = np.ascontiguousarray(train, dtype=np.float32)
        _fused_kernel(d, matern)(tt, x32, w32, a, out32)
    return signal_var * out32.astype(np.float64)
