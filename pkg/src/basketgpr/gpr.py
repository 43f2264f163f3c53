"""Gaussian process regression: kernels, marginal likelihood, fitting, prediction.

The posterior mean is all the pricing engine needs, so the model stores the
predictor set, the weight vector solving (K + noise I) w = y_centered, and
the Cholesky factor used to produce it. Targets are centered before fitting
(option values sit far from the zero prior mean) and the mean is restored
at prediction time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import get_lapack_funcs
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, NotPositiveDefinite
from .kernelsum import MATERN32, SQEXP, kernel_weighted_sum

__all__ = [
    "KernelSpec",
    "GprModel",
    "MATERN32",
    "SQEXP",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit",
    "predict",
    "predict_fast",
]

_JITTER_REL = 1e-10        # times trace(K)/P, i.e. times the signal variance
_OPT_SUBSAMPLE = 800       # hyperparameters fitted on at most this many rows
_N_STARTS = 5


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel family with signal variance and length-scale."""

    family: str
    signal_var: float
    length_scale: float

    def __post_init__(self) -> None:
        if self.family not in (MATERN32, SQEXP):
            raise ConfigError(f"unknown kernel family {self.family!r}")
        if self.signal_var <= 0 or self.length_scale <= 0:
            raise ConfigError("signal variance and length-scale must be positive")


@dataclass(frozen=True)
class GprModel:
    """Fitted surrogate: predictors X, weights w with (K + noise I) w = y - mean.

    ``chol_factor`` caches the lower Cholesky factor of K + (noise+jitter) I.
    A degenerate fit (constant targets) has zero weights and no factor.
    """

    predictors: np.ndarray
    weights: np.ndarray
    kernel: KernelSpec
    noise_var: float
    chol_factor: np.ndarray | None
    y_mean: float
    opt_lml: float = math.nan
    start_lmls: tuple[float, ...] = ()

    @property
    def is_constant(self) -> bool:
        return self.chol_factor is None


def _radial(family: str, dist: np.ndarray, length_scale: float) -> np.ndarray:
    """Unit-signal kernel profile evaluated on a matrix of distances."""
    if family == MATERN32:
        ar = (math.sqrt(3.0) / length_scale) * dist
        return (1.0 + ar) * np.exp(-ar)
    u = dist / length_scale
    return np.exp(-0.5 * u * u)


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Kernel value between two points."""
    r = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64)))
    return spec.signal_var * float(_radial(spec.family, np.array(r), spec.length_scale))


def kernel_matrix(spec: KernelSpec, x: np.ndarray, x2: np.ndarray | None = None) -> np.ndarray:
    """Dense cross-kernel matrix K(x, x2) in float64."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = cdist(x, x if x2 is None else np.atleast_2d(np.asarray(x2, dtype=np.float64)))
    return spec.signal_var * _radial(spec.family, d, spec.length_scale)


def _factor(a: np.ndarray, base_jitter: float):
    """Cholesky with escalating jitter; raises NotPositiveDefinite at the end."""
    jitter = base_jitter
    for attempt in range(4):
        try:
            return cho_factor(
                a + jitter * np.eye(a.shape[0]) if jitter else a,
                lower=True, check_finite=False,
            )
        except np.linalg.LinAlgError:
            jitter = max(jitter, 1e-12) * 10.0
    raise NotPositiveDefinite("kernel matrix is not positive definite after jitter escalation")


def log_marginal_likelihood(spec: KernelSpec, noise_var: float,
                            x: np.ndarray, y: np.ndarray) -> float:
    """-(1/2) log det(K + noise I) - (1/2) y^T (K + noise I)^-1 y.

    The log-determinant is read off the Cholesky diagonal; the same jitter
    policy as `fit` applies.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    k = kernel_matrix(spec, x)
    a = k + noise_var * np.eye(x.shape[0])
    c, low = _factor(a, _JITTER_REL * spec.signal_var)
    alpha = cho_solve((c, low), y, check_finite=False)
    logdet = 2.0 * np.log(np.diag(c)).sum()
    return float(-0.5 * logdet - 0.5 * y @ alpha)


class _LmlWorkspace:
    """Preallocated buffers for repeated likelihood evaluations.

    One optimizer run touches the same P x P matrices dozens of times;
    reusing the buffers keeps the cost at LAPACK speed instead of page
    faults.
    """

    def __init__(self, family: str, dist: np.ndarray, y: np.ndarray):
        n = dist.shape[0]
        self.family = family
        self.dist = dist
        self.y = y
        self.k = np.empty((n, n))
        self.dk = np.empty((n, n))
        self.a = np.empty((n, n))
        self.diag = np.diag_indices(n)
        self.lower_mask = np.tril(np.ones((n, n)))
        np.fill_diagonal(self.lower_mask, 0.5)
        self.potri, = get_lapack_funcs(("potri",), (self.a,))

    def _fill_kernel(self, sf2: float, ls: float) -> None:
        k, dk, dist = self.k, self.dk, self.dist
        if self.family == MATERN32:
            np.multiply(dist, math.sqrt(3.0) / ls, out=dk)     # dk <- a*r
            np.multiply(dk, -1.0, out=k)
            np.exp(k, out=k)                                   # k <- exp(-a*r)
            np.multiply(dk, dk, out=dk)
            np.multiply(dk, k, out=dk)
            np.multiply(dk, sf2, out=dk)                       # sf2 (ar)^2 e^-ar
            np.multiply(dist, math.sqrt(3.0) / ls, out=self.a)
            self.a += 1.0
            np.multiply(k, self.a, out=k)
            np.multiply(k, sf2, out=k)                         # sf2 (1+ar) e^-ar
        else:
            np.multiply(dist, 1.0 / ls, out=dk)
            np.multiply(dk, dk, out=dk)                        # dk <- (r/ls)^2
            np.multiply(dk, -0.5, out=k)
            np.exp(k, out=k)
            np.multiply(k, sf2, out=k)                         # sf2 e^{-u2/2}
            np.multiply(dk, k, out=dk)                         # k * u2

    def _factorize(self, noise: float, sf2: float):
        np.copyto(self.a, self.k)
        self.a[self.diag] += noise + _JITTER_REL * sf2
        return cho_factor(self.a, lower=True, overwrite_a=True, check_finite=False)

    def value(self, theta: np.ndarray) -> float:
        sf2, ls, noise = np.exp(theta)
        self._fill_kernel(sf2, ls)
        try:
            c, low = self._factorize(noise, sf2)
        except np.linalg.LinAlgError:
            return -1e12
        alpha = cho_solve((c, low), self.y, check_finite=False)
        return float(-np.log(np.diag(c)).sum() - 0.5 * self.y @ alpha)

    def value_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """LML and gradient w.r.t. (log sf2, log ls, log noise).

        Only the length-scale direction needs the full inverse trace; the
        other two reduce to alpha inner products plus tr(A^-1) thanks to
        A = K + c I.
        """
        sf2, ls, noise = np.exp(theta)
        self._fill_kernel(sf2, ls)
        try:
            c, low = self._factorize(noise, sf2)
        except np.linalg.LinAlgError:
            return -1e12, np.zeros(3)
        alpha = cho_solve((c, low), self.y, check_finite=False)
        logdet_half = float(np.log(np.diag(c)).sum())
        inv, info = self.potri(c, lower=True, overwrite_c=True)  # c aliases self.a
        if info != 0:
            raise NotPositiveDefinite("potri failed on a factored matrix")
        quad = float(self.y @ alpha)
        lml = -logdet_half - 0.5 * quad

        n = self.y.shape[0]
        c_diag = noise + _JITTER_REL * sf2
        tr_inv = float(inv[self.diag].sum())
        a_sq = float(alpha @ alpha)
        # alpha^T K alpha = alpha^T (A - cI) alpha = y^T alpha - c |alpha|^2
        g_sf2 = 0.5 * ((quad - c_diag * a_sq) - (n - c_diag * tr_inv))
        # symmetric trace against the lower-triangle potri output
        inv *= self.lower_mask
        tr_ls = 2.0 * np.einsum("ij,ij->", inv, self.dk)
        g_ls = 0.5 * (alpha @ (self.dk @ alpha) - tr_ls)
        g_noise = 0.5 * noise * (a_sq - tr_inv)
        return float(lml), np.array([g_sf2, g_ls, g_noise])


def _median_pairwise(x: np.ndarray, rng: np.random.Generator) -> float:
    sub = x if x.shape[0] <= 512 else x[rng.choice(x.shape[0], 512, replace=False)]
    d = pdist(sub)
    med = float(np.median(d))
    if not med > 0:
        med = float(d.max(initial=0.0)) or 1.0
    return med


def fit(x: np.ndarray, y: np.ndarray, family: str = MATERN32, seed: int = 0) -> GprModel:
    """Maximum-likelihood fit over a bounded log-hyperparameter box.

    Multi-start local search: a scale-aware initial point plus seeded
    perturbations; the best starts are polished with L-BFGS-B on the
    analytic gradient. For very large training sets the hyperparameters are
    estimated on a seeded subsample and the weights solved on the full set.
    Constant targets short-circuit to a constant-mean model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ConfigError("need at least two training points")
    if y.shape != (n,):
        raise ConfigError("targets must be a vector matching the predictors")
    if not np.isfinite(y).all():
        raise ConfigError("targets must be finite")

    y_mean = float(y.mean())
    yc = y - y_mean
    scale = max(1.0, abs(y_mean))
    if float(np.abs(yc).max(initial=0.0)) <= 1e-13 * scale:
        # DegenerateTargets handled by construction: constant-mean model.
        kernel = KernelSpec(family, signal_var=1.0, length_scale=1.0)
        return GprModel(x, np.zeros(n), kernel, 0.0, None, y_mean)

    rng = np.random.default_rng(seed)
    if n > _OPT_SUBSAMPLE:
        idx = np.sort(rng.choice(n, _OPT_SUBSAMPLE, replace=False))
        x_opt, y_opt = x[idx], yc[idx]
    else:
        x_opt, y_opt = x, yc

    var_y = float(y_opt.var())
    med = _median_pairwise(x_opt, rng)
    lo = np.log([1e-4 * var_y, 1e-2 * med, 1e-8 * var_y])
    hi = np.log([1e4 * var_y, 1e2 * med, 1.0 * var_y])
    theta0 = np.log([var_y, med, 1e-6 * var_y])
    starts = [theta0]
    for _ in range(_N_STARTS - 1):
        jit = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1.5, 1.5)])
        starts.append(np.clip(theta0 + jit * math.log(10.0), lo, hi))

    ws = _LmlWorkspace(family, cdist(x_opt, x_opt), y_opt)
    evals = [(ws.value(t), i) for i, t in enumerate(starts)]
    start_lmls = tuple(v for v, _ in evals)
    evals.sort(reverse=True)

    def objective(theta):
        v, g = ws.value_grad(theta)
        return -v, -g

    n_polish = 2 if x_opt.shape[0] <= 500 else 1
    best_theta, best_lml = starts[evals[0][1]], evals[0][0]
    for _, i in evals[:n_polish]:
        res = minimize(objective, starts[i], jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)),
                       options={"maxiter": 30, "ftol": 1e-8, "gtol": 1e-5})
        if -res.fun > best_lml:
            best_lml, best_theta = -res.fun, res.x

    sf2, ls, noise = np.exp(best_theta)
    kernel = KernelSpec(family, signal_var=float(sf2), length_scale=float(ls))
    k_full = kernel_matrix(kernel, x)
    c, low = _factor(k_full + noise * np.eye(n), _JITTER_REL * sf2)
    weights = cho_solve((c, low), yc, check_finite=False)
    return GprModel(x, weights, kernel, float(noise), np.tril(c), y_mean,
                    opt_lml=float(best_lml), start_lmls=start_lmls)


_PREDICT_CHUNK = 50_000_000  # max kernel-matrix entries materialised at once


def predict(model: GprModel, tests: np.ndarray) -> np.ndarray:
    """Exact float64 posterior mean K(tests, X) w + mean. O(P * M * d)."""
    tests = np.atleast_2d(np.asarray(tests, dtype=np.float64))
    if model.is_constant:
        return np.full(tests.shape[0], model.y_mean)
    n = tests.shape[0]
    p = model.predictors.shape[0]
    out = np.empty(n)
    step = max(1, _PREDICT_CHUNK // max(p, 1))
    for i0 in range(0, n, step):
        k = kernel_matrix(model.kernel, tests[i0:i0 + step], model.predictors)
        out[i0:i0 + step] = k @ model.weights
    return out + model.y_mean


_F32_CANCEL_TOL = 2e-3  # max absolute rounding allowed on the fast path


def predict_fast(model: GprModel, tests: np.ndarray) -> np.ndarray:
    """Reduced-precision posterior mean for bulk continuation estimates.

    Float32 rounding scales with signal_var * sum|w|; models whose weights
    cancel heavily (near-singular kernel matrices at box-edge length
    scales) are routed to the exact float64 path instead of silently
    losing digits. Not for interpolation-grade checks (use `predict`).
    """
    tests = np.atleast_2d(np.asarray(tests, dtype=np.float64))
    if model.is_constant:
        return np.full(tests.shape[0], model.y_mean)
    cancellation = model.kernel.signal_var * float(np.abs(model.weights).sum())
    if 2e-7 * cancellation > _F32_CANCEL_TOL:
        return predict(model, tests)
    s = kernel_weighted_sum(tests, model.predictors, model.weights,
                            model.kernel.family, model.kernel.signal_var,
                            model.kernel.length_scale)
    return s + model.y_mean
