"""American basket option pricing with GPR surrogates and control variates.

The package prices Bermudan-style American options on correlated
Black-Scholes baskets of up to ~100 assets. The workhorse is a backward
dynamic program whose continuation values are learned by Gaussian process
regression from one-step Monte Carlo clouds; subtracting the European price
as a control variate keeps the regression stable in high dimension and
shrinks estimator variance by an order of magnitude.
"""

from .american import (ExerciseGrid, MethodConfig, PricingResult, METHODS,
                       gpr_ei_american_price, gpr_mc_cv_price, gpr_mc_price,
                       gpr_tree_price, price, repetition_study)
from .errors import (BasketGprError, ConfigError, DegenerateTargets,
                     DimensionTooLarge, DomainError, NonPositiveVariance,
                     NotPositiveDefinite, NumericalError, UncachedDate,
                     UnknownTable, WrongPayoff)
from .european import (EiSurrogate, bs_put, build_ei_surrogate, ei_price_batch,
                       ei_price_t, ei_price_t0, geometric_closed_form,
                       qmc_european, qmc_european_batch)
from .gpr import (GprModel, KernelSpec, MATERN32, SQEXP, fit, kernel_eval,
                  kernel_matrix, log_marginal_likelihood, predict, predict_fast)
from .lowdisc import (HaltonConfig, default_leap, gaussian_block, halton_point,
                      halton_points, inv_normal_cdf)
from .market import (ModelParams, Payoff, PointCloud, cholesky_root,
                     design_points, payoff_eval, propagate)
from .oracles import (RepetitionStudy, chi2_quantile, crr_american_put_1d,
                      ekvall_price, geometric_to_1d, hartley_fmax,
                      sample_std_ci)

__version__ = "0.1.0"
