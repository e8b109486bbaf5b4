"""Covariate-balancing inverse probability weighting.

Categorical treatments: :func:`fit_categorical` balances outcome basis
functions level by level through a two-step GMM fit of the propensity model,
then reports IPW level means with a sandwich covariance.

Continuous treatments: :func:`dose_response_curve` balances kernel-localized
basis functions, then smooths the IPW-weighted outcomes.
"""

from .basis import BasisSpec, covariate_basis, intercept_basis, parse_basis
from .categorical import (contrasts, efficiency_bound, estimate_theta, fit_balance,
                          fit_categorical, gmm_objective, ml_ipw, moments_f, sandwich_variance)
from .continuous import (BandwidthPlan, KernelSpec, balance_objective, covariance_pointpair,
                         dose_response_curve, fit_balance_continuous, kernel_eval,
                         select_h_loocv, select_h_oscv, theta_local_constant, theta_local_linear,
                         theta_raw, variance_pointwise)
from .data import (CategoricalFit, Dataset, DoseResponseCurve, DoseTransform, Schema,
                   TreatmentSpace, load_csv, validate, write_csv)
from .errors import (AllWindowsEmpty, BalcauseError, DataError, DegenerateWeight, DomainError,
                     EmptyWindow, NonConvergence, RankDeficientJacobian, SingularWeight)
from .propensity import (BetaDensity, ExtendedLogit, MultinomialLogit, SameBasisLogLinear,
                         beta_density, mle_fit, mnl_prob, samebasis_prob)
from .simulation import (MetricTable, Scenario, gen_cat41, gen_cont42, misspecify_cat,
                         misspecify_cont, run_replicates, theoretical_bias_var_cont)

__version__ = "0.1.0"
