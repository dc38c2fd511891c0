"""Regression with a right-censored or missing covariate.

Estimating-equation estimators (complete case, inverse probability
weighting, maximum likelihood and three augmented forms), sandwich
inference and a Monte Carlo harness.
"""

from .closed_forms import (
    GaussianConditional,
    censored_marginal_loglik,
    conditional_expectation_x,
    normal_product_decompose,
    prob_observed_xz,
    prob_observed_yz,
    psi_closed,
    psi_effective,
)
from .errors import (
    CencovError,
    ConfigurationError,
    ConvergenceError,
    DegenerateDenominatorError,
    InvalidInputError,
    SingularMatrixError,
)
from .estimators import (
    EstimatorSpec,
    FitResult,
    NuisanceConfig,
    estimate_lambda,
    fit_estimator,
    phi_contribution,
    phi_matrix,
)
from .inference import confidence_intervals, sandwich
from .model import (
    CensoredData,
    CensoredObservation,
    MeanSpec,
    MissingData,
    MissingObservation,
    Theta,
    log_density_y,
    mean_value,
    score_full,
)
from .nuisance import MisspecInjector, NuisanceBundle, fit_alpha, fit_logistic_kappa
from .numerics import (
    SolverConfig,
    gauss_hermite,
    mvn_sample,
    normal_upper_tail,
    numeric_jacobian,
    solve_estimating_equation,
)

__version__ = "0.1.0"
