"""
Estimating the nuisance laws
============================

In practice the laws of X | Z and C | Z are unknown. Fit them by maximum
likelihood and let the sandwich variance account for that step.
"""

from cencov import MeanSpec
from cencov.estimators import EstimatorSpec, NuisanceConfig, fit_estimator
from cencov.simulation import bundled_scenario, generate_dataset

scenario = bundled_scenario("ind_estimated").with_updates(n=2000)
data = generate_dataset(scenario, 1).data
mean = MeanSpec.time_to_event(0)

# Normal laws for X | Z and C | Z, both using covariate column 1.
config = NuisanceConfig(estimate_alpha=True, x_columns=(1,), c_columns=(1,))

spec = EstimatorSpec("MACC", lambda_mode="nuisance_adjusted", mean=mean)
fit = fit_estimator(spec, data, nuisance_config=config)

print("estimated nuisance parameters:", fit.nuisance_params["alpha"].round(3))
print("theta hat:", fit.theta_hat.round(4))

# Both standard errors are reported: with and without the correction for
# the estimated nuisance parameters.
print("corrected SE:  ", fit.se.round(4))
print("uncorrected SE:", fit.se_uncorrected.round(4))
