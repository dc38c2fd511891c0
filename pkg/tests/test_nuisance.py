import numpy as np
import pytest
from scipy import integrate, optimize, stats

from cencov import CensoredData, GaussianConditional, MisspecInjector, NuisanceBundle
from cencov.errors import ConfigurationError, InvalidInputError
from cencov.nuisance import (
    _alpha_parts,
    alpha_loglik,
    dependent_censoring_law,
    fit_alpha,
    fit_logistic_kappa,
)
from cencov.numerics import mvn_sample

SIGMA_IND = np.array([[1, 0.25, 0.5], [0.25, 4, 0.5], [0.5, 0.5, 1]])
SIGMA_DEP = np.array([[1, 0.60, 0.5], [0.60, 4, 0.5], [0.5, 0.5, 1]])


def _censored(cov, n, seed):
    xcz = mvn_sample(np.zeros(3), cov, n, seed=seed)
    x, c, z = xcz.T
    w = np.minimum(x, c)
    return CensoredData(np.zeros(n), w, (x <= c).astype(int), np.column_stack([np.zeros(n), z])), x


def test_independent_loglik_matches_scipy_terms():
    data, _ = _censored(SIGMA_IND, 50, 1)
    alpha = np.array([0.1, 0.4, 0.9, -0.2, 0.6, 1.8])
    got = alpha_loglik(alpha, data, (1,), (1,))
    z = data.z[:, 1]
    mx, mc = 0.1 + 0.4 * z, -0.2 + 0.6 * z
    ref = np.where(data.delta == 1,
                   stats.norm.logpdf(data.w, mx, 0.9) + stats.norm.logsf(data.w, mc, 1.8),
                   stats.norm.logpdf(data.w, mc, 1.8) + stats.norm.logsf(data.w, mx, 0.9))
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_dependent_loglik_matches_bivariate_integral():
    data, _ = _censored(SIGMA_DEP, 8, 2)
    alpha = np.array([0.0, 0.5, np.sqrt(0.75), 0.0, 0.5, np.sqrt(3.75)])
    got = alpha_loglik(alpha, data, (1,), (1,), cov_xc_given_z=0.35)
    cov = np.array([[0.75, 0.35], [0.35, 3.75]])
    for i in range(data.n):
        mu = np.array([0.5, 0.5]) * data.z[i, 1]
        mvn = stats.multivariate_normal(mu, cov)
        w = data.w[i]
        if data.delta[i] == 1:
            val = integrate.quad(lambda c: mvn.pdf([w, c]), w, np.inf, epsrel=1e-11)[0]
        else:
            val = integrate.quad(lambda x: mvn.pdf([x, w]), w, np.inf, epsrel=1e-11)[0]
        assert got[i] == pytest.approx(np.log(val), rel=1e-8)


def test_alpha_scores_are_loglik_gradient():
    data, _ = _censored(SIGMA_IND, 30, 3)
    _, block, _ = fit_alpha(data, "ind", x_columns=(1,), c_columns=(1,))
    a = block.params + 0.05
    h = 1e-6
    scores = _alpha_parts(a, data, (1,), (1,), 0.0)[1]
    for j in range(a.size):
        e = np.zeros(a.size)
        e[j] = h
        fd = (alpha_loglik(a + e, data, (1,), (1,)) - alpha_loglik(a - e, data, (1,), (1,))) / (2 * h)
        np.testing.assert_allclose(scores[:, j], fd, rtol=1e-5, atol=1e-7)


def test_fit_alpha_agrees_with_generic_optimizer():
    data, _ = _censored(SIGMA_IND, 800, 4)
    alpha, block, info = fit_alpha(data, "ind", x_columns=(1,), c_columns=(1,))

    def nll(a):
        if a[2] <= 0 or a[5] <= 0:
            return np.inf
        return -alpha_loglik(a, data, (1,), (1,)).sum()

    ref = optimize.minimize(nll, np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0]), method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-11, "maxiter": 40_000, "maxfev": 40_000})
    np.testing.assert_allclose(alpha, ref.x, atol=2e-5)
    assert np.all(np.linalg.eigvalsh(0.5 * (info + info.T)) > 0)


def test_fit_alpha_recovers_truth_at_large_n():
    data, _ = _censored(SIGMA_IND, 40_000, 5)
    alpha, _, info = fit_alpha(data, "ind", x_columns=(1,), c_columns=(1,))
    truth = np.array([0.0, 0.5, np.sqrt(0.75), 0.0, 0.5, np.sqrt(3.75)])
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    assert np.all(np.abs(alpha - truth) < 4 * se)


def test_fit_alpha_dependent_recovers_truth():
    data, _ = _censored(SIGMA_DEP, 40_000, 6)
    alpha, _, info = fit_alpha(data, "dep", 0.35, x_columns=(1,), c_columns=(1,))
    truth = np.array([0.0, 0.5, np.sqrt(0.75), 0.0, 0.5, np.sqrt(3.75)])
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    assert np.all(np.abs(alpha - truth) < 4 * se)


def test_dependent_censoring_law_from_covariance():
    x_law = GaussianConditional(0.0, (0.5,), np.sqrt(0.75), (1,))
    c_marg = GaussianConditional(0.0, (0.5,), np.sqrt(3.75), (1,))
    law = dependent_censoring_law(x_law, c_marg, 0.35)
    # regression of C on (X, Z) from the joint covariance
    coef = np.linalg.solve(SIGMA_DEP[np.ix_([0, 2], [0, 2])], SIGMA_DEP[[0, 2], 1])
    var = SIGMA_DEP[1, 1] - SIGMA_DEP[1, [0, 2]] @ coef
    assert law.given_slope == pytest.approx(coef[0], rel=1e-13)
    assert law.slopes[0] == pytest.approx(coef[1], rel=1e-13)
    assert law.sd**2 == pytest.approx(var, rel=1e-13)
    assert var == pytest.approx(269 / 75, rel=1e-13)
    with pytest.raises(InvalidInputError):
        dependent_censoring_law(x_law, c_marg, 5.0)


def test_likelihood_law_of_x_given_c_matches_joint():
    x_law = GaussianConditional(0.0, (0.5,), np.sqrt(0.75), (1,))
    c_marg = GaussianConditional(0.0, (0.5,), np.sqrt(3.75), (1,))
    bundle = NuisanceBundle(x_given_z=x_law, c_dist=dependent_censoring_law(x_law, c_marg, 0.35))
    w, z = np.array([0.4, -1.0]), np.array([[0.0, 0.3], [0.0, -0.8]])
    mean, sd = bundle.x_law_for_likelihood(w, z, "dep")
    idx = [1, 2]
    s_cz = SIGMA_DEP[np.ix_(idx, idx)]
    coef = np.linalg.solve(s_cz, SIGMA_DEP[idx, 0])
    ref_mean = np.column_stack([w, z[:, 1]]) @ coef
    ref_var = SIGMA_DEP[0, 0] - SIGMA_DEP[0, idx] @ coef
    np.testing.assert_allclose(mean, ref_mean, rtol=1e-12)
    np.testing.assert_allclose(sd**2, ref_var, rtol=1e-12)


def test_logistic_kappa_matches_generic_optimizer():
    rng = np.random.default_rng(7)
    n = 2000
    y, z = rng.normal(size=n), rng.normal(size=(n, 2))
    d = (rng.uniform(size=n) < 1 / (1 + np.exp(-(0.2 + 0.8 * y - 0.5 * z[:, 0])))).astype(int)
    kappa, block, info = fit_logistic_kappa(d, y, z)
    X = np.column_stack([np.ones(n), y, z])

    def nll(b):
        eta = X @ b
        return np.sum(np.logaddexp(0, eta) - d * eta)

    ref = optimize.minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(kappa, ref.x, atol=1e-6)
    assert block.scores.shape == (n, 4)
    np.testing.assert_allclose(block.scores.sum(0), 0, atol=1e-8)


def test_logistic_kappa_drops_collinear_column_and_fixes_y():
    rng = np.random.default_rng(8)
    n = 500
    y, z1 = rng.normal(size=n), rng.normal(size=n)
    z = np.column_stack([z1, 2 * z1, np.ones(n)])
    d = (rng.uniform(size=n) < 0.6).astype(int)
    with pytest.warns(RuntimeWarning, match="dropped"):
        kappa, block, _ = fit_logistic_kappa(d, y, z)
    assert kappa[3] == 0 and kappa[4] == 0 and set(block.dropped) == {3, 4}
    with pytest.warns(RuntimeWarning):
        kappa2, _, _ = fit_logistic_kappa(d, y, z, include_y=False)
    assert kappa2[1] == 0.0


def test_logistic_kappa_errors():
    y = np.linspace(-1, 1, 40)
    with pytest.raises(InvalidInputError, match="single class"):
        fit_logistic_kappa(np.ones(40), y, y[:, None])
    with pytest.raises(InvalidInputError, match="separated"):
        fit_logistic_kappa((y > 0).astype(int), y, np.zeros((40, 1)) + np.random.default_rng(0).normal(size=(40, 1)))


def test_missing_blocks_are_named():
    bundle = NuisanceBundle()
    with pytest.raises(ConfigurationError, match="x_given_z"):
        bundle.require_x()
    with pytest.raises(ConfigurationError, match="c_dist"):
        bundle.require_c()
    with pytest.raises(ConfigurationError, match="kappa"):
        bundle.require_kappa()


def test_uniform_injector_targets():
    base = NuisanceBundle(x_given_z=GaussianConditional(0.0, (), 1.0),
                          c_dist=GaussianConditional(0.0, (), 2.0))
    rng = np.random.default_rng(0)
    b = MisspecInjector("uniform_pi", "weights").apply(base, 1000, rng)
    assert b.injected_pi.min() >= 0.1 and b.injected_pi.max() <= 0.9 and not b.inject_psi
    b2 = MisspecInjector("uniform_pi", "both").apply(base, 5, np.random.default_rng(1))
    z = np.zeros((5, 1))
    nodes = np.tile(np.linspace(-1, 1, 3), (5, 1))
    np.testing.assert_array_equal(b2.pi_x_on_nodes(np.zeros(5), z, "cens", "ind", for_psi=True)(nodes),
                                  np.repeat(b2.injected_pi[:, None], 3, axis=1))
    model = b2.pi_x_on_nodes(np.zeros(5), z, "cens", "ind")(nodes)
    assert np.all(np.diff(model, axis=1) < 0)
    assert b2.provenance["pi"].startswith("misspecified")


def test_wrong_x_injector_and_validation():
    base = NuisanceBundle(x_given_z=GaussianConditional(0.0, (0.5,), 1.0, (0,)))
    b = MisspecInjector("wrong_x_dist").apply(base, 3)
    assert b.x_given_z.intercept == -2.0 and b.x_given_z.sd == 1.0 and not b.x_given_z.slopes
    with pytest.raises(InvalidInputError):
        MisspecInjector("bogus")
    with pytest.raises(InvalidInputError):
        MisspecInjector("uniform_pi", lo=0.5, hi=0.4)
    with pytest.raises(InvalidInputError):
        MisspecInjector("uniform_pi").apply(base, 3)
