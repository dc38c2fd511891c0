"""Closed-form integrals against independent quadrature.

Frozen reference values were produced with mpmath at 30 digits by
integrating the normal outcome density against the covariate law directly.
"""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from cencov import (
    GaussianConditional,
    MeanSpec,
    NuisanceBundle,
    censored_marginal_loglik,
    conditional_expectation_x,
    normal_product_decompose,
    prob_observed_xz,
    prob_observed_yz,
    psi_closed,
    psi_effective,
)
from cencov.closed_forms import (
    ClampCounter,
    clip_probability,
    psi_effective_from_pi,
    truncated_score_expectation,
)
from cencov.errors import DegenerateDenominatorError, InvalidInputError
from cencov.nuisance import dependent_censoring_law

MP_PSI_CLOSED = [-0.1032258064516129, 0.21473465140478668, 0.041290322580645161, 0.11837669094693028]
MP_LOGLIK = -5.8446778477858485
MP_TRUNC = [2.3448765281260287, -0.067701647079905647, -0.93795061125041146, 4.5963209559295829]
MP_PI_XZ = 0.4181770977927616
MP_PI_YZ = 0.5471322792464658
MP_PSI_ACC = [0.0039520614086934877, 0.28890243178310258, -0.0015808245634773951, 0.14238244589068728]
MP_PSI_MACC = [0.12355199116971468, -0.066433460612339116, -0.04942079646788587, -0.047450560010085577]
MP_PSI_AIPW = [0.34351093567034988, -0.066041557382089182, -0.13740437426813995, -0.01180017581192774]
MP_PI_XZ_DEP = 0.45515587081086626
MP_PI_YZ_DEP = 0.52597566540493167


def _score(theta, y, x, z, spec):
    """Full-data score written out by hand for a single record."""
    b = theta[:-1]
    s = theta[-1]
    if spec.form == "time_to_event":
        grad = np.r_[1.0, z[0] - x, z[1:]]
    else:
        grad = np.r_[1.0, x, z]
    e = y - grad @ b
    return np.r_[e / s**2 * grad, -1 / s + e**2 / s**3]


def _joint(theta, y, x, z, spec, mu, sd):
    b = theta[:-1]
    grad = np.r_[1.0, z[0] - x, z[1:]] if spec.form == "time_to_event" else np.r_[1.0, x, z]
    return stats.norm.pdf(y, grad @ b, theta[-1]) * stats.norm.pdf(x, mu, sd)


def _quad_expect(fn, theta, y, z, spec, mu, sd, lo=-np.inf):
    den = integrate.quad(lambda x: _joint(theta, y, x, z, spec, mu, sd), lo, np.inf,
                         epsabs=0, epsrel=1e-12, limit=200)[0]
    # the numerator can vanish, so its absolute tolerance is tied to the denominator
    num = integrate.quad(lambda x: fn(x) * _joint(theta, y, x, z, spec, mu, sd) / den, lo, np.inf,
                         epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return num


def test_psi_closed_matches_mpmath(theta_tte, tte, x_law, point):
    y, z, _ = point
    np.testing.assert_allclose(psi_closed(theta_tte, y, z, x_law, tte)[0], MP_PSI_CLOSED,
                               rtol=1e-12, atol=1e-14)


def test_loglik_and_truncated_expectation_match_mpmath(theta_tte, tte, x_law, point):
    y, z, w = point
    assert censored_marginal_loglik(theta_tte, y, w, z, x_law, tte)[0] == pytest.approx(
        MP_LOGLIK, rel=1e-12)
    np.testing.assert_allclose(truncated_score_expectation(theta_tte, y, w, z, x_law, tte)[0],
                               MP_TRUNC, rtol=1e-11)


def test_probabilities_match_mpmath(theta_tte, tte, x_law, c_law, point):
    y, z, w = point
    assert prob_observed_xz(w, z, c_law)[0] == pytest.approx(MP_PI_XZ, rel=1e-13)
    assert prob_observed_yz(y, z, theta_tte, x_law, c_law, spec=tte)[0] == pytest.approx(
        MP_PI_YZ, rel=1e-10)


def test_dependent_probabilities_match_mpmath(theta_tte, tte, x_law, point):
    y, z, w = point
    c_marg = GaussianConditional(0.0, (0.5,), np.sqrt(3.75), (1,))
    c_dep = dependent_censoring_law(x_law, c_marg, 0.35)
    assert c_dep.sd**2 == pytest.approx(269 / 75, rel=1e-14)
    assert prob_observed_xz(w, z, c_dep, "dep")[0] == pytest.approx(MP_PI_XZ_DEP, rel=1e-12)
    assert prob_observed_yz(y, z, theta_tte, x_law, c_dep, "dep", tte)[0] == pytest.approx(
        MP_PI_YZ_DEP, rel=1e-10)


@pytest.mark.parametrize("kind,ref", [("ACC", MP_PSI_ACC), ("MACC", MP_PSI_MACC),
                                      ("AIPW", MP_PSI_AIPW)])
def test_effective_psi_matches_mpmath(kind, ref, theta_tte, tte, x_law, c_law, point):
    y, z, _ = point
    bundle = NuisanceBundle(x_given_z=x_law, c_dist=c_law)
    out = psi_effective(kind, y, z, theta_tte, bundle, "ind", "cens", tte)
    np.testing.assert_allclose(out[0], ref, rtol=1e-9, atol=1e-12)


def test_psi_closed_against_quadrature_random_points():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        form = rng.choice(["linear", "time_to_event"])
        spec = MeanSpec.linear() if form == "linear" else MeanSpec.time_to_event(0)
        k = 2
        p = spec.n_params(k)
        theta = np.r_[rng.normal(0, 1.5, p - 1), rng.uniform(0.5, 2.0)]
        z = rng.normal(size=k)
        mu, sd = rng.normal(0, 1), rng.uniform(0.4, 2.0)
        y = rng.normal(0, 2)
        got = psi_closed(theta, np.array([y]), z[None, :], (np.array([mu]), np.array([sd])), spec)[0]
        for j in range(p):
            ref = -_quad_expect(lambda x: _score(theta, y, x, z, spec)[j], theta, y, z, spec, mu, sd)
            worst = max(worst, abs(got[j] - ref) / max(1.0, abs(ref)))
    assert worst <= 1e-8


def test_loglik_against_quadrature_random_points():
    rng = np.random.default_rng(12)
    spec = MeanSpec.time_to_event(0)
    for _ in range(50):
        theta = np.r_[rng.normal(0, 1.5, 3), rng.uniform(0.5, 2.0)]
        z = rng.normal(size=2)
        mu, sd = rng.normal(), rng.uniform(0.4, 2.0)
        y, w = rng.normal(0, 2), rng.normal(mu, sd)
        ref = integrate.quad(lambda x: _joint(theta, y, x, z, spec, mu, sd), w, np.inf,
                             epsabs=0, epsrel=1e-13, limit=200)[0]
        got = censored_marginal_loglik(theta, np.array([y]), np.array([w]), z[None, :],
                                       (np.array([mu]), np.array([sd])), spec)[0]
        assert abs(np.exp(got) - ref) <= 1e-8 * ref


def test_truncated_expectation_is_gradient_of_loglik(theta_tte, tte, x_law):
    rng = np.random.default_rng(3)
    y, w, z = rng.normal(1, 2, 5), rng.normal(size=5), rng.normal(size=(5, 2))
    g = truncated_score_expectation(theta_tte, y, w, z, x_law, tte)
    h = 1e-6
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = (censored_marginal_loglik(theta_tte + e, y, w, z, x_law, tte)
              - censored_marginal_loglik(theta_tte - e, y, w, z, x_law, tte)) / (2 * h)
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-6, atol=1e-7)


def test_untruncated_expectation_is_minus_psi_closed(theta_tte, tte, x_law):
    rng = np.random.default_rng(4)
    y, z = rng.normal(1, 2, 6), rng.normal(size=(6, 2))
    full = truncated_score_expectation(theta_tte, y, np.full(6, -np.inf), z, x_law, tte)
    np.testing.assert_allclose(full, -psi_closed(theta_tte, y, z, x_law, tte), rtol=1e-13, atol=1e-14)


def test_product_decomposition_reassembles_density(theta_tte, tte, x_law):
    rng = np.random.default_rng(5)
    y, z = rng.normal(1, 2, 4), rng.normal(size=(4, 2))
    pd = normal_product_decompose(theta_tte, y, z, x_law, tte)
    xs = rng.normal(size=4)
    mu = x_law.mean(z)
    direct = np.array([_joint(theta_tte, y[i], xs[i], z[i], tte, mu[i], x_law.sd) for i in range(4)])
    rebuilt = np.exp(pd.log_D) * stats.norm.pdf(xs, pd.mu_star, pd.sd_star)
    np.testing.assert_allclose(rebuilt, direct, rtol=1e-12)


def test_conditional_expectation_x_moments(theta_tte, tte, x_law, point):
    y, z, _ = point
    pd = normal_product_decompose(theta_tte, y, z, x_law, tte)
    m1 = conditional_expectation_x(lambda xs: xs, y, z, theta_tte, x_law, tte)
    m2 = conditional_expectation_x(lambda xs: xs**2, y, z, theta_tte, x_law, tte)
    assert m1[0] == pytest.approx(pd.mu_star[0], rel=1e-13)
    assert m2[0] == pytest.approx(pd.sd_star[0] ** 2 + pd.mu_star[0] ** 2, rel=1e-13)


def test_conditional_expectation_warns_when_rule_is_too_coarse(theta_tte, tte, x_law, point):
    y, z, _ = point
    with pytest.warns(RuntimeWarning, match="refinement"):
        conditional_expectation_x(lambda xs: np.abs(xs - 0.1), y, z, theta_tte, x_law, tte, nodes=4)


def test_missing_effective_psi_forms_are_multiples_of_closed(theta_tte, tte, x_law, point):
    # with pi constant in x, ACC gives psi_closed and MACC gives -pi times it
    y, z, _ = point
    const = 0.37
    closed = psi_closed(theta_tte, y, z, x_law, tte)
    acc = psi_effective_from_pi("ACC", theta_tte, y, z, x_law, lambda xs: np.full(xs.shape, const), tte)
    macc = psi_effective_from_pi("MACC", theta_tte, y, z, x_law, lambda xs: np.full(xs.shape, const), tte)
    np.testing.assert_allclose(acc, closed, rtol=1e-12)
    np.testing.assert_allclose(macc, -const * closed, rtol=1e-12)


def test_degenerate_denominator_raises(theta_tte, tte, x_law, point):
    y, z, _ = point
    with pytest.raises(DegenerateDenominatorError):
        psi_effective_from_pi("AIPW", theta_tte, y, z, x_law, lambda xs: np.ones(xs.shape), tte)


def test_clip_probability_counts():
    counter = ClampCounter()
    out = clip_probability(np.array([0.0, 0.5, 1.0]), counter)
    assert counter.count == 2
    assert 0 < out[0] < 1e-11 and 1 - 1e-11 < out[2] < 1


def test_gaussian_conditional_validation():
    with pytest.raises(InvalidInputError):
        GaussianConditional(0.0, (1.0,), -1.0)
    with pytest.raises(InvalidInputError):
        GaussianConditional(0.0, (1.0, 2.0), 1.0, (0,))
    law = GaussianConditional(1.0, (2.0,), 0.5, (1,), given_slope=0.3)
    assert GaussianConditional.from_dict(law.to_dict()) == law
    with pytest.raises(InvalidInputError):
        law.mean(np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(y=st.floats(-8, 8), mu=st.floats(-3, 3), sd=st.floats(0.2, 3), a=st.floats(-2, 2),
       zz=st.floats(-2, 2), sigma=st.floats(0.3, 3))
def test_posterior_variance_below_prior(y, mu, sd, a, zz, sigma):
    theta = np.array([1.0, 3.0, 2.0, sigma])
    pd = normal_product_decompose(theta, np.array([y]), np.array([[a, zz]]),
                                  (np.array([mu]), np.array([sd])), MeanSpec.time_to_event(0))
    assert 0 < pd.sd_star[0] <= sd


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-6, 6), zz=st.floats(-3, 3))
def test_pi_xz_in_unit_interval_and_decreasing(x, zz):
    law = GaussianConditional(0.0, (0.5,), np.sqrt(3.75), (1,))
    z = np.array([[0.0, zz]])
    p1 = prob_observed_xz(np.array([x]), z, law)[0]
    p2 = prob_observed_xz(np.array([x + 0.5]), z, law)[0]
    assert 0 < p2 <= p1 < 1


def test_quadrature_nodes_do_not_warn_at_default(theta_tte, tte, x_law, c_law):
    rng = np.random.default_rng(8)
    y, z = rng.normal(1, 3, 50), rng.normal(size=(50, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        conditional_expectation_x(lambda xs: prob_observed_xz(xs, z, c_law), y, z, theta_tte,
                                  x_law, tte)
