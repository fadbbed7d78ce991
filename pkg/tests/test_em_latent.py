import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize
from scipy.special import expit

from conftest import build_panel
from services.em_latent import (
    INIT_NEAR_TRUTH, INIT_WARM, EMConfig, e_step, em_fit, initial_points, m_step, multi_start_em,
    swap_labels,
)
from services.errors import NonFiniteError
from services.hazard_likelihood import HazardDesign
from services.optimizer import OptimizerConfig

QUICK = dict(max_em_iters=25, tol_marginal_nll=1e-4)


@pytest.fixture(scope="module")
def latent_design():
    rows = build_panel(21, n_subjects=80, p_count=2, hazard=0.12).rows
    block = np.random.default_rng(21).normal(scale=0.5, size=(rows.n_rows, 2))
    return HazardDesign.build(rows, [block], [1.0], latent=True)


def test_em_never_increases_the_objective(latent_design):
    cfg = EMConfig(starts=1, **QUICK)
    x0 = initial_points(latent_design, cfg)[0]
    result = em_fit(latent_design, x0, cfg)
    assert all(b <= a + 1e-8 * abs(a) for a, b in zip(result.trace, result.trace[1:]))
    assert result.trace[-1] == pytest.approx(latent_design.objective(result.x))


def test_em_returns_the_posterior_of_its_estimate(latent_design):
    cfg = EMConfig(starts=1, **QUICK)
    result = em_fit(latent_design, initial_points(latent_design, cfg)[0], cfg)
    np.testing.assert_allclose(result.responsibilities,
                               latent_design.responsibilities(result.x))
    assert result.small_kappa == (abs(result.x[latent_design.layout.kappa]) <= 1.0)


def test_multi_start_keeps_the_lowest_objective(latent_design):
    cfg = EMConfig(starts=3, seed=4, **QUICK)
    finals = [em_fit(latent_design, x0, cfg).trace[-1] for x0 in initial_points(latent_design, cfg)]
    best = multi_start_em(latent_design, cfg)
    assert best.trace[-1] == pytest.approx(min(finals))


def test_near_truth_start_uses_the_given_values(latent_design):
    cfg = EMConfig(init=INIT_NEAR_TRUTH, theta0=np.array([1.0, 2.0]), kappa0=2.0)
    (x0,) = initial_points(latent_design, cfg)
    lay = latent_design.layout
    np.testing.assert_array_equal(x0[lay.theta], [1.0, 2.0])
    assert x0[lay.kappa] == 2.0
    np.testing.assert_array_equal(x0[lay.beta], 0.0)


def test_warm_start_is_used_as_is(latent_design):
    x0 = np.full(latent_design.layout.n_params, 0.1)
    (start,) = initial_points(latent_design, EMConfig(init=INIT_WARM, x0=x0))
    np.testing.assert_array_equal(start, x0)


def test_random_starts_are_seeded(latent_design):
    a = initial_points(latent_design, EMConfig(starts=2, seed=9))
    b = initial_points(latent_design, EMConfig(starts=2, seed=9))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_swap_labels_is_an_involution(latent_design):
    x = np.random.default_rng(0).normal(size=latent_design.layout.n_params)
    np.testing.assert_allclose(swap_labels(latent_design.layout, swap_labels(latent_design.layout, x)),
                               x, atol=1e-14)


def test_non_finite_start(latent_design):
    x0 = np.full(latent_design.layout.n_params, np.nan)
    with pytest.raises(NonFiniteError):
        em_fit(latent_design, x0)


@pytest.mark.parametrize("kw", [
    {"tol_marginal_nll": 0.0},
    {"init": "bogus"},
    {"init": INIT_WARM},
    {"init": INIT_NEAR_TRUTH},
])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        EMConfig(**kw)


def _latent_point(design, kappa, seed=0):
    lay = design.layout
    x = np.random.default_rng(seed).normal(scale=0.3, size=lay.n_params)
    x[lay.bias] = -2.5
    x[lay.kappa] = kappa
    return x


def _enumerated_posterior(design, x):
    """P(Z=1 | subject rows) by summing the two branch likelihoods directly."""
    lay = design.layout
    eta = design.A @ x[lay.theta] + design.Phi @ x[lay.phi]
    s = design.baseline @ x[lay.beta]
    post = np.empty(design.n_subjects)
    for i in range(design.n_subjects):
        rows = slice(design.offsets[i], design.offsets[i + 1])
        branch = []
        for z, log_prior in ((0, -np.logaddexp(0.0, s[i])), (1, -np.logaddexp(0.0, -s[i]))):
            e = eta[rows] + z * x[lay.kappa]
            branch.append(log_prior + np.sum(design.event[rows] * e - np.exp(e)))
        post[i] = np.exp(branch[1] - np.logaddexp(branch[0], branch[1]))
    return post


@pytest.mark.parametrize("kappa", [-12.0, 0.7, 4.0, 12.0])
def test_e_step_matches_two_branch_enumeration(latent_design, kappa):
    x = _latent_point(latent_design, kappa)
    r = e_step(latent_design, x)
    np.testing.assert_allclose(r[:, 1], _enumerated_posterior(latent_design, x), atol=1e-10)


def test_large_group_effect_sends_every_subject_to_the_low_risk_branch(latent_design):
    r = e_step(latent_design, _latent_point(latent_design, 12.0))
    assert np.all(r[:, 1] < 1e-12)


def test_m_step_group_coefficients_are_a_logistic_fit(latent_design):
    lay = latent_design.layout
    x = _latent_point(latent_design, 1.5, seed=3)
    r = e_step(latent_design, x)
    B = latent_design.baseline

    def loss(beta):
        s = B @ beta
        value = np.sum(r[:, 0] * np.logaddexp(0.0, s) + r[:, 1] * np.logaddexp(0.0, -s))
        return value, B.T @ (expit(s) - r[:, 1])

    standalone = scipy_minimize(loss, np.zeros(B.shape[1]), jac=True, method="BFGS",
                                options={"gtol": 1e-11})
    updated = m_step(latent_design, x, r, OptimizerConfig(eps_stop=1e-7))
    np.testing.assert_allclose(updated[lay.beta], standalone.x, atol=1e-6)
