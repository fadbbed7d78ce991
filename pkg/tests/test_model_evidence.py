import numpy as np
import pytest
from scipy import integrate

from conftest import KERNEL_INPUTS
from services.errors import NotPositiveDefiniteError
from services.kernel_engine import build_model
from services.model_evidence import (
    bootstrap_log_bayes_factors, compare_models, evidence_profile, fit_model, grid_search,
    laplace_log_bme, laplace_log_evidence, log_prior_term, time_homogeneity_audit,
)


def test_laplace_is_exact_for_a_gaussian_likelihood():
    c, h, m, lam = 1.3, 4.0, 0.7, 2.0

    def nll(x):
        return c + 0.5 * h * (x - m) ** 2

    x_hat = h * m / (h + lam)
    mode = nll(x_hat) + 0.5 * lam * x_hat ** 2
    log_bme, logdet = laplace_log_evidence(mode, np.array([[h + lam]]), [lam], [1])
    prior = np.sqrt(lam / (2 * np.pi))
    exact, _ = integrate.quad(lambda x: np.exp(-nll(x)) * prior * np.exp(-0.5 * lam * x * x),
                              -np.inf, np.inf)
    assert logdet == pytest.approx(np.log(h + lam))
    assert log_bme == pytest.approx(np.log(exact), abs=1e-8)


def test_prior_alone_has_zero_log_evidence():
    log_bme, _ = laplace_log_evidence(0.0, 2.5 * np.eye(3), [2.5], [3])
    assert log_bme == pytest.approx(0.0, abs=1e-12)


def test_flat_blocks_contribute_no_prior_term():
    assert log_prior_term([0.0, 4.0], [2, 3]) == pytest.approx(1.5 * np.log(4.0))


def test_indefinite_hessian_is_rejected():
    with pytest.raises(NotPositiveDefiniteError):
        laplace_log_evidence(0.0, -np.eye(2), [1.0], [2])


def test_fit_model_scores_the_regularized_mode(panel, small_model):
    report = fit_model(panel, small_model)
    assert np.isfinite(report.log_bme)
    assert report.fitted.theta.shape == (2,)
    again, _ = laplace_log_bme(report.design, report.x,
                               [k.reg_lambda for k in report.model.kernels])
    assert again == pytest.approx(report.log_bme)


def test_compare_models_is_antisymmetric(panel, small_model):
    other = build_model("gaussian:c1;gaussian:c2", KERNEL_INPUTS, name="other")
    ab = compare_models(panel, small_model, other)
    ba = compare_models(panel, other, small_model)
    assert ab == pytest.approx(-ba, rel=1e-8)


def test_grid_search_keeps_the_best_point(panel):
    model = build_model("linear:c1;gaussian:c2", KERNEL_INPUTS,
                        grid={"gauss1_lambda": (1.0, 4.0), "gauss1_sigma": (0.5, 2.0)})
    best = grid_search(panel, model, n_jobs=1)
    assert len(best.grid) == 4
    assert best.log_bme == pytest.approx(best.grid["log_bme"].max())
    row = best.grid.loc[best.grid["log_bme"].idxmax()]
    assert best.hyperparams["gauss1_lambda"] == row["gauss1_lambda"]
    assert best.hyperparams["gauss1_sigma"] == row["gauss1_sigma"]


def test_audit_reports_the_log_bayes_factor(panel, small_model):
    audit = time_homogeneity_audit(panel, small_model)
    assert audit.log_bayes_factor == pytest.approx(audit.augmented.log_bme - audit.base.log_bme)
    assert audit.violated == (audit.log_bayes_factor > 0)
    assert audit.augmented.model.include_elapsed_time_kernel


def test_bootstrap_table(panel, small_model):
    other = build_model("gaussian:c1;gaussian:c2", KERNEL_INPUTS, name="other")
    table = bootstrap_log_bayes_factors(panel, small_model, other, n_boot=2, tune=False, n_jobs=1)
    assert list(table["replicate"]) == [0, 1]
    np.testing.assert_allclose(table["log_bf"], table["log_bme_a"] - table["log_bme_b"])


def test_evidence_profile_has_one_row_per_value(panel, small_model):
    table = evidence_profile(panel, small_model, small_model.hyperparams(), "gauss1_lambda",
                             [0.5, 1.0, 2.0], n_jobs=1)
    assert list(table["gauss1_lambda"]) == [0.5, 1.0, 2.0]
    assert table["log_bme"].notna().all()
