"""End-to-end runs on simulated cohorts. Deselected by default; run with `pytest -m slow`."""
import numpy as np
import pandas as pd
import pytest
from joblib import Parallel, delayed

from app import main
from constants import (
    BUNDLE_FORMAT, ESTIMATE_FORMAT, EST_DEBIAS_G, EST_DEBIAS_H, EST_DEBIAS_LATENT, EST_NAIVE,
    EVIDENCE_FORMAT, EXIT_OK,
)
from services.em_latent import INIT_NEAR_TRUTH, EMConfig
from services.model_evidence import bootstrap_log_bayes_factors, fit_model, time_homogeneity_audit
from services.model_store import read_json
from services.pipeline_service import REFERENCE_MODELS, RunSettings, prepare, reference_model
from services.sim_dgp import Sim1Config, Sim2Config, replicate_experiment, simulate_1, simulate_2

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    path = tmp_path_factory.mktemp("sim") / "cohort.csv"
    assert main(["simulate", "--dgp", "1", "--n", "400", "--seed", "7", "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def latent_cohort(tmp_path_factory):
    path = tmp_path_factory.mktemp("sim") / "cohort.csv"
    assert main(["simulate", "--dgp", "2", "--n", "400", "--seed", "8", "--out", str(path)]) == EXIT_OK
    return path


def _finite_estimate(out_dir, name):
    doc = read_json(out_dir / "estimate.json", ESTIMATE_FORMAT)
    est = doc["estimates"][name]
    assert len(est["theta_bar"]) == 2
    assert np.all(np.isfinite(est["theta_bar"]))
    assert np.all(np.asarray(est["se"]) > 0)
    return doc


def test_pipeline_on_a_simulated_cohort(cohort, tmp_path):
    code = main(["pipeline", "--data", str(cohort), "--reference", "correct", "--folds", "3",
                 "--zeta-h", "0.01", "--theta-star", "1,2", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    doc = _finite_estimate(tmp_path, EST_DEBIAS_H)
    assert set(doc["estimates"]) == {EST_DEBIAS_H, EST_NAIVE}
    evidence = read_json(tmp_path / "evidence.json", EVIDENCE_FORMAT)
    assert np.isfinite(evidence["log_bme"])
    assert "audit" in evidence
    assert (tmp_path / "grid.csv").is_file()
    assert read_json(tmp_path / "nuisance.json", BUNDLE_FORMAT)["M"] == 3


@pytest.mark.parametrize("zeta_g", ["1", "70"])
def test_logistic_route_at_both_ridge_levels(cohort, tmp_path, zeta_g):
    code = main(["debias", "--data", str(cohort), "--reference", "correct", "--route", "g",
                 "--folds", "3", "--zeta-h", "0.01", "--zeta-g", zeta_g, "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    doc = _finite_estimate(tmp_path, EST_DEBIAS_G)
    assert doc["estimates"][EST_DEBIAS_G]["zeta"]["g1"] == float(zeta_g)


def test_latent_route_on_the_risk_group_cohort(latent_cohort, tmp_path):
    code = main(["pipeline", "--data", str(latent_cohort), "--reference", "latent",
                 "--route", "latent", "--folds", "3", "--zeta-h", "0.01", "--em-starts", "2",
                 "--no-audit", "--no-tune", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    _finite_estimate(tmp_path, EST_DEBIAS_LATENT)
    em = read_json(tmp_path / "evidence.json", EVIDENCE_FORMAT)["em"]
    trace = np.asarray(em["trace"])
    assert np.all(np.diff(trace) <= 1e-8 * np.abs(trace[:-1]))


def test_experiment_writes_its_tables(tmp_path):
    code = main(["experiment", "--dgp", "1", "--n", "300", "--seed", "3", "--replicates", "2",
                 "--estimators", "naive_ml,debias_H", "--folds", "3", "--zeta-h", "0.01",
                 "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    with open(tmp_path / "summary.csv") as fh:
        assert fh.readline().strip() == "# replicates=2"
    summary = pd.read_csv(tmp_path / "summary.csv", comment="#")
    assert set(summary["estimator"]) <= {EST_NAIVE, EST_DEBIAS_H}
    assert (summary["replicates"] == 2).all()
    table = pd.read_csv(tmp_path / "t_table.csv", keep_default_na=False)
    assert set(table["replicate"]) == {0, 1}
    hist = pd.read_csv(tmp_path / "histogram.csv")
    for (name, arm), part in hist.groupby(["estimator", "arm"]):
        row = summary[(summary["estimator"] == name) & (summary["arm"] == arm)].iloc[0]
        assert part["count"].sum() == row["succeeded"]


def test_tuned_debiasing_centres_the_t_statistics_of_the_correct_model():
    cfg = Sim1Config(n_subjects=500, P2=0.5, seed=2024)
    settings = RunSettings(model_text=REFERENCE_MODELS["correct"][0], model_name="correct",
                           folds=5)
    estimators = (EST_NAIVE, EST_DEBIAS_H, EST_DEBIAS_G)
    _, summary, _ = replicate_experiment(cfg, 50, estimators, settings, n_jobs=-1)
    arm1 = summary[summary["arm"] == 1].set_index("estimator")
    for name in (EST_DEBIAS_H, EST_DEBIAS_G):
        assert abs(arm1.loc[name, "mean_t"]) <= 0.3
        assert 0.75 <= arm1.loc[name, "std_t"] <= 1.3
        assert abs(arm1.loc[EST_NAIVE, "mean_t"]) >= 2 * abs(arm1.loc[name, "mean_t"])


def test_evidence_prefers_the_correct_model_on_resamples():
    ds = prepare(simulate_1(Sim1Config(n_subjects=1000, P2=1.0, seed=99)))
    correct, deleted = reference_model(ds, "correct"), reference_model(ds, "f2_deleted")
    table = bootstrap_log_bayes_factors(ds, correct, deleted, n_boot=10, seed=1, tune=False,
                                        n_jobs=-1)
    assert len(table) == 10
    assert (table["log_bf"] > 0).sum() >= 8


def _audit_flags(cfg, which, replicate):
    if isinstance(cfg, Sim2Config):
        ds, _ = simulate_2(cfg, replicate)
    else:
        ds = simulate_1(cfg, replicate)
    ds = prepare(ds)
    return time_homogeneity_audit(ds, reference_model(ds, which)).violated


def _flag_count(cfg, which, replicates=10):
    flags = Parallel(n_jobs=-1)(delayed(_audit_flags)(cfg, which, r) for r in range(replicates))
    return sum(bool(f) for f in flags)


def test_audit_flags_the_deleted_covariate_more_often_than_the_correct_model():
    cfg = Sim1Config(n_subjects=1000, P2=1.0, seed=31)
    assert _flag_count(cfg, "f2_deleted") > _flag_count(cfg, "correct")


def test_audit_flags_the_observed_only_model_under_hidden_risk_groups():
    cfg = Sim2Config(n_subjects=1000, kappa_star=3.0, seed=41)
    assert _flag_count(cfg, "observed_only") >= 6


def test_latent_model_has_the_higher_evidence_under_hidden_risk_groups():
    ds, _ = simulate_2(Sim2Config(n_subjects=1000, kappa_star=3.0, seed=42))
    ds = prepare(ds)
    em_cfg = EMConfig(init=INIT_NEAR_TRUTH, theta0=np.array([1.0, 2.0]), kappa0=3.0, starts=1)
    latent = fit_model(ds, reference_model(ds, "latent"), em_cfg=em_cfg)
    observed = fit_model(ds, reference_model(ds, "observed_only"))
    assert latent.log_bme > observed.log_bme


def test_latent_route_centres_the_t_statistics_under_hidden_risk_groups():
    cfg = Sim2Config(n_subjects=1000, kappa_star=3.0, seed=43)
    settings = RunSettings(model_text=REFERENCE_MODELS["latent"][0], model_name="latent",
                           latent=True, folds=5, theta0=(1.0, 2.0), kappa0=3.0)
    _, summary, _ = replicate_experiment(cfg, 30, (EST_DEBIAS_LATENT,), settings, n_jobs=-1)
    arm1 = summary[summary["arm"] == 1].set_index("estimator")
    assert arm1.loc[EST_DEBIAS_LATENT, "succeeded"] >= 25
    assert abs(arm1.loc[EST_DEBIAS_LATENT, "mean_t"]) <= 0.4
