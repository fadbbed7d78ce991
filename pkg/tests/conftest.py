import os

import hypothesis
import numpy as np
import pytest

from constants import ELAPSED_TIME
from services.crossfit_nuisance import fit_folds, make_folds
from services.kernel_engine import build_model
from services.panel_data import SubjectPanel, make_dataset, normalize_covariates

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

DT = 1.0 / 12.0
COVARIATES = ("c1", "c2")
KERNEL_INPUTS = COVARIATES + (ELAPSED_TIME,)


def build_panel(seed, n_subjects=60, k_count=2, d_count=2, p_count=0, max_steps=12,
                hazard=0.08):
    """Random monthly panel: one arm (or none) per row, a constant discrete hazard."""
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n_subjects):
        steps = int(rng.integers(2, max_steps + 1))
        arm = rng.integers(0, k_count + 1, size=steps)
        A = np.zeros((steps, k_count), dtype=np.int8)
        treated = np.flatnonzero(arm > 0)
        A[treated, arm[treated] - 1] = 1
        X = rng.normal(size=(steps, d_count))
        hit = np.flatnonzero(rng.uniform(size=steps) < hazard)
        n, event = (int(hit[0]) + 1, hit[0] * DT) if hit.size else (steps, None)
        subjects.append(SubjectPanel(
            subject_id=i + 1, t=np.arange(n) * DT, A=A[:n], X=X[:n],
            censor_time=(steps - 0.5) * DT, event_time=event,
            baseline_X0=rng.normal(size=p_count),
        ))
    return make_dataset(
        subjects, DT,
        covariate_names=tuple(f"c{j + 1}" for j in range(d_count)),
        treatment_names=tuple(f"A{k + 1}" for k in range(k_count)),
        baseline_names=tuple(f"b{j + 1}" for j in range(p_count)),
    )


@pytest.fixture
def panel():
    return normalize_covariates(build_panel(0))


@pytest.fixture
def latent_panel():
    return normalize_covariates(build_panel(1, n_subjects=80, p_count=2))


@pytest.fixture(scope="session")
def small_model():
    return build_model("linear:c1;gaussian:c2", KERNEL_INPUTS, name="small")


@pytest.fixture(scope="session")
def fold_data(small_model):
    """(dataset, plan, Hessian-route folds) on 120 subjects in 3 folds."""
    ds = normalize_covariates(build_panel(5, n_subjects=120))
    plan = make_folds(ds, 3, seed=1)
    folds = fit_folds(ds, plan, small_model, n_jobs=1)
    return ds, plan, folds
