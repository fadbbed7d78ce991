"""Exact expectations of the debiased scores on a cohort small enough to enumerate.

One binary covariate fixed per subject, one treatment arm redrawn every step, at most
three steps. Every (covariate, treatment, event) path is listed with its probability,
so population means of a score are weighted sums over paths rather than Monte-Carlo
averages.
"""
from types import SimpleNamespace

import numpy as np
import pytest

from services.debias_scores import score_g, score_H
from services.hazard_likelihood import HazardDesign, split_blocks

STEPS = 3
THETA = 0.7
P_X1 = 0.4
PROPENSITY = np.array([0.3, 0.6])       # P(A=1 | X)
LOG_BASE = np.array([-2.3, -1.6])       # f*(X)
LOG_ODDS = np.log(PROPENSITY / (1 - PROPENSITY))
T = 1e-5


def _paths():
    found = []

    def walk(x, prob, steps):
        if len(steps) == STEPS:
            found.append((prob, x, steps))
            return
        for a in (0, 1):
            p_a = PROPENSITY[x] if a else 1 - PROPENSITY[x]
            lam = np.exp(THETA * a + LOG_BASE[x])
            found.append((prob * p_a * lam, x, steps + [(a, 1)]))
            walk(x, prob * p_a * (1 - lam), steps + [(a, 0)])

    for x in (0, 1):
        walk(x, P_X1 if x else 1 - P_X1, [])
    return found


@pytest.fixture(scope="module")
def cohort():
    paths = _paths()
    lengths = [len(steps) for _, _, steps in paths]
    rows = SimpleNamespace(
        A=np.array([[a] for _, _, steps in paths for a, _ in steps], dtype=float),
        event=np.array([d for _, _, steps in paths for _, d in steps], dtype=float),
        subject=np.repeat(np.arange(len(paths)), lengths),
        offsets=np.concatenate([[0], np.cumsum(lengths)]),
        n_rows=sum(lengths), n_subjects=len(paths), baseline=np.zeros((len(paths), 0)),
    )
    X = np.repeat([x for _, x, _ in paths], lengths)
    return SimpleNamespace(rows=rows, X=X, weight=np.array([p for p, _, _ in paths]))


def _design(cohort, f_shift=0.0):
    offset = LOG_BASE[cohort.X] + f_shift
    return HazardDesign.build(cohort.rows, [cohort.X[:, None].astype(float)], [0.0], offset=offset)


def _population_blocks(cohort):
    d = _design(cohort)
    x = np.zeros(d.layout.n_params)
    x[d.layout.theta] = THETA
    w = cohort.weight[d.subject] * np.exp(d.linear_predictor(x))
    return split_blocks(d.X.T @ (d.X * w[:, None]), 1)


def _mean_H(cohort, zeta, f_shift=0.0):
    fold = SimpleNamespace(zeta=zeta, hessian_train=_population_blocks(cohort),
                           holdout=SimpleNamespace(design=_design(cohort, f_shift)))
    return cohort.weight @ score_H(fold).phi(np.array([THETA]))


def _mean_g(cohort, f_shift=0.0, g_shift=0.0):
    g = LOG_ODDS[cohort.X] + g_shift
    fold = SimpleNamespace(
        holdout=SimpleNamespace(design=_design(cohort, f_shift),
                                data=SimpleNamespace(rows=SimpleNamespace(Z=cohort.X[:, None]))),
        g_hats={0: SimpleNamespace(values=lambda Z: g)},
    )
    terms, _ = score_g(fold)
    return cohort.weight @ terms.phi(np.array([THETA]))


def _mean_plain(cohort, f_shift=0.0):
    d = _design(cohort, f_shift)
    eta = THETA * d.A[:, 0] + d.offset
    return cohort.weight @ d.subject_sum(d.A[:, 0] * (np.exp(eta) - d.event))


def _slope(mean_at):
    return float(np.squeeze(mean_at(T) - mean_at(-T))) / (2 * T)


@pytest.fixture(scope="module")
def directions(cohort):
    rng = np.random.default_rng(0)
    v, u = rng.normal(size=2), rng.normal(size=2)
    return v[0] + v[1] * cohort.X, u[cohort.X]


def test_paths_cover_every_outcome(cohort):
    assert cohort.weight.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(cohort.weight > 0)


@pytest.mark.parametrize("mean", [
    lambda c: _mean_g(c),
    lambda c: _mean_H(c, 1e-3),
    lambda c: _mean_plain(c),
])
def test_scores_have_zero_mean_at_the_truth(cohort, mean):
    assert abs(float(np.squeeze(mean(cohort)))) <= 1e-8


def test_logistic_score_is_insensitive_to_both_nuisances(cohort, directions):
    h_f, h_g = directions
    along_f = _slope(lambda t: _mean_g(cohort, f_shift=t * h_f))
    along_g = _slope(lambda t: _mean_g(cohort, g_shift=t * h_g))
    plain = _slope(lambda t: _mean_plain(cohort, f_shift=t * h_f))
    assert abs(along_f) <= 1e-6
    assert abs(along_g) <= 1e-6
    assert abs(plain) >= 10 * 1e-6


def test_hessian_score_sensitivity_grows_linearly_with_the_ridge(cohort, directions):
    h_f, _ = directions
    small = _slope(lambda t: _mean_H(cohort, 1e-4, f_shift=t * h_f))
    double = _slope(lambda t: _mean_H(cohort, 2e-4, f_shift=t * h_f))
    plain = _slope(lambda t: _mean_plain(cohort, f_shift=t * h_f))
    assert double / small == pytest.approx(2.0, rel=0.2)
    assert abs(plain) >= 10 * abs(small)
