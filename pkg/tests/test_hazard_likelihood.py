from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import build_panel
from services.crossfit_nuisance import correction_matrix
from services.em_latent import swap_labels
from services.errors import NoEventsError
from services.hazard_likelihood import HazardDesign, ParameterLayout, fit_hazard, split_blocks
from services.optimizer import OptimizerConfig


def _design(seed, latent=False, lam=0.5):
    rows = build_panel(seed, n_subjects=50, p_count=2 if latent else 0).rows
    block = np.random.default_rng(seed + 100).normal(scale=0.3, size=(rows.n_rows, 3))
    return HazardDesign.build(rows, [block], [lam], latent=latent)


def _point(design, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=0.3, size=design.layout.n_params)
    x[design.layout.bias] = -2.5
    if design.layout.latent:
        x[design.layout.kappa] = 1.2
    return x


def _fd_gradient(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _fd_jacobian(fun, x, h=1e-5):
    return np.column_stack([
        (fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(len(x))
    ])


def test_layout_packing_round_trip():
    lay = ParameterLayout(k_count=2, block_dims=(3, 4), latent=True, p_count=2)
    assert lay.n_params == 2 + 7 + 1 + 1 + 3
    x = np.arange(lay.n_params, dtype=float)
    np.testing.assert_array_equal(lay.pack(lay.unpack(x)), x)
    assert lay.unpack(x).kappa == x[lay.kappa]


@given(st.integers(0, 500))
def test_gradient_matches_finite_differences(seed):
    design = _design(seed)
    x = _point(design, seed)
    value, grad = design.objective_and_gradient(x)
    assert value == pytest.approx(design.objective(x))
    np.testing.assert_allclose(grad, _fd_gradient(design.objective, x), rtol=1e-5, atol=1e-5)


@given(st.integers(0, 500))
def test_hessian_matches_finite_differences(seed):
    design = _design(seed)
    x = _point(design, seed)
    fd = _fd_jacobian(lambda z: design.objective_and_gradient(z)[1], x)
    np.testing.assert_allclose(design.regularized_hessian(x), fd, rtol=1e-5, atol=1e-4)


@given(st.integers(0, 500))
def test_latent_marginal_derivatives(seed):
    design = _design(seed, latent=True)
    x = _point(design, seed)
    np.testing.assert_allclose(design.gradient(x), _fd_gradient(design.nll, x),
                               rtol=1e-5, atol=1e-5)
    fd = _fd_jacobian(design.gradient, x)
    np.testing.assert_allclose(design.marginal_hessian(x), fd, rtol=1e-4, atol=1e-4)


def test_weighted_objective_derivatives():
    design = _design(7, latent=True)
    x = _point(design, 7)
    r = np.random.default_rng(1).dirichlet([1.0, 1.0], size=design.n_subjects)
    fd = _fd_gradient(lambda z: design.weighted_objective(z, r), x)
    np.testing.assert_allclose(design.weighted_gradient(x, r), fd, rtol=1e-5, atol=1e-5)
    fd_h = _fd_jacobian(lambda z: design.expected_gradient(z, r), x)
    np.testing.assert_allclose(design.expected_hessian(x, r), fd_h, rtol=1e-4, atol=1e-4)


def test_variational_bound_is_tight_at_the_posterior():
    design = _design(8, latent=True)
    x = _point(design, 8)
    r = design.responsibilities(x)
    assert design.variational_bound(x, r) == pytest.approx(design.nll(x), rel=1e-10)
    other = np.full_like(r, 0.5)
    assert design.variational_bound(x, other) >= design.nll(x)


def test_responsibilities_are_probabilities():
    design = _design(9, latent=True)
    r = design.responsibilities(_point(design, 9))
    assert r.shape == (design.n_subjects, 2)
    np.testing.assert_allclose(r.sum(axis=1), 1.0)
    assert np.all((r >= 0) & (r <= 1))


def test_no_group_effect_gives_even_responsibilities():
    design = _design(10, latent=True)
    x = _point(design, 10)
    x[design.layout.kappa] = 0.0
    x[design.layout.beta] = 0.0
    np.testing.assert_allclose(design.responsibilities(x), 0.5)


@given(st.integers(0, 500))
def test_label_swap_leaves_the_objective_unchanged(seed):
    design = _design(seed, latent=True)
    x = _point(design, seed)
    y = swap_labels(design.layout, x)
    assert design.objective(y) == pytest.approx(design.objective(x), rel=1e-12)
    np.testing.assert_allclose(design.responsibilities(y), design.responsibilities(x)[:, ::-1],
                               atol=1e-12)


def test_offset_shifts_the_predictor():
    rows = build_panel(2, n_subjects=20).rows
    block = np.random.default_rng(0).normal(size=(rows.n_rows, 2))
    offset = np.linspace(-0.5, 0.5, rows.n_rows)
    plain = HazardDesign.build(rows, [block], [1.0])
    shifted = HazardDesign.build(rows, [block], [1.0], offset=offset)
    x = _point(plain, 3)
    np.testing.assert_allclose(shifted.linear_predictor(x), plain.linear_predictor(x) + offset)


def test_predictor_is_clipped():
    design = _design(4)
    x = np.zeros(design.layout.n_params)
    x[design.layout.bias] = 100.0
    assert np.all(design.linear_predictor(x) == design.eta_clip)
    assert design.diagnostics["eta_clips"] == len(design.event)
    design.nll(x)
    assert design.diagnostics["eta_clips"] == 2 * len(design.event)


def test_initial_point_needs_events():
    rows = build_panel(5, n_subjects=10, hazard=0.0).rows
    design = HazardDesign.build(rows, [np.ones((rows.n_rows, 1))], [1.0])
    with pytest.raises(NoEventsError):
        design.initial_point()


def test_fit_reaches_a_stationary_point():
    design = _design(10)
    fit = fit_hazard(design, opt_cfg=OptimizerConfig(eps_stop=1e-6))
    assert fit.converged
    _, grad = design.objective_and_gradient(fit.x)
    assert np.linalg.norm(grad) < 1e-5
    assert np.all(np.linalg.eigvalsh(design.regularized_hessian(fit.x)) > 0)


def test_fit_rejects_latent_designs():
    with pytest.raises(ValueError, match="em_fit"):
        fit_hazard(_design(11, latent=True))


def _corrected_score_slope(design, x, zeta, direction):
    """Derivative of ∂_θ NLL − M·∂_f NLL along a nuisance direction."""
    K = design.layout.k_count
    M = correction_matrix(split_blocks(design.hessian(x), K), zeta)

    def psi(z):
        g = design.gradient(z)
        return g[:K] - M @ g[K:]

    v = np.concatenate([np.zeros(K), direction])
    h = 1e-5
    return (psi(x + h * v) - psi(x - h * v)) / (2 * h)


def test_corrected_score_is_orthogonal_to_nuisance_directions():
    design = _design(12, lam=0.0)
    x = _point(design, 12)
    K = design.layout.k_count
    v = np.random.default_rng(0).normal(size=design.layout.n_params - K)
    raw = design.hessian(x)[:K, K:] @ v
    slope = _corrected_score_slope(design, x, 0.0, v)
    assert np.linalg.norm(slope) < 1e-3 * np.linalg.norm(raw)
    assert np.linalg.norm(raw) > 10 * np.linalg.norm(slope)


def test_ridge_leaves_a_residual_proportional_to_zeta():
    design = _design(13, lam=0.0)
    x = _point(design, 13)
    K = design.layout.k_count
    v = np.random.default_rng(1).normal(size=design.layout.n_params - K)
    small = np.linalg.norm(_corrected_score_slope(design, x, 1e-3, v))
    double = np.linalg.norm(_corrected_score_slope(design, x, 2e-3, v))
    assert double / small == pytest.approx(2.0, rel=0.2)


@given(st.integers(0, 500), st.floats(0.05, 0.95))
def test_objective_is_convex_in_every_coordinate(seed, w):
    design = _design(seed)
    a, b = _point(design, seed), _point(design, seed + 1)
    mix = design.objective(w * a + (1 - w) * b)
    assert mix <= w * design.objective(a) + (1 - w) * design.objective(b) + 1e-9
    assert np.linalg.eigvalsh(design.hessian(a)).min() >= -1e-8


def _constant_rows(steps_per_subject, seed=0, n_subjects=200):
    """Rows with arm and covariate fixed per subject; events on the last row only."""
    rng = np.random.default_rng(seed)
    arm = rng.integers(0, 3, size=n_subjects)
    c = rng.normal(size=n_subjects)
    hit = rng.uniform(size=n_subjects) < 0.3
    m = steps_per_subject
    subject = np.repeat(np.arange(n_subjects), m)
    A = np.zeros((n_subjects * m, 2))
    treated = np.flatnonzero(arm[subject] > 0)
    A[treated, arm[subject][treated] - 1] = 1.0
    event = np.zeros(n_subjects * m)
    event[np.flatnonzero(hit) * m + m - 1] = 1.0
    rows = SimpleNamespace(A=A, event=event, subject=subject,
                           offsets=np.arange(n_subjects + 1) * m, n_rows=n_subjects * m,
                           n_subjects=n_subjects, baseline=np.zeros((n_subjects, 0)))
    return rows, c[subject][:, None]


def test_halving_the_step_count_moves_only_the_bias():
    fine_rows, fine_block = _constant_rows(8)
    coarse_rows, coarse_block = _constant_rows(4)
    fine = HazardDesign.build(fine_rows, [fine_block], [0.5])
    coarse = HazardDesign.build(coarse_rows, [coarse_block], [0.5])
    x = _point(fine, 3)
    y = x.copy()
    y[coarse.layout.bias] += np.log(2.0)
    assert coarse.objective(y) == pytest.approx(fine.objective(x) - np.log(2.0) * fine.n_events,
                                                rel=1e-12)

    tight = OptimizerConfig(eps_stop=1e-7)
    fit_fine, fit_coarse = fit_hazard(fine, opt_cfg=tight), fit_hazard(coarse, opt_cfg=tight)
    lay = fine.layout
    np.testing.assert_allclose(fit_coarse.x[lay.theta], fit_fine.x[lay.theta], atol=1e-6)
    np.testing.assert_allclose(fit_coarse.x[lay.u_slice(0)], fit_fine.x[lay.u_slice(0)], atol=1e-6)
    assert fit_coarse.x[lay.bias] - fit_fine.x[lay.bias] == pytest.approx(np.log(2.0), abs=1e-6)
