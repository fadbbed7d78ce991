import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from conftest import KERNEL_INPUTS
from services.errors import KernelSpecError
from services.kernel_engine import (
    KernelSpec, build_model, gram, incomplete_cholesky, parse_kernels, pivot_coefficients,
    transfer_coefficients,
)


def test_gaussian_of_identical_rows_is_one():
    spec = KernelSpec("gaussian", (0,), bandwidth=1.0)
    assert gram(spec, [[0.3]], [[0.3]])[0, 0] == pytest.approx(1.0)


def test_linear_kernel_is_a_product():
    spec = KernelSpec("linear", (0,), reg_lambda=0.0)
    assert gram(spec, [[2.0]], [[3.0]])[0, 0] == pytest.approx(6.0)


def test_gaussian_one_bandwidth_apart():
    spec = KernelSpec("gaussian", (0,), bandwidth=0.7)
    assert gram(spec, [[0.0]], [[0.7]])[0, 0] == pytest.approx(np.exp(-0.5))


@pytest.mark.parametrize("kw", [
    {"kind": "gaussian", "covariate_indices": (0,), "bandwidth": 0.0},
    {"kind": "gaussian", "covariate_indices": (0, 1, 2, 3)},
    {"kind": "cubic", "covariate_indices": (0,)},
    {"kind": "linear", "covariate_indices": (0,), "reg_lambda": -1.0},
])
def test_invalid_specs(kw):
    with pytest.raises(KernelSpecError):
        KernelSpec(**kw)


def test_index_out_of_range():
    spec = KernelSpec("gaussian", (4,))
    with pytest.raises(KernelSpecError, match="out of range"):
        gram(spec, np.zeros((2, 2)), np.zeros((2, 2)))


@given(st.integers(0, 10_000), st.integers(2, 60), st.sampled_from([1, 2, 3]))
def test_gram_is_psd(seed, n, dim):
    rows = np.random.default_rng(seed).normal(size=(n, dim))
    G = gram(KernelSpec("gaussian", tuple(range(dim)), bandwidth=0.8), rows, rows)
    np.testing.assert_allclose(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_identical_rows_give_rank_one():
    basis = incomplete_cholesky(KernelSpec("gaussian", (0,)), np.ones((20, 1)))
    assert basis.rank == 1


@given(st.integers(0, 10_000))
def test_residual_trace_bound(seed):
    rows = np.random.default_rng(seed).normal(size=(50, 1))
    spec = KernelSpec("gaussian", (0,), bandwidth=0.5)
    basis = incomplete_cholesky(spec, rows, tol=0.001)
    G = gram(spec, rows, rows)
    residual = G - basis.L @ basis.L.T
    assert np.trace(residual) <= 0.001 * len(rows) + 1e-8
    assert np.linalg.eigvalsh(residual).min() >= -1e-8


def test_residual_trace_is_monotone_in_rank():
    rows = np.random.default_rng(3).normal(size=(40, 2))
    spec = KernelSpec("gaussian", (0, 1), bandwidth=0.6)
    G = gram(spec, rows, rows)
    traces = [np.trace(G - b.L @ b.L.T)
              for b in (incomplete_cholesky(spec, rows, tol=1e-12, max_rank=r) for r in range(1, 15))]
    assert all(b <= a + 1e-12 for a, b in zip(traces, traces[1:]))


def test_extend_reproduces_factor_on_training_rows():
    rows = np.random.default_rng(4).normal(size=(60, 1))
    basis = incomplete_cholesky(KernelSpec("gaussian", (0,), bandwidth=0.7), rows)
    np.testing.assert_allclose(basis.extend(rows), basis.L, atol=1e-7)


def test_transfer_identity_on_training_rows():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(60, 1))
    basis = incomplete_cholesky(KernelSpec("gaussian", (0,), bandwidth=0.7), rows)
    u = rng.normal(size=basis.rank)
    out = transfer_coefficients(basis, u, rows)
    np.testing.assert_allclose(out.values, basis.L @ u, atol=1e-8)


def test_zero_coefficients_transfer_to_zero():
    rows = np.random.default_rng(6).normal(size=(30, 1))
    basis = incomplete_cholesky(KernelSpec("gaussian", (0,)), rows)
    out = transfer_coefficients(basis, np.zeros(basis.rank), rows[:5] + 0.1)
    np.testing.assert_array_equal(out.values, 0.0)


def test_transfer_matches_dense_kernel_sum():
    rng = np.random.default_rng(7)
    rows = rng.normal(size=(40, 1))
    spec = KernelSpec("gaussian", (0,), bandwidth=0.9)
    basis = incomplete_cholesky(spec, rows)
    u = rng.normal(size=basis.rank)
    new = np.array([[0.37]])
    alpha = pivot_coefficients(basis, u)
    direct = np.sum(alpha * np.exp(-cdist(new, basis.anchors, "sqeuclidean")[0] / (2 * 0.9 ** 2)))
    assert transfer_coefficients(basis, u, new).values[0] == pytest.approx(direct, rel=1e-6, abs=1e-6)


def test_combined_coordinates_reproduce_training_values():
    rng = np.random.default_rng(8)
    train, new = rng.normal(size=(50, 1)), rng.normal(size=(20, 1))
    basis = incomplete_cholesky(KernelSpec("gaussian", (0,), bandwidth=0.8), train)
    u = rng.normal(size=basis.rank)
    out = transfer_coefficients(basis, u, new, rows_train=train, tol=1e-10)
    np.testing.assert_allclose(out.basis_bar.L[50:] @ out.u_bar, out.values, rtol=1e-4, atol=1e-4)


def test_parse_kernels_against_names():
    specs = parse_kernels("linear:c1;gaussian:c2,elapsed_time", KERNEL_INPUTS)
    assert [s.kind for s in specs] == ["linear", "gaussian"]
    assert specs[1].covariate_indices == (1, 2)
    assert specs[0].reg_lambda == 0.0
    with pytest.raises(KernelSpecError, match="unknown covariate"):
        parse_kernels("gaussian:nope", KERNEL_INPUTS)


def test_shared_hyperparameters_by_dimension():
    model = build_model("gaussian:c1;gaussian:c2", KERNEL_INPUTS,
                        hyperparams={"gauss1_lambda": 3.0, "gauss1_sigma": 0.5})
    assert all(k.reg_lambda == 3.0 and k.bandwidth == 0.5 for k in model.kernels)


def test_elapsed_time_kernel_is_appended_once():
    model = build_model("linear:c1;gaussian:c2", KERNEL_INPUTS)
    timed = model.with_elapsed_time(2)
    assert timed.include_elapsed_time_kernel
    assert timed.kernels[-1].names == ("elapsed_time",)
    with pytest.raises(KernelSpecError):
        timed.with_elapsed_time(2)


def test_grid_points_cover_the_product():
    model = build_model("gaussian:c1", KERNEL_INPUTS,
                        grid={"gauss1_lambda": (1.0, 2.0), "gauss1_sigma": (0.5, 1.0, 2.0)})
    assert len(model.grid_points()) == 6
