"""Gram matrices, incomplete Cholesky bases and function transfer.

A fitted kernel block is stored in low-rank coordinates u with f = L·u, where
G ≈ L·Lᵀ.  The factor is always rebuilt from its pivot anchors, so a basis
computed on one set of rows can be evaluated on any other rows.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from config import config
from constants import (
    ELAPSED_TIME, GRID_LINEAR_LAMBDA, KERNEL_GAUSSIAN, KERNEL_LINEAR,
    gauss_lambda_key, gauss_sigma_key,
)
from services.errors import DegenerateBasisError, KernelSpecError
from utils import log_grid

logger = logging.getLogger(__name__)

MAX_GAUSSIAN_DIM = 3


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    covariate_indices: tuple[int, ...]
    bandwidth: float = 1.0
    reg_lambda: float = 1.0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (KERNEL_LINEAR, KERNEL_GAUSSIAN):
            raise KernelSpecError(f"unknown kernel kind '{self.kind}'")
        if not self.covariate_indices:
            raise KernelSpecError("kernel needs at least one covariate")
        if self.kind == KERNEL_GAUSSIAN:
            if len(self.covariate_indices) > MAX_GAUSSIAN_DIM:
                raise KernelSpecError(
                    f"gaussian kernels take 1-{MAX_GAUSSIAN_DIM} covariates, "
                    f"got {len(self.covariate_indices)}"
                )
            if not self.bandwidth > 0:
                raise KernelSpecError(f"gaussian bandwidth must be > 0, got {self.bandwidth}")
        if self.reg_lambda < 0:
            raise KernelSpecError(f"reg_lambda must be >= 0, got {self.reg_lambda}")

    @property
    def dim(self) -> int:
        return len(self.covariate_indices)

    @property
    def lambda_key(self) -> str:
        return GRID_LINEAR_LAMBDA if self.kind == KERNEL_LINEAR else gauss_lambda_key(self.dim)

    @property
    def sigma_key(self) -> str | None:
        return gauss_sigma_key(self.dim) if self.kind == KERNEL_GAUSSIAN else None

    @property
    def label(self) -> str:
        cols = ",".join(self.names) if self.names else ",".join(map(str, self.covariate_indices))
        return f"{self.kind}:{cols}"

    def select(self, rows: np.ndarray) -> np.ndarray:
        """Columns of the kernel-input matrix this kernel looks at."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if max(self.covariate_indices) >= rows.shape[1] or min(self.covariate_indices) < 0:
            raise KernelSpecError(
                f"{self.label}: covariate index out of range for {rows.shape[1]} input columns"
            )
        return rows[:, list(self.covariate_indices)]


def _kernel(spec: KernelSpec, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    if spec.kind == KERNEL_LINEAR:
        return xa @ xb.T
    return np.exp(-cdist(xa, xb, "sqeuclidean") / (2.0 * spec.bandwidth ** 2))


def _kernel_diag(spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    if spec.kind == KERNEL_LINEAR:
        return np.einsum("ij,ij->i", x, x)
    return np.ones(len(x))


def gram(spec: KernelSpec, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    """Dense kernel matrix between two sets of kernel-input rows."""
    return _kernel(spec, spec.select(rows_a), spec.select(rows_b))


# ── Low-rank bases ───────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class LowRankBasis:
    """Pivoted incomplete Cholesky factor G ≈ L·Lᵀ.

    ``anchors`` are the selected kernel inputs of the pivot rows (pivot order)
    and ``pivot_block`` is L restricted to those rows, which is lower
    triangular.  ``L`` holds the factor on the rows it was computed from.
    """
    spec: KernelSpec
    anchors: np.ndarray
    pivot_block: np.ndarray
    pivots: np.ndarray
    L: np.ndarray
    pinv_tol: float = 1e-10

    @property
    def rank(self) -> int:
        return self.pivot_block.shape[0]

    @property
    def n_rows(self) -> int:
        return self.L.shape[0]

    def extend(self, rows: np.ndarray) -> np.ndarray:
        """Factor rows for arbitrary inputs: G(rows, anchors)·L_P^{-T}."""
        x = self.spec.select(rows)
        if self.rank == 0:
            return np.zeros((len(x), 0))
        cross = _kernel(self.spec, x, self.anchors)
        return linalg.solve_triangular(self.pivot_block, cross.T, lower=True).T

    def with_rows(self, rows: np.ndarray) -> "LowRankBasis":
        """Same anchors, factor evaluated on *rows*."""
        return replace(self, L=self.extend(rows), pivots=np.zeros(0, dtype=int))


def incomplete_cholesky(spec: KernelSpec, rows: np.ndarray, tol: float | None = None,
                        max_rank: int | None = None) -> LowRankBasis:
    """Greedy max-residual-diagonal pivoting until trace residual ≤ tol·N."""
    tol = config.ICHOL_TOL if tol is None else tol
    if tol <= 0:
        raise ValueError(f"incomplete Cholesky tolerance must be > 0, got {tol}")
    x = spec.select(rows)
    N = len(x)
    max_rank = N if max_rank is None else min(max_rank, N)
    residual = _kernel_diag(spec, x).astype(float)
    L = np.zeros((N, min(max_rank, 64)))
    pivots: list[int] = []
    while len(pivots) < max_rank and residual.sum() > tol * N:
        j = int(np.argmax(residual))
        if residual[j] <= 0:
            break
        r = len(pivots)
        if r == L.shape[1]:
            L = np.hstack([L, np.zeros((N, L.shape[1]))])
        col = _kernel(spec, x, x[j:j + 1])[:, 0] - L[:, :r] @ L[j, :r]
        col /= np.sqrt(residual[j])
        col[pivots] = 0.0
        L[:, r] = col
        pivots.append(j)
        residual -= col ** 2
        residual[pivots] = 0.0
        np.maximum(residual, 0.0, out=residual)
    r = len(pivots)
    L = L[:, :r]
    piv = np.array(pivots, dtype=int)
    logger.debug(f"{spec.label}: rank {r} of {N} (residual trace {residual.sum():.3g})")
    return LowRankBasis(
        spec=spec, anchors=x[piv].copy(), pivot_block=L[piv].copy(),
        pivots=piv, L=L, pinv_tol=config.PINV_TOL,
    )


def combined_basis(spec: KernelSpec, rows_parts, tol: float | None = None) -> tuple[LowRankBasis, list[slice]]:
    """Factor of the concatenated row sets; returns the basis and one slice per part."""
    parts = [np.atleast_2d(p) for p in rows_parts]
    slices, start = [], 0
    for p in parts:
        slices.append(slice(start, start + len(p)))
        start += len(p)
    return incomplete_cholesky(spec, np.vstack(parts), tol), slices


# ── Transfer ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Transfer:
    alpha: np.ndarray        # dual coefficients on the training pivot anchors
    values: np.ndarray       # f(rows_new) without bias
    u_bar: np.ndarray | None = None
    basis_bar: LowRankBasis | None = None


def pivot_coefficients(basis: LowRankBasis, u_hat: np.ndarray) -> np.ndarray:
    """Dual coefficients α with Lᵀα = û, supported on the pivot anchors.

    Solved through a column-pivoted QR of the pivot block; directions whose
    |R_jj| falls below pinv_tol relative to the largest are dropped.
    """
    u_hat = np.asarray(u_hat, dtype=float)
    if len(u_hat) != basis.rank:
        raise ValueError(f"u_hat has length {len(u_hat)}, basis rank is {basis.rank}")
    if basis.rank == 0:
        return np.zeros(0)
    # L_Pᵀ α = û  with  L_Pᵀ = Q R Πᵀ
    Q, R, perm = linalg.qr(basis.pivot_block.T, pivoting=True)
    diag = np.abs(np.diag(R))
    keep = int(np.sum(diag > basis.pinv_tol * diag[0])) if diag[0] > 0 else 0
    if keep == 0:
        raise DegenerateBasisError(f"{basis.spec.label}: pseudoinverse rank collapsed to 0")
    if keep < basis.rank:
        logger.warning(f"{basis.spec.label}: pseudoinverse truncated to rank {keep}/{basis.rank}")
    y = Q.T @ u_hat
    z = np.zeros(basis.rank)
    z[:keep] = linalg.solve_triangular(R[:keep, :keep], y[:keep])
    alpha = np.zeros(basis.rank)
    alpha[perm] = z
    return alpha


def transfer_coefficients(basis_train: LowRankBasis, u_hat: np.ndarray, rows_new: np.ndarray,
                          rows_train: np.ndarray | None = None,
                          tol: float | None = None) -> Transfer:
    """Carry a fitted block to new rows.

    Values are G(new, train)·α̂.  When *rows_train* is given, a combined factor
    L̄ is built over [train; new] rows and ū = L̄[train]ᵀ·α̂ is returned too.
    """
    alpha = pivot_coefficients(basis_train, u_hat)
    values = basis_train.extend(rows_new) @ np.asarray(u_hat, dtype=float)
    if rows_train is None:
        return Transfer(alpha=alpha, values=values)
    basis_bar, slices = combined_basis(basis_train.spec, [rows_train, rows_new], tol)
    u_bar = anchor_projection(basis_bar, slices[0], basis_train, alpha)
    return Transfer(alpha=alpha, values=values, u_bar=u_bar, basis_bar=basis_bar)


def anchor_projection(basis_bar: LowRankBasis, train_slice: slice, basis_train: LowRankBasis,
                      alpha: np.ndarray) -> np.ndarray:
    """ū = L̄[train]ᵀ·α̂ where α̂ lives on the training pivots."""
    if basis_train.rank == 0:
        return np.zeros(basis_bar.rank)
    rows = train_slice.start + basis_train.pivots
    return basis_bar.L[rows].T @ alpha


# ── Composite model ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class MultiKernelModel:
    """f(x) = Σ_k f_k(x) + b, one kernel block per spec."""
    kernels: tuple[KernelSpec, ...]
    include_elapsed_time_kernel: bool = False
    latent_block: bool = False
    hyper_grid: dict = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        if not self.kernels:
            raise KernelSpecError("a model needs at least one kernel")
        for key, values in self.hyper_grid.items():
            if not values or min(values) <= 0:
                raise KernelSpecError(f"grid '{key}' must hold positive values")

    @property
    def tunable_keys(self) -> list[str]:
        keys = []
        for k in self.kernels:
            for key in (k.lambda_key, k.sigma_key):
                if key and key not in keys:
                    keys.append(key)
        return sorted(keys)

    def hyperparams(self) -> dict[str, float]:
        hp = {}
        for k in self.kernels:
            hp.setdefault(k.lambda_key, k.reg_lambda)
            if k.sigma_key:
                hp.setdefault(k.sigma_key, k.bandwidth)
        return hp

    def with_hyperparams(self, hp: dict) -> "MultiKernelModel":
        kernels = []
        for k in self.kernels:
            lam = hp.get(k.lambda_key, k.reg_lambda)
            sigma = hp.get(k.sigma_key, k.bandwidth) if k.sigma_key else k.bandwidth
            kernels.append(replace(k, reg_lambda=float(lam), bandwidth=float(sigma)))
        return replace(self, kernels=tuple(kernels))

    def with_elapsed_time(self, time_index: int) -> "MultiKernelModel":
        """Add a 1D gaussian on elapsed time sharing the 1D hyperparameters."""
        if self.include_elapsed_time_kernel:
            raise KernelSpecError(f"model '{self.name}' already includes elapsed time")
        hp = self.hyperparams()
        spec = KernelSpec(
            kind=KERNEL_GAUSSIAN, covariate_indices=(time_index,),
            bandwidth=hp.get(gauss_sigma_key(1), 1.0),
            reg_lambda=hp.get(gauss_lambda_key(1), 1.0),
            names=(ELAPSED_TIME,),
        )
        grid = dict(self.hyper_grid)
        for key, default in ((gauss_lambda_key(1), DEFAULT_LAMBDA_GRID),
                             (gauss_sigma_key(1), DEFAULT_SIGMA_GRID)):
            if key not in grid and any(k.lambda_key in grid for k in self.kernels):
                grid[key] = default
        return replace(self, kernels=self.kernels + (spec,), include_elapsed_time_kernel=True,
                       hyper_grid=grid, name=f"{self.name}+time")

    def grid_points(self) -> list[dict[str, float]]:
        """Cartesian product of the grid over keys this model uses."""
        base = self.hyperparams()
        keys = [k for k in self.tunable_keys if k in self.hyper_grid]
        if not keys:
            return [base]
        points = []
        for combo in itertools.product(*(self.hyper_grid[k] for k in keys)):
            hp = dict(base)
            hp.update(zip(keys, (float(v) for v in combo)))
            points.append(hp)
        return points

    def build_bases(self, rows: np.ndarray, tol: float | None = None) -> tuple[LowRankBasis, ...]:
        return tuple(incomplete_cholesky(k, rows, tol) for k in self.kernels)


DEFAULT_LAMBDA_GRID: tuple[float, ...] = tuple(log_grid(1.0, 30.0))
DEFAULT_SIGMA_GRID: tuple[float, ...] = tuple(log_grid(0.3, 3.0))


def default_grid(kernels) -> dict[str, tuple[float, ...]]:
    """λ/σ grids for every gaussian dimension; linear λ stays fixed (flat prior)."""
    grid = {}
    for k in kernels:
        if k.kind == KERNEL_GAUSSIAN:
            grid[k.lambda_key] = DEFAULT_LAMBDA_GRID
            grid[k.sigma_key] = DEFAULT_SIGMA_GRID
    return grid


def parse_kernels(text: str, names: tuple[str, ...]) -> tuple[KernelSpec, ...]:
    """Parse 'linear:age;gaussian:date;gaussian:x1,x2' against kernel-input names.

    *names* lists the kernel-input columns in order (covariates, then elapsed time).
    """
    specs = []
    for part in (p.strip() for p in text.split(";")):
        if not part:
            continue
        if ":" not in part:
            raise KernelSpecError(f"kernel '{part}' must look like kind:cov[,cov]")
        kind, cols = part.split(":", 1)
        cols = tuple(c.strip() for c in cols.split(",") if c.strip())
        try:
            idx = tuple(names.index(c) for c in cols)
        except ValueError:
            raise KernelSpecError(f"kernel '{part}' names an unknown covariate; have {list(names)}")
        specs.append(KernelSpec(kind=kind.strip().lower(), covariate_indices=idx,
                                reg_lambda=0.0 if kind.strip().lower() == KERNEL_LINEAR else 1.0,
                                names=cols))
    return tuple(specs)


def build_model(text: str, names: tuple[str, ...], name: str = "model", latent: bool = False,
                hyperparams: dict | None = None, grid: dict | None = None) -> MultiKernelModel:
    kernels = parse_kernels(text, names)
    model = MultiKernelModel(
        kernels=kernels,
        include_elapsed_time_kernel=any(ELAPSED_TIME in k.names for k in kernels),
        latent_block=latent,
        hyper_grid=default_grid(kernels) if grid is None else grid,
        name=name,
    )
    return model.with_hyperparams(hyperparams) if hyperparams else model
