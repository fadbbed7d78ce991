"""Cross-fitting plan and nuisance estimation (Hessian blocks or g_k).

For fold m the outcome model is fitted on train = D minus folds m and m+1,
fold m+1 is the validation split used for tuning and fold m is where the
scores are later evaluated.  All Hessian blocks of a fold share one set of
coordinates: the combined factor L̄ over [train; val; holdout] rows.  The
fitted f̂ enters every split design as an exact offset, so derivatives are
taken at the fitted function and only their directions use L̄.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import expit

from config import config
from constants import (
    ELAPSED_TIME, KERNEL_GAUSSIAN, ROUTE_HESSIAN, ROUTE_LATENT, gauss_lambda_key, gauss_sigma_key,
)
from services.em_latent import EMConfig, multi_start_em
from services.errors import (
    FoldPlanError, GridSearchError, HazardError, NotPositiveDefiniteError, PositivityError,
    SingularSystemError,
)
from services.hazard_likelihood import FitState, HazardDesign, HessianBlocks, fit_hazard, split_blocks
from services.kernel_engine import (
    KernelSpec, LowRankBasis, MultiKernelModel, anchor_projection, combined_basis,
    incomplete_cholesky, pivot_coefficients,
)
from services.model_evidence import laplace_log_evidence
from services.optimizer import minimize
from services.panel_data import PanelDataset, subset

logger = logging.getLogger(__name__)


# ── Fold plan ────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FoldPlan:
    M: int
    assignments: np.ndarray    # (n,) fold index 0..M-1 per subject position
    seed: int = 0

    def fold(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == m % self.M)

    def holdout(self, m: int) -> np.ndarray:
        return self.fold(m)

    def val(self, m: int) -> np.ndarray:
        return self.fold((m + 1) % self.M)

    def train(self, m: int) -> np.ndarray:
        drop = (self.assignments == m % self.M) | (self.assignments == (m + 1) % self.M)
        return np.flatnonzero(~drop)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.M)


def make_folds(ds: PanelDataset | int, M: int | None = None, seed: int = 0) -> FoldPlan:
    """Seeded random partition into M folds whose sizes differ by at most one."""
    n = ds if isinstance(ds, (int, np.integer)) else ds.n_subjects
    M = config.FOLDS if M is None else M
    if M < 3:
        raise FoldPlanError(f"need M >= 3 folds for disjoint train/val/holdout, got {M}")
    if M > n:
        raise FoldPlanError(f"M={M} folds exceed the {n} subjects")
    perm = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=int)
    assignments[perm] = np.arange(n) % M
    return FoldPlan(M=M, assignments=assignments, seed=seed)


# ── Fold data ────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FoldPart:
    """One split of a fold, in the fold's shared coordinates."""
    indices: np.ndarray      # subject positions in the full dataset
    data: PanelDataset
    design: HazardDesign     # Φ̄ directions with offset f̂
    f_values: np.ndarray     # f̂ on these rows, bias included

    @property
    def n_subjects(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class GModel:
    """Fitted log density ratio g_k(x) for arm k."""
    arm: int
    zeta: float
    bases: tuple[LowRankBasis, ...]
    x: np.ndarray
    log_bme: float
    trivial: bool

    def values(self, Z: np.ndarray) -> np.ndarray:
        out = np.full(len(Z), self.x[-1])
        start = 0
        for b in self.bases:
            out += b.extend(Z) @ self.x[start:start + b.rank]
            start += b.rank
        return out


@dataclass(frozen=True, eq=False)
class NuisanceFold:
    fold_index: int
    route: str
    model: MultiKernelModel
    x_hat: np.ndarray                 # train fit in training-basis coordinates
    state: FitState
    bases: tuple[LowRankBasis, ...]
    u_bar: tuple[np.ndarray, ...]     # û carried into the combined coordinates
    point: np.ndarray                 # evaluation point of the split designs
    train: FoldPart
    val: FoldPart
    holdout: FoldPart
    hessian_train: HessianBlocks | None = None
    hessian_val: HessianBlocks | None = None
    zeta: float | None = None
    g_hats: dict = field(default_factory=dict)
    em_trace: tuple[float, ...] = ()

    @property
    def theta_hat(self) -> np.ndarray:
        return self.state.theta


def _f_values(bases, x, layout, Z) -> np.ndarray:
    f = np.full(len(Z), x[layout.bias])
    for k, b in enumerate(bases):
        f += b.extend(Z) @ x[layout.u_slice(k)]
    return f


def fit_fold_ml(ds: PanelDataset, plan: FoldPlan, m: int, model: MultiKernelModel,
                hyperparams: dict | None = None, route: str = ROUTE_HESSIAN,
                em_cfg: EMConfig | None = None, opt_cfg=None) -> NuisanceFold:
    """ML fit on the training split of fold m plus its shared coordinates."""
    model = model.with_hyperparams(hyperparams or {})
    idx = {"train": plan.train(m), "val": plan.val(m), "holdout": plan.holdout(m)}
    data = {name: subset(ds, i) for name, i in idx.items()}
    train = data["train"]
    bases = model.build_bases(train.rows.Z)
    lambdas = [k.reg_lambda for k in model.kernels]
    design = HazardDesign.build(train.rows, [b.L for b in bases], lambdas,
                                latent=model.latent_block)
    trace: tuple[float, ...] = ()
    if model.latent_block:
        em = multi_start_em(design, em_cfg or EMConfig(), opt_cfg)
        x_hat, trace = em.x, em.trace
        state = design.layout.unpack(x_hat, responsibilities=em.responsibilities)
    else:
        fit = fit_hazard(design, opt_cfg=opt_cfg)
        x_hat, state = fit.x, fit.state
    lay = design.layout

    # Combined coordinates over [train; val; holdout] rows.
    parts_Z = [data[name].rows.Z for name in ("train", "val", "holdout")]
    bars, u_bar = [], []
    for k, b in enumerate(bases):
        bar, slices = combined_basis(b.spec, parts_Z)
        alpha = pivot_coefficients(b, x_hat[lay.u_slice(k)])
        u_bar.append(anchor_projection(bar, slices[0], b, alpha))
        bars.append(bar)
    bounds = np.cumsum([0] + [len(z) for z in parts_Z])

    parts = {}
    for j, name in enumerate(("train", "val", "holdout")):
        rows = data[name].rows
        sl = slice(bounds[j], bounds[j + 1])
        f = _f_values(bases, x_hat, lay, rows.Z)
        part_design = HazardDesign.build(rows, [bar.L[sl] for bar in bars],
                                         [0.0] * len(bars), latent=model.latent_block,
                                         offset=f)
        parts[name] = FoldPart(indices=idx[name], data=data[name], design=part_design, f_values=f)

    bar_layout = parts["train"].design.layout
    point = np.zeros(bar_layout.n_params)
    point[bar_layout.theta] = state.theta
    if model.latent_block:
        point[bar_layout.kappa] = state.kappa
        point[bar_layout.beta] = state.beta

    fold = NuisanceFold(
        fold_index=m, route=route, model=model, x_hat=x_hat, state=state, bases=bases,
        u_bar=tuple(u_bar), point=point, train=parts["train"], val=parts["val"],
        holdout=parts["holdout"], em_trace=trace,
    )
    if route in (ROUTE_HESSIAN, ROUTE_LATENT):
        fold = replace(fold, hessian_train=split_hessian(fold, "train"),
                       hessian_val=split_hessian(fold, "val"))
    logger.info(f"fold {m}: trained on {len(idx['train'])} subjects, θ̂={np.round(state.theta, 4)}")
    return fold


def split_hessian(fold: NuisanceFold, part: str) -> HessianBlocks:
    """Per-subject average likelihood Hessian of one split, in L̄ coordinates."""
    p: FoldPart = getattr(fold, part)
    H = p.design.hessian(fold.point) / p.n_subjects
    return split_blocks(H, p.design.layout.k_count)


def fit_folds(ds: PanelDataset, plan: FoldPlan, model: MultiKernelModel, hyperparams=None,
              route: str = ROUTE_HESSIAN, em_cfg: EMConfig | None = None,
              n_jobs: int | None = None) -> list[NuisanceFold]:
    return Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
        delayed(fit_fold_ml)(ds, plan, m, model, hyperparams, route, em_cfg)
        for m in range(plan.M)
    )


# ── Hessian route: ζ_n tuning ────────────────────────────────────────────────

def correction_matrix(blocks: HessianBlocks, zeta: float) -> np.ndarray:
    """H_θf (H_ff + ζ)^{-1}."""
    P = blocks.H_ff.shape[0]
    try:
        c = linalg.cho_factor(blocks.H_ff + zeta * np.eye(P))
    except linalg.LinAlgError:
        raise SingularSystemError(f"H_ff + ζ is singular at ζ={zeta:g}")
    return linalg.cho_solve(c, blocks.H_tf.T).T


def cv_error_hessian(folds, zeta: float) -> float:
    total = 0.0
    for fold in folds:
        tr, va = fold.hessian_train, fold.hessian_val
        pred = correction_matrix(tr, zeta) @ va.H_ff
        total += float(np.sum((va.H_tf - pred) ** 2))
    return total


def tune_zeta_H(folds, zeta_grid) -> tuple[float, pd.DataFrame]:
    """argmin over the grid of Σ_m ‖H_θf^val − H_θf^tr (H_ff^tr+ζ)^{-1} H_ff^val‖²."""
    records = []
    for zeta in sorted(float(z) for z in zeta_grid):
        try:
            err = cv_error_hessian(folds, zeta)
        except SingularSystemError as e:
            logger.warning(f"ζ={zeta:g} skipped: {e}")
            err = np.nan
        records.append({"zeta": zeta, "cv_error": err})
    table = pd.DataFrame.from_records(records)
    valid = table.dropna()
    if valid.empty:
        raise GridSearchError("every ζ_n grid point was singular")
    best = float(valid.loc[valid["cv_error"].idxmin(), "zeta"])
    logger.info(f"CVErr_H selects ζ_n={best:g}")
    return best, table


def zeta_schedule(n: int, c: float, alpha: float) -> float:
    """ζ_n = c·n^{-α}."""
    return float(c * n ** (-alpha))


# ── Logistic route: g_k ──────────────────────────────────────────────────────

def clip_g(g: np.ndarray, limit: float | None = None) -> tuple[np.ndarray, int]:
    limit = config.G_CLIP if limit is None else limit
    over = int(np.sum(np.abs(g) > limit))
    return np.clip(g, -limit, limit), over


def g_kernels(model: MultiKernelModel, include_2d: bool = False) -> MultiKernelModel:
    """Kernels for g_k: 1D gaussians on the outcome covariates, without elapsed time.

    Linear components become one 1D gaussian per covariate, at the bandwidth of the
    model's 1D gaussians.  2D+ gaussians are dropped unless *include_2d*.
    """
    kernels = [k for k in model.kernels if ELAPSED_TIME not in k.names]
    hp = model.hyperparams()
    sigma, lam = hp.get(gauss_sigma_key(1), 1.0), hp.get(gauss_lambda_key(1), 1.0)
    out: list[KernelSpec] = []
    for k in kernels:
        if k.kind == KERNEL_GAUSSIAN:
            if include_2d or k.dim == 1:
                out.append(k)
            continue
        out.extend(KernelSpec(kind=KERNEL_GAUSSIAN, covariate_indices=(idx,), bandwidth=sigma,
                              reg_lambda=lam, names=(name,))
                   for idx, name in zip(k.covariate_indices, k.names))
    seen, unique = set(), []
    for k in out:
        if k.covariate_indices not in seen:
            seen.add(k.covariate_indices)
            unique.append(k)
    return replace(model, kernels=tuple(unique), include_elapsed_time_kernel=False,
                   latent_block=False, name=f"{model.name}:g")


@dataclass(frozen=True, eq=False)
class LogisticDesign:
    """Rows treated with arm k (y=1) or untreated (y=0); other arms drop out."""
    Phi: np.ndarray
    y: np.ndarray
    penalty: np.ndarray
    dims: tuple[int, ...]

    @classmethod
    def build(cls, rows, arm: int, blocks, zeta: float) -> "LogisticDesign":
        treated = rows.A[:, arm] == 1
        untreated = rows.A.sum(axis=1) == 0
        keep = treated | untreated
        if not treated.any() or not untreated.any():
            which = "treated" if not treated.any() else "untreated"
            raise PositivityError(f"arm {arm + 1}: no {which} person-time in the training split")
        Phi = np.column_stack([b[keep] for b in blocks] + [np.ones(int(keep.sum()))])
        dims = tuple(b.shape[1] for b in blocks)
        penalty = np.concatenate([np.full(sum(dims), zeta), [0.0]])
        return cls(Phi=Phi, y=treated[keep].astype(float), penalty=penalty, dims=dims)

    def objective(self, x: np.ndarray) -> float:
        g = self.Phi @ x
        return float(np.sum(np.logaddexp(0.0, g) - self.y * g) + 0.5 * np.sum(self.penalty * x * x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.Phi.T @ (expit(self.Phi @ x) - self.y) + self.penalty * x

    def hessian(self, x: np.ndarray) -> np.ndarray:
        p = expit(self.Phi @ x)
        return self.Phi.T @ (self.Phi * (p * (1.0 - p))[:, None]) + np.diag(self.penalty)

    def initial_point(self) -> np.ndarray:
        x = np.zeros(self.Phi.shape[1])
        share = self.y.mean()
        x[-1] = np.log(share / (1.0 - share))
        return x


def fit_g_k(ds_train: PanelDataset, model_g: MultiKernelModel, k: int, zeta_nk: float,
            opt_cfg=None) -> GModel:
    """Penalized logistic fit of arm-k versus untreated person-time."""
    if not zeta_nk > 0:
        raise ValueError(f"ζ for g_k must be > 0, got {zeta_nk}")
    rows = ds_train.rows
    bases = tuple(incomplete_cholesky(spec, rows.Z) for spec in model_g.kernels)
    design = LogisticDesign.build(rows, k, [b.L for b in bases], zeta_nk)
    result = minimize(lambda x: (design.objective(x), design.gradient(x)),
                      design.initial_point(), opt_cfg)
    try:
        log_bme, _ = laplace_log_evidence(design.objective(result.x), design.hessian(result.x),
                                          [zeta_nk] * len(bases), design.dims)
    except NotPositiveDefiniteError:
        log_bme = -np.inf
    trivial = bool(log_bme <= -len(design.y) * np.log(2.0))
    if trivial:
        logger.warning(f"g_{k + 1} at ζ={zeta_nk:g} does not beat the P=1/2 model in evidence")
    return GModel(arm=k, zeta=zeta_nk, bases=bases, x=result.x, log_bme=log_bme, trivial=trivial)


def g_bracket(rows, g: np.ndarray, k: int) -> float:
    """Σ_t [A_k(e^{-g} − 1) + (1 − ΣA)(e^{g} − 1)] over the rows."""
    untreated = 1.0 - rows.A.sum(axis=1)
    return float(np.sum(rows.A[:, k] * np.expm1(-g) + untreated * np.expm1(g)))


def tune_zeta_g(ds: PanelDataset, plan: FoldPlan, model_g: MultiKernelModel, k: int,
                zeta_grid, n_jobs: int | None = None) -> tuple[float, float, pd.DataFrame]:
    """(ζ by CVErr_g, ζ by logistic evidence on all of D, tuning table)."""

    def one(zeta):
        cv = 0.0
        for m in range(plan.M):
            g_hat = fit_g_k(subset(ds, plan.train(m)), model_g, k, zeta)
            val = subset(ds, plan.val(m)).rows
            g, _ = clip_g(g_hat.values(val.Z))
            cv += g_bracket(val, g, k) ** 2
        full = fit_g_k(ds, model_g, k, zeta)
        return {"zeta": zeta, "cv_error": cv, "log_bme": full.log_bme, "trivial": full.trivial}

    grid = sorted(float(z) for z in zeta_grid)
    records = []
    for zeta, rec in zip(grid, Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
            delayed(_safe)(one, z) for z in grid)):
        records.append(rec or {"zeta": zeta, "cv_error": np.nan, "log_bme": np.nan, "trivial": True})
    table = pd.DataFrame.from_records(records)
    cv_ok, bme_ok = table.dropna(subset=["cv_error"]), table.dropna(subset=["log_bme"])
    if cv_ok.empty or bme_ok.empty:
        raise GridSearchError(f"every ζ grid point failed for g_{k + 1}")
    zeta_cv = float(cv_ok.loc[cv_ok["cv_error"].idxmin(), "zeta"])
    zeta_bme = float(bme_ok.loc[bme_ok["log_bme"].idxmax(), "zeta"])
    if zeta_cv != zeta_bme:
        logger.info(f"g_{k + 1}: CVErr_g picks ζ={zeta_cv:g}, evidence picks ζ={zeta_bme:g}")
    return zeta_cv, zeta_bme, table


def _safe(fn, *args):
    try:
        return fn(*args)
    except (HazardError, np.linalg.LinAlgError) as e:
        logger.warning(f"tuning point {args} failed: {e}")
        return None


def attach_g_models(ds: PanelDataset, folds, model_g: MultiKernelModel, zetas: dict[int, float],
                    n_jobs: int | None = None) -> list[NuisanceFold]:
    """Fit every g_k on each fold's training split at its chosen ζ."""
    def one(fold):
        g_hats = {k: fit_g_k(fold.train.data, model_g, k, z) for k, z in zetas.items()}
        return replace(fold, g_hats=g_hats)

    return Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
        delayed(one)(fold) for fold in folds
    )
