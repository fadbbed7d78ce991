"""Laplace model evidence, hyperparameter grid search and Bayes-factor audits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg

from config import config
from services.em_latent import EMConfig, EMResult, multi_start_em
from services.errors import GridSearchError, HazardError, NotPositiveDefiniteError
from services.hazard_likelihood import FitState, HazardDesign, fit_hazard
from services.kernel_engine import LowRankBasis, MultiKernelModel, incomplete_cholesky
from services.panel_data import PanelDataset, normalize_covariates, resample_subjects

logger = logging.getLogger(__name__)

__all__ = [
    "EvidenceReport", "MultiKernelModel", "AuditResult", "laplace_log_evidence",
    "laplace_log_bme", "fit_model", "grid_search", "time_homogeneity_audit",
    "compare_models", "bootstrap_log_bayes_factors", "evidence_profile",
]


@dataclass(frozen=True, eq=False)
class EvidenceReport:
    model: MultiKernelModel
    log_bme: float
    fitted: FitState
    x: np.ndarray
    hyperparams: dict
    hessian_logdet: float
    bases: tuple[LowRankBasis, ...]
    design: HazardDesign
    converged: bool = True
    grid: pd.DataFrame | None = None
    em: EMResult | None = None


@dataclass(frozen=True, eq=False)
class AuditResult:
    log_bayes_factor: float
    violated: bool
    base: EvidenceReport
    augmented: EvidenceReport


# ── Laplace approximation ────────────────────────────────────────────────────

def log_prior_term(lambdas, dims) -> float:
    """Σ (dim_k/2)·ln λ_k over blocks with a proper prior (λ_k > 0)."""
    return float(sum(0.5 * d * np.log(lam) for lam, d in zip(lambdas, dims) if lam > 0))


def laplace_log_evidence(mode_value: float, hessian: np.ndarray, lambdas, dims) -> tuple[float, float]:
    """ln BME ≈ −F(x̂) + Σ (dim_k/2) ln λ_k − ½ ln|H̃|.  Returns (log_bme, ln|H̃|)."""
    try:
        c, lower = linalg.cho_factor(hessian, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "regularized Hessian is not positive definite (unconverged fit or singular model)"
        )
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    log_bme = -mode_value + log_prior_term(lambdas, dims) - 0.5 * logdet
    if not np.isfinite(log_bme):
        raise NotPositiveDefiniteError("Laplace evidence is not finite")
    return log_bme, logdet


def laplace_log_bme(design: HazardDesign, x: np.ndarray, lambdas) -> tuple[float, float]:
    """Evidence at a stationary point of the regularized objective."""
    return laplace_log_evidence(design.objective(x), design.regularized_hessian(x),
                                lambdas, design.layout.block_dims)


# ── Fitting ──────────────────────────────────────────────────────────────────

def _ensure_normalized(ds: PanelDataset) -> PanelDataset:
    if ds.normalization is None:
        logger.info("dataset not normalized; normalizing with its own statistics")
        return normalize_covariates(ds)
    return ds


def _bases(model: MultiKernelModel, Z: np.ndarray, cache: dict | None):
    bases = []
    for spec in model.kernels:
        key = (spec.kind, spec.covariate_indices, spec.bandwidth)
        if cache is not None and key in cache:
            # λ does not enter the factor; reuse it with this spec's λ
            bases.append(replace(cache[key], spec=spec))
            continue
        basis = incomplete_cholesky(spec, Z)
        if cache is not None:
            cache[key] = basis
        bases.append(basis)
    return tuple(bases)


def fit_model(ds: PanelDataset, model: MultiKernelModel, hyperparams: dict | None = None,
              em_cfg: EMConfig | None = None, opt_cfg=None, basis_cache: dict | None = None,
              x0: np.ndarray | None = None) -> EvidenceReport:
    """Fit one model at fixed hyperparameters and score it by Laplace evidence."""
    ds = _ensure_normalized(ds)
    model = model.with_hyperparams(hyperparams or {})
    bases = _bases(model, ds.rows.Z, basis_cache)
    design = HazardDesign.build(ds.rows, [b.L for b in bases],
                                [k.reg_lambda for k in model.kernels], latent=model.latent_block)
    em = None
    if model.latent_block:
        cfg = em_cfg or EMConfig()
        if x0 is not None:
            cfg = replace(cfg, init="warm_start", x0=x0)
        em = multi_start_em(design, cfg, opt_cfg)
        x, converged = em.x, em.converged
        state = design.layout.unpack(x, responsibilities=em.responsibilities)
    else:
        fit = fit_hazard(design, x0=x0, opt_cfg=opt_cfg)
        x, converged, state = fit.x, fit.converged, fit.state
    lambdas = [k.reg_lambda for k in model.kernels]
    log_bme, logdet = laplace_log_bme(design, x, lambdas)
    hp = model.hyperparams()
    logger.info(f"{model.name} {_fmt_hp(hp)}: log BME {log_bme:.4f}")
    return EvidenceReport(model=model, log_bme=log_bme, fitted=state, x=x, hyperparams=hp,
                          hessian_logdet=logdet, bases=bases, design=design,
                          converged=converged, em=em)


def _fmt_hp(hp: dict) -> str:
    return " ".join(f"{k}={v:g}" for k, v in sorted(hp.items()))


def _hp_order(hp: dict) -> tuple:
    return tuple(sorted(hp.items()))


# ── Grid search ──────────────────────────────────────────────────────────────

def _grid_point(ds, model, hp, em_cfg, opt_cfg, cache):
    try:
        return hp, fit_model(ds, model, hp, em_cfg, opt_cfg, cache), None
    except HazardError as e:
        logger.warning(f"{model.name} {_fmt_hp(hp)} failed: {e}")
        return hp, None, str(e)


def grid_search(ds: PanelDataset, model: MultiKernelModel, n_jobs: int | None = None,
                em_cfg: EMConfig | None = None, opt_cfg=None) -> EvidenceReport:
    """Fit every grid point and keep the maximal log BME.

    Ties go to the lexicographically smallest hyperparameter tuple so the
    answer does not depend on grid order.
    """
    ds = _ensure_normalized(ds)
    points = model.grid_points()
    cache: dict = {}
    results = Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
        delayed(_grid_point)(ds, model, hp, em_cfg, opt_cfg, cache) for hp in points
    )
    records, best = [], None
    for hp, report, error in results:
        records.append({**hp, "log_bme": report.log_bme if report else np.nan,
                        "converged": report.converged if report else False,
                        "error": error or ""})
        if report is None:
            continue
        if (best is None or report.log_bme > best.log_bme
                or (report.log_bme == best.log_bme and _hp_order(hp) < _hp_order(best.hyperparams))):
            best = report
    if best is None:
        raise GridSearchError(f"all {len(points)} grid points failed for model '{model.name}'")
    table = pd.DataFrame.from_records(records)
    table = table.sort_values(sorted(points[0].keys())).reset_index(drop=True)
    logger.info(f"{model.name}: best {_fmt_hp(best.hyperparams)} log BME {best.log_bme:.4f} "
                f"over {len(points)} points")
    return replace(best, grid=table)


# ── Comparisons ──────────────────────────────────────────────────────────────

def _score(ds, model, hyperparams, tune, n_jobs, em_cfg) -> EvidenceReport:
    if tune:
        return grid_search(ds, model, n_jobs=n_jobs, em_cfg=em_cfg)
    return fit_model(ds, model, hyperparams, em_cfg)


def time_homogeneity_audit(ds: PanelDataset, model: MultiKernelModel,
                           hyperparams: dict | None = None, tune: bool = False,
                           n_jobs: int | None = None, em_cfg: EMConfig | None = None) -> AuditResult:
    """Log Bayes factor of model + elapsed-time kernel against model alone."""
    ds = _ensure_normalized(ds)
    augmented_model = model.with_elapsed_time(ds.d_count)
    base = _score(ds, model, hyperparams, tune, n_jobs, em_cfg)
    aug_hp = None if tune else {**augmented_model.hyperparams(), **(hyperparams or {})}
    augmented = _score(ds, augmented_model, aug_hp, tune, n_jobs, em_cfg)
    log_bf = augmented.log_bme - base.log_bme
    violated = log_bf > 0
    logger.info(f"time-homogeneity audit for {model.name}: log BF {log_bf:.4f}"
                f"{' (violated)' if violated else ''}")
    return AuditResult(log_bayes_factor=log_bf, violated=violated, base=base, augmented=augmented)


def compare_models(ds: PanelDataset, model_a: MultiKernelModel, model_b: MultiKernelModel,
                   hp_a: dict | None = None, hp_b: dict | None = None, tune: bool = False,
                   n_jobs: int | None = None, em_cfg: EMConfig | None = None) -> float:
    """ln BF(a : b) = ln BME(a) − ln BME(b)."""
    a = _score(ds, model_a, hp_a, tune, n_jobs, em_cfg)
    b = _score(ds, model_b, hp_b, tune, n_jobs, em_cfg)
    return a.log_bme - b.log_bme


def _bootstrap_one(ds, model_a, model_b, hp_a, hp_b, tune, seed, rep, em_cfg):
    rng = np.random.default_rng([seed, rep])
    sample = resample_subjects(ds, rng)
    record = {"replicate": rep, "log_bme_a": np.nan, "log_bme_b": np.nan,
              "log_bf": np.nan, "error": ""}
    try:
        a = _score(sample, model_a, hp_a, tune, 1, em_cfg)
        b = _score(sample, model_b, hp_b, tune, 1, em_cfg)
        record.update(log_bme_a=a.log_bme, log_bme_b=b.log_bme, log_bf=a.log_bme - b.log_bme)
    except HazardError as e:
        logger.warning(f"bootstrap replicate {rep} failed: {e}")
        record["error"] = str(e)
    return record


def bootstrap_log_bayes_factors(ds: PanelDataset, model_a: MultiKernelModel,
                                model_b: MultiKernelModel, n_boot: int = 10, seed: int = 0,
                                hp_a: dict | None = None, hp_b: dict | None = None,
                                tune: bool = True, n_jobs: int | None = None,
                                em_cfg: EMConfig | None = None) -> pd.DataFrame:
    """Per-replicate log BFs over subject-level bootstrap resamples."""
    ds = _ensure_normalized(ds)
    records = Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
        delayed(_bootstrap_one)(ds, model_a, model_b, hp_a, hp_b, tune, seed, rep, em_cfg)
        for rep in range(n_boot)
    )
    return pd.DataFrame.from_records(records)


def evidence_profile(ds: PanelDataset, model: MultiKernelModel, base_hp: dict, name: str,
                     values, n_jobs: int | None = None) -> pd.DataFrame:
    """log BME as a function of one hyperparameter, the others held at *base_hp*."""
    ds = _ensure_normalized(ds)
    cache: dict = {}
    results = Parallel(n_jobs=n_jobs or config.N_JOBS, backend="threading")(
        delayed(_grid_point)(ds, model, {**base_hp, name: float(v)}, None, None, cache)
        for v in values
    )
    return pd.DataFrame.from_records([
        {name: hp[name], "log_bme": rep.log_bme if rep else np.nan} for hp, rep, _ in results
    ])
