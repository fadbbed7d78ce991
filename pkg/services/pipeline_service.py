"""Three-step orchestration: model selection, nuisance estimation, debiased solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from config import config
from constants import (
    ELAPSED_TIME, EST_NAIVE, ESTIMATOR_ROUTE, ROUTE_HESSIAN, ROUTE_LATENT, ROUTE_LOGISTIC,
)
from services.crossfit_nuisance import (
    FoldPlan, NuisanceFold, attach_g_models, fit_folds, g_kernels, make_folds, tune_zeta_H,
    tune_zeta_g, zeta_schedule,
)
from services.debias_scores import DebiasedEstimate, debias, naive_estimate
from services.em_latent import INIT_NEAR_TRUTH, INIT_RANDOM, EMConfig
from services.errors import HazardError
from services.kernel_engine import MultiKernelModel, build_model
from services.model_evidence import (
    AuditResult, EvidenceReport, fit_model, grid_search, time_homogeneity_audit,
)
from services.panel_data import PanelDataset, normalize_covariates
from utils import log_grid

logger = logging.getLogger(__name__)

# Reference models for the simulated cohorts.
SIM1_CORRECT = "linear:age;gaussian:date;gaussian:x1;gaussian:x2"
SIM1_F2_DELETED = "linear:age;gaussian:date;gaussian:x1"
SIM2_OBSERVED = SIM1_CORRECT + ";linear:test1,test2,test3"
SIM2_LATENT = SIM1_CORRECT

REFERENCE_MODELS: dict[str, tuple[str, bool]] = {
    "correct":       (SIM1_CORRECT, False),
    "f2_deleted":    (SIM1_F2_DELETED, False),
    "observed_only": (SIM2_OBSERVED, False),
    "latent":        (SIM2_LATENT, True),
}

# ζ acts on per-subject averaged Hessian blocks.
DEFAULT_ZETA_GRID_H: tuple[float, ...] = tuple(log_grid(1e-4, 1.0))
DEFAULT_ZETA_GRID_G: tuple[float, ...] = tuple(log_grid(1.0, 100.0))

ZETA_RULE_CV = "cv"
ZETA_RULE_BME = "bme"


@dataclass(frozen=True)
class RunSettings:
    model_text: str = SIM1_CORRECT
    model_name: str = "model"
    latent: bool = False
    hyperparams: dict | None = None
    tune: bool = False
    audit: bool = False
    folds: int = field(default_factory=lambda: config.FOLDS)
    fold_seed: int = 0
    zeta_H: float | None = None
    zeta_grid_H: tuple[float, ...] = DEFAULT_ZETA_GRID_H
    zeta_c: float | None = None
    zeta_alpha: float | None = None
    zeta_g: float | None = None
    zeta_grid_g: tuple[float, ...] = DEFAULT_ZETA_GRID_G
    zeta_g_rule: str = ZETA_RULE_CV
    include_2d: bool = False
    em_starts: int = field(default_factory=lambda: config.EM_STARTS)
    em_seed: int = 0
    theta0: tuple[float, ...] | None = None
    kappa0: float | None = None
    beta0: tuple[float, ...] | None = None
    full_newton: bool = False
    theta_star: tuple[float, ...] | None = None
    n_jobs: int | None = None

    def __post_init__(self):
        if self.zeta_g_rule not in (ZETA_RULE_CV, ZETA_RULE_BME):
            raise ValueError(f"zeta_g_rule must be '{ZETA_RULE_CV}' or '{ZETA_RULE_BME}'")
        if (self.zeta_c is None) != (self.zeta_alpha is None):
            raise ValueError("the ζ_n schedule needs both c and alpha")


@dataclass(frozen=True, eq=False)
class NuisanceResult:
    plan: FoldPlan
    folds: list[NuisanceFold]
    route: str
    tuning: dict = field(default_factory=dict)
    zetas: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    report: EvidenceReport
    audit: AuditResult | None
    nuisance: NuisanceResult
    estimate: DebiasedEstimate
    naive: DebiasedEstimate


# ── Models ───────────────────────────────────────────────────────────────────

def kernel_input_names(ds: PanelDataset) -> tuple[str, ...]:
    return tuple(ds.covariate_names) + (ELAPSED_TIME,)


def build_run_model(ds: PanelDataset, settings: RunSettings) -> MultiKernelModel:
    return build_model(settings.model_text, kernel_input_names(ds), name=settings.model_name,
                       latent=settings.latent, hyperparams=settings.hyperparams)


def reference_model(ds: PanelDataset, which: str) -> MultiKernelModel:
    if which not in REFERENCE_MODELS:
        raise ValueError(f"unknown reference model '{which}'; have {sorted(REFERENCE_MODELS)}")
    text, latent = REFERENCE_MODELS[which]
    return build_model(text, kernel_input_names(ds), name=which, latent=latent)


def check_route(model: MultiKernelModel, route: str) -> None:
    if model.latent_block and route != ROUTE_LATENT:
        raise ValueError(f"latent model '{model.name}' is debiased by the latent route only")
    if not model.latent_block and route == ROUTE_LATENT:
        raise ValueError("the latent route needs a model with a latent block")


def em_config(settings: RunSettings, report: EvidenceReport | None = None) -> EMConfig:
    """EM settings; fold fits start near the full-data fit when one is given."""
    if report is not None and report.fitted.is_latent:
        return EMConfig(init=INIT_NEAR_TRUTH, theta0=report.fitted.theta,
                        kappa0=report.fitted.kappa, beta0=report.fitted.beta, starts=1)
    if settings.kappa0 is not None:
        return EMConfig(init=INIT_NEAR_TRUTH,
                        theta0=None if settings.theta0 is None else np.asarray(settings.theta0),
                        kappa0=settings.kappa0,
                        beta0=None if settings.beta0 is None else np.asarray(settings.beta0),
                        starts=1, seed=settings.em_seed)
    return EMConfig(init=INIT_RANDOM, starts=settings.em_starts, seed=settings.em_seed)


def prepare(ds: PanelDataset) -> PanelDataset:
    return ds if ds.normalization is not None else normalize_covariates(ds)


# ── Step 1 ───────────────────────────────────────────────────────────────────

def run_step1(ds: PanelDataset, settings: RunSettings) -> tuple[EvidenceReport, AuditResult | None]:
    """Fit (or grid-search) the model and optionally audit time homogeneity."""
    ds = prepare(ds)
    model = build_run_model(ds, settings)
    em_cfg = em_config(settings) if model.latent_block else None
    if settings.tune:
        report = grid_search(ds, model, n_jobs=settings.n_jobs, em_cfg=em_cfg)
    else:
        report = fit_model(ds, model, settings.hyperparams, em_cfg)
    audit = None
    if settings.audit:
        audit = time_homogeneity_audit(ds, model, report.hyperparams, tune=False,
                                       n_jobs=settings.n_jobs, em_cfg=em_cfg)
    return report, audit


# ── Step 2 ───────────────────────────────────────────────────────────────────

def _fit_plan_folds(ds, report, settings, route):
    plan = make_folds(ds, settings.folds, settings.fold_seed)
    em_cfg = em_config(settings, report) if report.model.latent_block else None
    folds = fit_folds(ds, plan, report.model, report.hyperparams, route=route, em_cfg=em_cfg,
                      n_jobs=settings.n_jobs)
    return plan, folds


def choose_zeta_H(folds, settings: RunSettings, n: int) -> tuple[float, pd.DataFrame | None]:
    if settings.zeta_H is not None:
        return float(settings.zeta_H), None
    if settings.zeta_c is not None:
        return zeta_schedule(n, settings.zeta_c, settings.zeta_alpha), None
    return tune_zeta_H(folds, settings.zeta_grid_H)


def choose_zeta_g(ds, plan, model_g, settings: RunSettings):
    """ζ per arm: the fixed value, or the CV / evidence choice over the grid."""
    zetas, tables = {}, {}
    for k in range(ds.k_count):
        if settings.zeta_g is not None:
            zetas[k] = float(settings.zeta_g)
            continue
        zeta_cv, zeta_bme, table = tune_zeta_g(ds, plan, model_g, k, settings.zeta_grid_g,
                                               n_jobs=settings.n_jobs)
        zetas[k] = zeta_cv if settings.zeta_g_rule == ZETA_RULE_CV else zeta_bme
        tables[f"g{k + 1}"] = table
    return zetas, tables


def _tune_folds(ds, plan, folds, report, settings, route) -> NuisanceResult:
    if route == ROUTE_LOGISTIC:
        model_g = g_kernels(report.model, settings.include_2d)
        zetas, tables = choose_zeta_g(ds, plan, model_g, settings)
        folds = attach_g_models(ds, folds, model_g, zetas, n_jobs=settings.n_jobs)
        return NuisanceResult(plan=plan, folds=folds, route=route, tuning=tables,
                              zetas={f"g{k + 1}": z for k, z in zetas.items()})
    zeta, table = choose_zeta_H(folds, settings, ds.n_subjects)
    folds = [replace(f, zeta=zeta) for f in folds]
    tuning = {"H": table} if table is not None else {}
    return NuisanceResult(plan=plan, folds=folds, route=route, tuning=tuning, zetas={"H": zeta})


def run_step2(ds: PanelDataset, report: EvidenceReport, settings: RunSettings,
              route: str) -> NuisanceResult:
    """Cross-fitted nuisances for *route* at the Step 1 hyperparameters."""
    ds = prepare(ds)
    check_route(report.model, route)
    fit_route = ROUTE_HESSIAN if route == ROUTE_LOGISTIC else route
    plan, folds = _fit_plan_folds(ds, report, settings, fit_route)
    return _tune_folds(ds, plan, folds, report, settings, route)


# ── Step 3 ───────────────────────────────────────────────────────────────────

def run_step3(nuisance: NuisanceResult, settings: RunSettings) -> DebiasedEstimate:
    est = debias(nuisance.folds, nuisance.route, theta_star=settings.theta_star,
                 full_newton=settings.full_newton)
    return replace(est, zeta=dict(nuisance.zetas))


def run_pipeline(ds: PanelDataset, settings: RunSettings, route: str) -> PipelineResult:
    ds = prepare(ds)
    report, audit = run_step1(ds, settings)
    nuisance = run_step2(ds, report, settings, route)
    est = run_step3(nuisance, settings)
    naive = naive_estimate(report, settings.theta_star)
    return PipelineResult(report=report, audit=audit, nuisance=nuisance, estimate=est,
                          naive=naive)


# ── Estimator sets (replicate experiments) ───────────────────────────────────

def estimate(ds: PanelDataset, settings: RunSettings, estimators) -> dict:
    """Run each named estimator on *ds*; failures come back as the raised error.

    Step 1 and the fold fits are shared: the outcome folds carry Hessian blocks,
    so the H and g routes reuse one set of fits.
    """
    ds = prepare(ds)
    report, _ = run_step1(ds, replace(settings, audit=False))
    out: dict = {}
    if EST_NAIVE in estimators:
        out[EST_NAIVE] = naive_estimate(report, settings.theta_star)
    shared = None
    for name in estimators:
        route = ESTIMATOR_ROUTE[name]
        if route is None:
            continue
        try:
            check_route(report.model, route)
            fit_route = ROUTE_LATENT if route == ROUTE_LATENT else ROUTE_HESSIAN
            if shared is None or shared[0] != fit_route:
                shared = (fit_route, *_fit_plan_folds(ds, report, settings, fit_route))
            _, plan, folds = shared
            nuisance = _tune_folds(ds, plan, folds, report, settings, route)
            out[name] = run_step3(nuisance, settings)
        except (HazardError, ValueError) as e:
            logger.warning(f"{name} failed: {e}")
            out[name] = e
    return out

