"""Exit codes, route names and file-format registries.

Single source of truth for every identifier shared between the services and
the command line.  Import these constants instead of hardcoding strings.
"""
from __future__ import annotations

# ── Exit-code contract (stable across releases) ──────────────────────────────
EXIT_OK: int = 0
EXIT_USAGE: int = 1
EXIT_DATA: int = 2
EXIT_NUMERICAL: int = 3

# ── Nuisance routes ──────────────────────────────────────────────────────────
ROUTE_HESSIAN: str = "hessian"
ROUTE_LOGISTIC: str = "logistic"
ROUTE_LATENT: str = "latent"

ALL_ROUTES: tuple[str, ...] = (ROUTE_HESSIAN, ROUTE_LOGISTIC, ROUTE_LATENT)

# Command-line spelling of each route.
ROUTE_FLAGS: dict[str, str] = {
    "h":      ROUTE_HESSIAN,
    "g":      ROUTE_LOGISTIC,
    "latent": ROUTE_LATENT,
}

# ── Estimators available to replicate experiments ────────────────────────────
EST_NAIVE: str = "naive_ml"
EST_DEBIAS_H: str = "debias_H"
EST_DEBIAS_G: str = "debias_g"
EST_DEBIAS_LATENT: str = "debias_latent"

ALL_ESTIMATORS: tuple[str, ...] = (EST_NAIVE, EST_DEBIAS_H, EST_DEBIAS_G, EST_DEBIAS_LATENT)

ESTIMATOR_ROUTE: dict[str, str | None] = {
    EST_NAIVE:         None,
    EST_DEBIAS_H:      ROUTE_HESSIAN,
    EST_DEBIAS_G:      ROUTE_LOGISTIC,
    EST_DEBIAS_LATENT: ROUTE_LATENT,
}

# ── Kernel kinds ─────────────────────────────────────────────────────────────
KERNEL_LINEAR: str = "linear"
KERNEL_GAUSSIAN: str = "gaussian"

# Name under which the elapsed-time column is exposed to kernels.
ELAPSED_TIME: str = "elapsed_time"

# ── File formats ─────────────────────────────────────────────────────────────
PANEL_FORMAT: str = "hazard-panel"
PANEL_VERSION: int = 1
MODEL_FORMAT: str = "hazard-model"
MODEL_VERSION: int = 1
BUNDLE_FORMAT: str = "hazard-nuisance"
BUNDLE_VERSION: int = 1
ESTIMATE_FORMAT: str = "hazard-estimate"
ESTIMATE_VERSION: int = 1
EVIDENCE_FORMAT: str = "hazard-evidence"
EVIDENCE_VERSION: int = 1
RUN_SCHEMA_VERSION: int = 1

RECORD_SUBJECT: str = "S"
RECORD_ROW: str = "R"

# ── Hyperparameter grid keys ─────────────────────────────────────────────────
# Gaussian kernels of equal input dimension share (lambda, sigma).
GRID_LINEAR_LAMBDA: str = "linear_lambda"


def gauss_lambda_key(dim: int) -> str:
    return f"gauss{dim}_lambda"


def gauss_sigma_key(dim: int) -> str:
    return f"gauss{dim}_sigma"
