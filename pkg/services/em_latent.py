"""EM fitting of the two-class latent-variable hazard model.

E-step: r_i(Z) ∝ exp(-S_i(Z)).  M-step: L-BFGS on Σ_i Σ_Z r_i(Z)·S_i(Z) plus
the kernel penalty, started from the previous iterate.  The traced quantity is
the penalized marginal objective, which EM never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from config import config
from services.errors import EMAscentError, NonFiniteError
from services.hazard_likelihood import HazardDesign, fit_hazard
from services.optimizer import OptimizerConfig, minimize

logger = logging.getLogger(__name__)

INIT_NEAR_TRUTH = "near_truth"
INIT_RANDOM = "random"
INIT_WARM = "warm_start"

# |κ| at or below this makes the fit numerically fragile.
SMALL_KAPPA = 1.0


@dataclass(frozen=True, eq=False)
class EMConfig:
    max_em_iters: int = field(default_factory=lambda: config.EM_MAX_ITERS)
    tol_marginal_nll: float = field(default_factory=lambda: config.EM_TOL)
    init: str = INIT_RANDOM
    theta0: np.ndarray | None = None
    kappa0: float | None = None
    beta0: np.ndarray | None = None     # (β_1..β_p, β_0)
    x0: np.ndarray | None = None
    starts: int = field(default_factory=lambda: config.EM_STARTS)
    seed: int = 0

    def __post_init__(self):
        if not self.tol_marginal_nll > 0:
            raise ValueError(f"EM tolerance must be > 0, got {self.tol_marginal_nll}")
        if self.init not in (INIT_NEAR_TRUTH, INIT_RANDOM, INIT_WARM):
            raise ValueError(f"unknown EM init '{self.init}'")
        if self.init == INIT_WARM and self.x0 is None:
            raise ValueError("warm_start needs x0")
        if self.init == INIT_NEAR_TRUTH and self.kappa0 is None:
            raise ValueError("near_truth needs kappa0")


@dataclass(frozen=True, eq=False)
class EMResult:
    x: np.ndarray
    responsibilities: np.ndarray
    trace: tuple[float, ...]
    iterations: int
    converged: bool
    small_kappa: bool


def e_step(design: HazardDesign, x: np.ndarray) -> np.ndarray:
    return design.responsibilities(x)


def m_step(design: HazardDesign, x: np.ndarray, r: np.ndarray,
           opt_cfg: OptimizerConfig | None = None) -> np.ndarray:
    result = minimize(
        lambda z: (design.weighted_objective(z, r), design.weighted_gradient(z, r)),
        x, opt_cfg,
    )
    return result.x


def em_fit(design: HazardDesign, x0: np.ndarray, cfg: EMConfig | None = None,
           opt_cfg: OptimizerConfig | None = None) -> EMResult:
    cfg = cfg or EMConfig()
    x = np.array(x0, dtype=float)
    value = design.objective(x)
    if not np.isfinite(value):
        raise NonFiniteError("latent objective non-finite at the EM start", point=x)
    trace = [value]
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iters + 1):
        r = e_step(design, x)
        x = m_step(design, x, r, opt_cfg)
        new = design.objective(x)
        if new > value + 1e-8 * max(1.0, abs(value)):
            raise EMAscentError(f"marginal objective rose from {value:.10g} to {new:.10g} "
                                f"at EM iteration {it}")
        trace.append(new)
        improvement = value - new
        value = new
        if improvement < cfg.tol_marginal_nll:
            converged = True
            break
    kappa = float(x[design.layout.kappa])
    small = abs(kappa) <= SMALL_KAPPA
    if small:
        logger.warning(f"fitted |κ|={abs(kappa):.3f} ≤ {SMALL_KAPPA}: latent fit is unstable")
    if not converged:
        logger.warning(f"EM stopped after {cfg.max_em_iters} iterations without converging")
    logger.info(f"EM finished in {it} iterations, objective {value:.6f}, κ={kappa:.3f}")
    return EMResult(x=x, responsibilities=e_step(design, x), trace=tuple(trace),
                    iterations=it, converged=converged, small_kappa=small)


def swap_labels(layout, x: np.ndarray) -> np.ndarray:
    """Relabel Z ↔ 1−Z: b → b+κ, κ → −κ, β → −β."""
    y = np.array(x, dtype=float)
    y[layout.bias] = x[layout.bias] + x[layout.kappa]
    y[layout.kappa] = -x[layout.kappa]
    y[layout.beta] = -x[layout.beta]
    return y


def _latent_start(design: HazardDesign, base_x: np.ndarray, kappa: float,
                  beta: np.ndarray) -> np.ndarray:
    """Embed a non-latent fit, shifting b so the mean hazard level is kept."""
    lay = design.layout
    x = np.zeros(lay.n_params)
    x[:len(base_x)] = base_x
    x[lay.kappa] = kappa
    x[lay.beta] = beta
    share = float(np.mean(expit(design.baseline @ beta)))
    x[lay.bias] -= np.log1p(share * np.expm1(kappa))
    return x


def initial_points(design: HazardDesign, cfg: EMConfig, opt_cfg=None) -> list[np.ndarray]:
    lay = design.layout
    if cfg.init == INIT_WARM:
        return [np.asarray(cfg.x0, dtype=float)]
    base = fit_hazard(design.without_latent(), opt_cfg=opt_cfg).x
    if cfg.init == INIT_NEAR_TRUTH:
        if cfg.theta0 is not None:
            base = base.copy()
            base[lay.theta] = cfg.theta0
        beta = np.zeros(lay.p_count + 1) if cfg.beta0 is None else np.asarray(cfg.beta0, float)
        return [_latent_start(design, base, float(cfg.kappa0), beta)]
    starts = []
    for s in range(cfg.starts):
        rng = np.random.default_rng([cfg.seed, s])
        kappa = rng.uniform(0.5, 3.0)
        beta = rng.normal(0.0, 0.5, size=lay.p_count + 1)
        starts.append(_latent_start(design, base, kappa, beta))
    return starts


def multi_start_em(design: HazardDesign, cfg: EMConfig, opt_cfg=None) -> EMResult:
    """Run EM from every start and keep the lowest marginal objective."""
    best = None
    for i, x0 in enumerate(initial_points(design, cfg, opt_cfg)):
        result = em_fit(design, x0, cfg, opt_cfg)
        logger.info(f"EM start {i}: objective {result.trace[-1]:.6f}")
        if best is None or result.trace[-1] < best.trace[-1]:
            best = result
    return best
