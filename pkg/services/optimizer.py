"""Limited-memory BFGS with Armijo backtracking."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from config import config
from services.errors import LineSearchError, NonFiniteError

logger = logging.getLogger(__name__)

# Curvature pairs with sᵀy below this are skipped.
CURVATURE_EPS = 1e-10


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = field(default_factory=lambda: config.LBFGS_MEMORY)
    eps_stop: float = field(default_factory=lambda: config.EPS_STOP)
    max_iters: int = field(default_factory=lambda: config.MAX_ITERS)
    armijo_c: float = field(default_factory=lambda: config.ARMIJO_C)
    backtrack_factor: float = field(default_factory=lambda: config.BACKTRACK)
    max_backtracks: int = field(default_factory=lambda: config.MAX_BACKTRACKS)

    def __post_init__(self):
        if not self.eps_stop > 0:
            raise ValueError(f"eps_stop must be > 0, got {self.eps_stop}")
        if not 0 < self.armijo_c < 1:
            raise ValueError(f"armijo_c must lie in (0, 1), got {self.armijo_c}")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError(f"backtrack_factor must lie in (0, 1), got {self.backtrack_factor}")
        if self.memory < 1 or self.max_iters < 1:
            raise ValueError("memory and max_iters must be positive")


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    history: tuple[float, ...] = ()


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    """H·g for the L-BFGS inverse-Hessian approximation."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _check_finite(value, grad, x):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite objective or gradient (value={value})", point=x.copy())


def armijo_search(fun, x, value, grad, direction, step, cfg: OptimizerConfig):
    """Backtrack from *step* until f(x+αp) ≤ f(x) + c·α·gᵀp.

    Returns (alpha, new_value) or None when every trial fails.  Non-finite
    trial values count as failures.
    """
    slope = float(grad @ direction)
    for _ in range(cfg.max_backtracks):
        trial = fun(x + step * direction)
        if np.isfinite(trial) and trial <= value + cfg.armijo_c * step * slope:
            return step, trial
        step *= cfg.backtrack_factor
    return None


def minimize(fun_and_grad, x0: np.ndarray, cfg: OptimizerConfig | None = None) -> OptimizeResult:
    """Minimize a smooth objective given as ``x -> (value, gradient)``."""
    cfg = cfg or OptimizerConfig()
    x = np.array(x0, dtype=float)
    value, grad = fun_and_grad(x)
    _check_finite(value, grad, x)

    def fun(z):
        return fun_and_grad(z)[0]

    pairs: deque = deque(maxlen=cfg.memory)
    history = [float(value)]
    grad_norm = float(np.linalg.norm(grad))
    it = 0
    while grad_norm >= cfg.eps_stop and it < cfg.max_iters:
        direction = -_two_loop(grad, list(pairs))
        if not grad @ direction < 0:
            pairs.clear()
            direction = -grad
        # Unit step once curvature is known; scaled steepest descent otherwise.
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.abs(grad).sum(), 1e-12))
        found = armijo_search(fun, x, value, grad, direction, step, cfg)
        if found is None and pairs:
            logger.debug(f"iteration {it}: quasi-Newton step failed, retrying steepest descent")
            pairs.clear()
            direction = -grad
            found = armijo_search(fun, x, value, grad, direction,
                                  min(1.0, 1.0 / max(np.abs(grad).sum(), 1e-12)), cfg)
        if found is None:
            raise LineSearchError(
                f"line search failed after {cfg.max_backtracks} backtracks "
                f"(iteration {it}, value {value:.6g}, |g| {grad_norm:.3g})"
            )
        alpha, _ = found
        s = alpha * direction
        x_new = x + s
        value_new, grad_new = fun_and_grad(x_new)
        _check_finite(value_new, grad_new, x_new)
        y = grad_new - grad
        sy = float(s @ y)
        if sy > CURVATURE_EPS:
            pairs.append((s, y, 1.0 / sy))
        x, value, grad = x_new, value_new, grad_new
        grad_norm = float(np.linalg.norm(grad))
        history.append(float(value))
        it += 1

    converged = grad_norm < cfg.eps_stop
    if not converged:
        logger.warning(f"L-BFGS stopped at max_iters={cfg.max_iters} with |g|={grad_norm:.3g}")
    return OptimizeResult(x=x, value=float(value), grad_norm=grad_norm, iterations=it,
                          converged=converged, history=tuple(history))
