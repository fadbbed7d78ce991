"""Neyman-orthogonal score equations, their solution and sandwich errors.

Each route turns the holdout subjects of every fold into per-subject score
terms with the fold's nuisances plugged in.  The pooled equation
Σ_m Σ_{i∈holdout(m)} φ_i(θ) = 0 is then solved for θ̄.

Sign convention: scores are built from the negative log-likelihood, which
flips φ relative to the log-likelihood form and leaves the root unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import softmax

from constants import ROUTE_HESSIAN, ROUTE_LATENT, ROUTE_LOGISTIC
from services.crossfit_nuisance import NuisanceFold, clip_g, correction_matrix
from services.errors import SingularSystemError, UnidentifiableArmError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DebiasedEstimate:
    theta_bar: np.ndarray
    sigma_hat: np.ndarray
    route: str | None
    n_subjects: int
    zeta: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    theta_star: np.ndarray | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_hat), 0.0, None))

    def t_stats(self, theta_star=None) -> np.ndarray | None:
        ref = self.theta_star if theta_star is None else np.asarray(theta_star, dtype=float)
        if ref is None:
            return None
        return (self.theta_bar - ref) / self.se


# ── Per-subject score terms ──────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class LinearScoreTerms:
    """φ_i(θ) = c0_i + Σ_k e^{θ_k}·c_i[:, k]."""
    c0: np.ndarray    # (n, K)
    c: np.ndarray     # (n, K, K)

    def phi(self, theta: np.ndarray) -> np.ndarray:
        return self.c0 + self.c @ np.exp(theta)

    def jac(self, theta: np.ndarray) -> np.ndarray:
        return self.c * np.exp(theta)[None, None, :]


@dataclass(frozen=True, eq=False)
class RatioScoreTerms:
    """φ_ik(θ) = e^{-θ_k}·a_ik − b_ik."""
    a: np.ndarray     # (n, K)
    b: np.ndarray     # (n, K)

    def phi(self, theta: np.ndarray) -> np.ndarray:
        return self.a * np.exp(-theta) - self.b

    def jac(self, theta: np.ndarray) -> np.ndarray:
        n, K = self.a.shape
        J = np.zeros((n, K, K))
        J[:, np.arange(K), np.arange(K)] = -self.a * np.exp(-theta)
        return J


def _exp_offset(design) -> np.ndarray:
    return np.exp(np.clip(design.offset, -design.eta_clip, design.eta_clip))


def score_H(fold: NuisanceFold, zeta: float | None = None) -> LinearScoreTerms:
    """∂θ U − H_θf (H_ff + ζ)^{-1} ∂f U per holdout subject, split by e^{θ_k}."""
    zeta = fold.zeta if zeta is None else zeta
    M = correction_matrix(fold.hessian_train, zeta)
    d = fold.holdout.design
    ef = _exp_offset(d)
    delta = d.event
    untreated = 1.0 - d.A.sum(axis=1)
    S = d.subject_sum
    c0 = -S(delta[:, None] * d.A) - (
        -S(delta[:, None] * d.Phi) + S((untreated * ef)[:, None] * d.Phi)
    ) @ M.T
    n, K = c0.shape
    c = np.zeros((n, K, K))
    for k in range(K):
        w = d.A[:, k] * ef
        c[:, k, k] += S(w)
        c[:, :, k] -= S(w[:, None] * d.Phi) @ M.T
    return LinearScoreTerms(c0=c0, c=c)


def score_g(fold: NuisanceFold) -> tuple[RatioScoreTerms, int]:
    """Four-term inverse-weight score per arm; returns (terms, |g| clip count)."""
    d = fold.holdout.design
    Z = fold.holdout.data.rows.Z
    ef = _exp_offset(d)
    delta = d.event
    untreated = 1.0 - d.A.sum(axis=1)
    S = d.subject_sum
    K = d.A.shape[1]
    n = d.n_subjects
    a, b = np.zeros((n, K)), np.zeros((n, K))
    clips = 0
    for k, g_hat in sorted(fold.g_hats.items()):
        g, over = clip_g(g_hat.values(Z))
        clips += over
        Ak = d.A[:, k]
        a[:, k] = S(delta * Ak * (1.0 + np.exp(-g)))
        b[:, k] = (S(Ak * ef * (1.0 + np.exp(-g)))
                   - S(untreated * ef * (1.0 + np.exp(g)))
                   + S(delta * untreated * (1.0 + np.exp(g))))
    return RatioScoreTerms(a=a, b=b), clips


@dataclass(frozen=True, eq=False)
class LatentScoreTerms:
    """Responsibility-weighted corrected scores of the latent model.

    φ_i(θ) = Σ_Z r_i(Z; θ)·h_i(Z; θ) with h = ∂θS − M·∂fS and M the fold's
    H_θf (H_ff + ζ)^{-1} over (Φ̄, κ, β).
    """
    fold: NuisanceFold
    M: np.ndarray

    def _parts(self, theta: np.ndarray):
        d = self.fold.holdout.design
        lay = d.layout
        x = self.fold.point.copy()
        x[lay.theta] = theta
        S_tot, e0, e1, sig = d.latent_terms(x)
        r = softmax(-S_tot, axis=1)
        S = d.subject_sum
        K = lay.k_count
        n = d.n_subjects
        P = self.M.shape[1]
        h, g, dh = [], [], []
        for z, e in ((0, e0), (1, e1)):
            w = e - d.event
            g_z = S(d.A * w[:, None])
            df = np.zeros((n, P))
            nphi = d.Phi.shape[1]
            df[:, :nphi] = S(d.Phi * w[:, None])
            df[:, nphi] = z * S(w)
            df[:, nphi + 1:] = (sig - z)[:, None] * d.baseline
            h.append(g_z - df @ self.M.T)
            g.append(g_z)
            # ∂h_Z/∂θ_j
            tilde = np.column_stack([d.A, d.Phi, np.full(len(e), float(z))])
            dz = np.zeros((n, K, K))
            for j in range(K):
                T = S(tilde * (d.A[:, j] * e)[:, None])
                dfj = np.zeros((n, P))
                dfj[:, :nphi + 1] = T[:, K:]
                dz[:, :, j] = T[:, :K] - dfj @ self.M.T
            dh.append(dz)
        return r, h, g, dh

    def phi(self, theta: np.ndarray) -> np.ndarray:
        r, h, _, _ = self._parts(theta)
        return r[:, :1] * h[0] + r[:, 1:] * h[1]

    def jac(self, theta: np.ndarray) -> np.ndarray:
        r, h, g, dh = self._parts(theta)
        J = r[:, 0, None, None] * dh[0] + r[:, 1, None, None] * dh[1]
        cov = (r[:, 0] * r[:, 1])[:, None, None] * np.einsum("ij,ik->ijk", h[1] - h[0], g[1] - g[0])
        return J - cov


def score_latent(fold: NuisanceFold, zeta: float | None = None) -> LatentScoreTerms:
    zeta = fold.zeta if zeta is None else zeta
    return LatentScoreTerms(fold=fold, M=correction_matrix(fold.hessian_train, zeta))


# ── Systems and solvers ──────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ScoreSystem:
    route: str
    terms: tuple
    theta_hat: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def phi(self, theta: np.ndarray) -> np.ndarray:
        return np.vstack([t.phi(theta) for t in self.terms])

    def jac(self, theta: np.ndarray) -> np.ndarray:
        return np.concatenate([t.jac(theta) for t in self.terms])

    def total(self, theta: np.ndarray) -> np.ndarray:
        return self.phi(theta).sum(axis=0)


def assemble(folds, route: str) -> ScoreSystem:
    if route == ROUTE_HESSIAN:
        terms = tuple(score_H(f) for f in folds)
        return ScoreSystem(route=route, terms=terms)
    if route == ROUTE_LOGISTIC:
        built = [score_g(f) for f in folds]
        terms = tuple(t for t, _ in built)
        clips = sum(c for _, c in built)
        if clips:
            logger.warning(f"|g| clipped at the limit on {clips} holdout rows")
        return ScoreSystem(route=route, terms=terms, diagnostics={"g_clips": clips})
    if route == ROUTE_LATENT:
        terms = tuple(score_latent(f) for f in folds)
        theta_hat = np.mean([f.theta_hat for f in folds], axis=0)
        return ScoreSystem(route=route, terms=terms, theta_hat=theta_hat)
    raise ValueError(f"unknown route '{route}'")


def solve_ratio(S1: np.ndarray, bracket: np.ndarray) -> np.ndarray:
    """e^{-θ̄_k} = (S2 − S3 + S4) / S1, arm by arm."""
    for k in range(len(S1)):
        if not S1[k] > 0 or not bracket[k] > 0:
            raise UnidentifiableArmError(
                f"arm {k + 1}: S1={S1[k]:.4g}, S2-S3+S4={bracket[k]:.4g}; no positive root "
                f"(typically no events on this arm)", arm=k)
    return -np.log(bracket / S1)


def solve_linear(C0: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve C0 + C·v = 0 for v = e^θ."""
    try:
        v = linalg.solve(C, -C0)
    except linalg.LinAlgError:
        raise SingularSystemError("score system in e^θ is singular")
    bad = np.flatnonzero(~(v > 0))
    if bad.size:
        k = int(bad[0])
        raise UnidentifiableArmError(f"arm {k + 1}: e^θ solution {v[k]:.4g} is not positive", arm=k)
    return np.log(v)


def newton_step(system: ScoreSystem, theta: np.ndarray) -> np.ndarray:
    J = system.jac(theta).sum(axis=0)
    try:
        return theta - linalg.solve(J, system.total(theta))
    except linalg.LinAlgError:
        raise SingularSystemError("score Jacobian is singular at the linearization point")


def solve_theta(system: ScoreSystem, full_newton: bool = False, max_steps: int = 50,
                tol: float = 1e-10) -> np.ndarray:
    if system.route == ROUTE_LOGISTIC:
        a = np.sum([t.a.sum(axis=0) for t in system.terms], axis=0)
        b = np.sum([t.b.sum(axis=0) for t in system.terms], axis=0)
        system.diagnostics.update(S1=a.tolist(), bracket=b.tolist())
        return solve_ratio(a, b)
    if system.route == ROUTE_HESSIAN:
        C0 = np.sum([t.c0.sum(axis=0) for t in system.terms], axis=0)
        C = np.sum([t.c.sum(axis=0) for t in system.terms], axis=0)
        return solve_linear(C0, C)
    theta = newton_step(system, system.theta_hat)
    steps = 1
    while full_newton and steps < max_steps:
        nxt = newton_step(system, theta)
        steps += 1
        done = np.max(np.abs(nxt - theta)) < tol
        theta = nxt
        if done:
            break
    system.diagnostics["newton_steps"] = steps
    return theta


# ── Sandwich ─────────────────────────────────────────────────────────────────

def sandwich_covariance(phi: np.ndarray, jac: np.ndarray) -> np.ndarray:
    """Σ̂ = Ĵ^{-1} (n^{-2} Σ φφᵀ) Ĵ^{-T} with Ĵ = n^{-1} Σ ∂φ/∂θ."""
    n = len(phi)
    J = jac.sum(axis=0) / n
    meat = phi.T @ phi / n ** 2
    try:
        Jinv = linalg.inv(J)
    except linalg.LinAlgError:
        raise SingularSystemError("score Jacobian is singular; sandwich undefined")
    sigma = Jinv @ meat @ Jinv.T
    return 0.5 * (sigma + sigma.T)


def sandwich_se(system: ScoreSystem, theta_bar: np.ndarray, theta_star=None,
                zeta: dict | None = None) -> DebiasedEstimate:
    phi = system.phi(theta_bar)
    sigma = sandwich_covariance(phi, system.jac(theta_bar))
    diagnostics = dict(system.diagnostics)
    diagnostics["mean_score_norm"] = float(np.linalg.norm(phi.mean(axis=0)))
    return DebiasedEstimate(
        theta_bar=np.asarray(theta_bar, dtype=float), sigma_hat=sigma, route=system.route,
        n_subjects=len(phi), zeta=dict(zeta or {}), diagnostics=diagnostics,
        theta_star=None if theta_star is None else np.asarray(theta_star, dtype=float),
    )


def debias(folds, route: str, theta_star=None, full_newton: bool = False) -> DebiasedEstimate:
    """Assemble, solve and attach sandwich errors in one call."""
    system = assemble(folds, route)
    theta_bar = solve_theta(system, full_newton=full_newton)
    zeta = {}
    if route == ROUTE_LOGISTIC:
        zeta = {f"g{k + 1}": g.zeta for k, g in sorted(folds[0].g_hats.items())}
    elif folds[0].zeta is not None:
        zeta = {"H": folds[0].zeta}
    est = sandwich_se(system, theta_bar, theta_star, zeta)
    logger.info(f"debiased ({route}) θ̄={np.round(est.theta_bar, 4)} SE={np.round(est.se, 4)}")
    return est


def naive_estimate(report, theta_star=None) -> DebiasedEstimate:
    """Plain ML θ̂ with standard errors from the inverse regularized Hessian."""
    design, x = report.design, report.x
    H = design.regularized_hessian(x)
    try:
        cov = linalg.inv(H)
    except linalg.LinAlgError:
        raise SingularSystemError("regularized Hessian is singular; no ML standard errors")
    K = design.layout.k_count
    return DebiasedEstimate(
        theta_bar=x[:K].copy(), sigma_hat=cov[:K, :K], route=None,
        n_subjects=design.n_subjects,
        theta_star=None if theta_star is None else np.asarray(theta_star, dtype=float),
    )
