"""Discretized exponential-hazard likelihood with its gradient and Hessian.

Every (subject, timestep) row contributes

    U = -δ·(θ'A + f(X)) + exp(θ'A + f(X))

with δ = 1 on the step that contains the event.  The bias b inside f absorbs
log Δt, so no step width appears.  The latent variant adds κ·Z to the linear
predictor and a logistic prior on Z at t = 0, and is handled through the
per-subject sums S_i(Z).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp, softmax, xlogy

from config import config
from services.errors import NoEventsError, NonFiniteError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FitState:
    theta: np.ndarray
    u_blocks: tuple[np.ndarray, ...]
    bias: float
    kappa: float | None = None
    beta: np.ndarray | None = None
    responsibilities: np.ndarray | None = None   # (n, 2), columns Z=0, Z=1

    @property
    def is_latent(self) -> bool:
        return self.kappa is not None


@dataclass(frozen=True)
class ParameterLayout:
    """Packing of x = [θ, u_1..u_m, b, (κ, β_1..β_p, β_0)]."""
    k_count: int
    block_dims: tuple[int, ...]
    latent: bool = False
    p_count: int = 0

    @property
    def theta(self) -> slice:
        return slice(0, self.k_count)

    @property
    def n_basis(self) -> int:
        return sum(self.block_dims)

    def u_slice(self, k: int) -> slice:
        start = self.k_count + sum(self.block_dims[:k])
        return slice(start, start + self.block_dims[k])

    @property
    def bias(self) -> int:
        return self.k_count + self.n_basis

    @property
    def phi(self) -> slice:
        """Coordinates multiplying Φ = [L_1..L_m, 1]."""
        return slice(self.k_count, self.bias + 1)

    @property
    def kappa(self) -> int:
        return self.bias + 1

    @property
    def beta(self) -> slice:
        return slice(self.bias + 2, self.bias + 3 + self.p_count)

    @property
    def n_params(self) -> int:
        base = self.bias + 1
        return base + (self.p_count + 2 if self.latent else 0)

    @property
    def nuisance(self) -> slice:
        return slice(self.k_count, self.n_params)

    def pack(self, state: FitState) -> np.ndarray:
        x = np.zeros(self.n_params)
        x[self.theta] = state.theta
        for k, u in enumerate(state.u_blocks):
            x[self.u_slice(k)] = u
        x[self.bias] = state.bias
        if self.latent:
            x[self.kappa] = state.kappa or 0.0
            if state.beta is not None:
                x[self.beta] = state.beta
        return x

    def unpack(self, x: np.ndarray, responsibilities: np.ndarray | None = None) -> FitState:
        x = np.asarray(x, dtype=float)
        return FitState(
            theta=x[self.theta].copy(),
            u_blocks=tuple(x[self.u_slice(k)].copy() for k in range(len(self.block_dims))),
            bias=float(x[self.bias]),
            kappa=float(x[self.kappa]) if self.latent else None,
            beta=x[self.beta].copy() if self.latent else None,
            responsibilities=responsibilities,
        )


@dataclass(frozen=True, eq=False)
class HessianBlocks:
    H_tt: np.ndarray
    H_tf: np.ndarray
    H_ff: np.ndarray

    def full(self) -> np.ndarray:
        return np.block([[self.H_tt, self.H_tf], [self.H_tf.T, self.H_ff]])

    def scaled(self, factor: float) -> "HessianBlocks":
        return HessianBlocks(self.H_tt * factor, self.H_tf * factor, self.H_ff * factor)


def split_blocks(H: np.ndarray, k_count: int) -> HessianBlocks:
    return HessianBlocks(H_tt=H[:k_count, :k_count], H_tf=H[:k_count, k_count:],
                         H_ff=H[k_count:, k_count:])


@dataclass(frozen=True, eq=False)
class HazardDesign:
    """Row-level design for one dataset and one set of kernel bases."""
    A: np.ndarray            # (N, K)
    Phi: np.ndarray          # (N, R+1), last column is the bias
    event: np.ndarray        # (N,)
    subject: np.ndarray      # (N,)
    offsets: np.ndarray      # (n+1,)
    baseline: np.ndarray     # (n, p+1), intercept last
    layout: ParameterLayout
    penalty: np.ndarray      # (n_params,) λ on u coordinates
    eta_clip: float = 40.0
    diagnostics: dict = field(default_factory=dict)
    offset: np.ndarray | None = None   # fixed (N,) term added to the predictor

    @classmethod
    def build(cls, rows, blocks, lambdas, latent: bool = False,
              eta_clip: float | None = None, offset: np.ndarray | None = None) -> "HazardDesign":
        """*rows* is a PanelRows; *blocks* are factor matrices on those rows."""
        blocks = [np.asarray(b, dtype=float).reshape(rows.n_rows, -1) for b in blocks]
        Phi = np.column_stack(blocks + [np.ones(rows.n_rows)])
        p = rows.baseline.shape[1] if latent else 0
        layout = ParameterLayout(k_count=rows.A.shape[1],
                                 block_dims=tuple(b.shape[1] for b in blocks),
                                 latent=latent, p_count=p)
        penalty = np.zeros(layout.n_params)
        for k, lam in enumerate(lambdas):
            penalty[layout.u_slice(k)] = lam
        baseline = np.column_stack([rows.baseline, np.ones(rows.n_subjects)])
        return cls(A=rows.A, Phi=Phi, event=rows.event, subject=rows.subject,
                   offsets=rows.offsets, baseline=baseline, layout=layout, penalty=penalty,
                   eta_clip=config.ETA_CLIP if eta_clip is None else eta_clip,
                   diagnostics={"eta_clips": 0}, offset=offset)

    @classmethod
    def from_dataset(cls, ds, model, bases=None) -> "HazardDesign":
        """Bases are factored on *ds* when omitted, otherwise extended to its rows."""
        rows = ds.rows
        if bases is None:
            blocks = [b.L for b in model.build_bases(rows.Z)]
        else:
            blocks = [b.extend(rows.Z) for b in bases]
        return cls.build(rows, blocks, [k.reg_lambda for k in model.kernels],
                         latent=model.latent_block)

    def without_latent(self) -> "HazardDesign":
        """Same rows and bases with the (κ, β) block removed."""
        lay = replace(self.layout, latent=False, p_count=0)
        return replace(self, layout=lay, penalty=self.penalty[:lay.n_params].copy(),
                       diagnostics={"eta_clips": 0})

    def with_latent(self, p_count: int) -> "HazardDesign":
        lay = replace(self.layout, latent=True, p_count=p_count)
        penalty = np.zeros(lay.n_params)
        penalty[:self.layout.n_params] = self.penalty[:self.layout.n_params]
        return replace(self, layout=lay, penalty=penalty, diagnostics={"eta_clips": 0})

    # ── Shared pieces ────────────────────────────────────────────────────────

    @property
    def n_subjects(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def X(self) -> np.ndarray:
        """[A Φ]: the row design for θ and the Φ coordinates."""
        return np.hstack([self.A, self.Phi])

    def _clip(self, eta: np.ndarray) -> np.ndarray:
        over = np.abs(eta) > self.eta_clip
        if over.any():
            self.diagnostics["eta_clips"] += int(over.sum())
            logger.debug(f"linear predictor clipped on {int(over.sum())} rows")
            eta = np.clip(eta, -self.eta_clip, self.eta_clip)
        return eta

    def raw_predictor(self, x: np.ndarray) -> np.ndarray:
        lay = self.layout
        eta = self.A @ x[lay.theta] + self.Phi @ x[lay.phi]
        return eta if self.offset is None else eta + self.offset

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return self._clip(self.raw_predictor(x))

    def subject_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.offsets[:-1], axis=0)

    def penalty_value(self, x: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.penalty * x * x))

    # ── Latent per-subject sums ──────────────────────────────────────────────

    def latent_terms(self, x: np.ndarray):
        """(S, e0, e1, σ(s)) with S[:, z] = Σ_t U(Z=z) + prior term."""
        lay = self.layout
        raw = self.raw_predictor(x)
        kappa = x[lay.kappa]
        eta0 = self._clip(raw)
        eta1 = self._clip(raw + kappa)
        e0, e1 = np.exp(eta0), np.exp(eta1)
        s = self.baseline @ x[lay.beta]
        S = np.column_stack([
            self.subject_sum(-self.event * eta0 + e0) + np.logaddexp(0.0, s),
            self.subject_sum(-self.event * eta1 + e1) + np.logaddexp(0.0, -s),
        ])
        return S, e0, e1, expit(s)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        S, *_ = self.latent_terms(x)
        return softmax(-S, axis=1)

    # ── Negative log-likelihood ──────────────────────────────────────────────

    def nll(self, x: np.ndarray) -> float:
        if self.layout.latent:
            S, *_ = self.latent_terms(x)
            return float(-np.sum(logsumexp(-S, axis=1)))
        eta = self.linear_predictor(x)
        return float(np.sum(-self.event * eta + np.exp(eta)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.layout.latent:
            return self.expected_gradient(x, self.responsibilities(x))
        w = np.exp(self.linear_predictor(x)) - self.event
        return np.concatenate([self.A.T @ w, self.Phi.T @ w])

    def hessian(self, x: np.ndarray) -> np.ndarray:
        if self.layout.latent:
            return self.marginal_hessian(x)
        X = self.X
        e = np.exp(self.linear_predictor(x))
        return X.T @ (X * e[:, None])

    def hessian_blocks(self, x: np.ndarray) -> HessianBlocks:
        return split_blocks(self.hessian(x), self.layout.k_count)

    # ── Latent gradient / Hessian ────────────────────────────────────────────

    def expected_gradient(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """E_r[∂S]: the marginal gradient when r is the posterior, the M-step gradient otherwise."""
        lay = self.layout
        _, e0, e1, sig = self.latent_terms(x)
        r0, r1 = r[self.subject, 0], r[self.subject, 1]
        w0 = r0 * (e0 - self.event)
        w1 = r1 * (e1 - self.event)
        g = np.zeros(lay.n_params)
        w = w0 + w1
        g[lay.theta] = self.A.T @ w
        g[lay.phi] = self.Phi.T @ w
        g[lay.kappa] = w1.sum()
        g[lay.beta] = self.baseline.T @ (sig - r[:, 1])
        return g

    def expected_hessian(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        lay = self.layout
        _, e0, e1, sig = self.latent_terms(x)
        v1 = r[self.subject, 1] * e1
        v = r[self.subject, 0] * e0 + v1
        X = self.X
        nx = X.shape[1]
        H = np.zeros((lay.n_params, lay.n_params))
        H[:nx, :nx] = X.T @ (X * v[:, None])
        H[:nx, lay.kappa] = H[lay.kappa, :nx] = X.T @ v1
        H[lay.kappa, lay.kappa] = v1.sum()
        B = self.baseline
        H[lay.beta, lay.beta] = B.T @ (B * (sig * (1.0 - sig))[:, None])
        return H

    def latent_score_gap(self, x: np.ndarray) -> np.ndarray:
        """Per-subject ∂S(Z=1) − ∂S(Z=0), shape (n, n_params)."""
        lay = self.layout
        _, e0, e1, _ = self.latent_terms(x)
        X = self.X
        n = self.n_subjects
        D = np.zeros((n, lay.n_params))
        D[:, :X.shape[1]] = self.subject_sum(X * (e1 - e0)[:, None])
        D[:, lay.kappa] = self.subject_sum(e1 - self.event)
        D[:, lay.beta] = -self.baseline
        return D

    def marginal_hessian(self, x: np.ndarray) -> np.ndarray:
        r = self.responsibilities(x)
        D = self.latent_score_gap(x)
        cov = D.T @ (D * (r[:, 0] * r[:, 1])[:, None])
        return self.expected_hessian(x, r) - cov

    def weighted_objective(self, x: np.ndarray, r: np.ndarray) -> float:
        """Σ_i Σ_Z r_i(Z)·S_i(Z) + penalty (fixed responsibilities)."""
        S, *_ = self.latent_terms(x)
        return float(np.sum(r * S)) + self.penalty_value(x)

    def weighted_gradient(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        return self.expected_gradient(x, r) + self.penalty * x

    def variational_bound(self, x: np.ndarray, r: np.ndarray) -> float:
        """Σ r·S + Σ r·ln r; equals the marginal NLL when r is the posterior."""
        S, *_ = self.latent_terms(x)
        return float(np.sum(r * S) + np.sum(xlogy(r, r)))

    # ── Regularized objective ────────────────────────────────────────────────

    def objective(self, x: np.ndarray) -> float:
        return self.nll(x) + self.penalty_value(x)

    def objective_and_gradient(self, x: np.ndarray):
        return self.objective(x), self.gradient(x) + self.penalty * x

    def regularized_hessian(self, x: np.ndarray) -> np.ndarray:
        return self.hessian(x) + np.diag(self.penalty)

    def initial_point(self) -> np.ndarray:
        """Zeros with the bias at the log crude event rate per row."""
        if self.n_events == 0:
            raise NoEventsError("no events in training split")
        x = np.zeros(self.layout.n_params)
        x[self.layout.bias] = np.log(self.n_events / len(self.event))
        return x


@dataclass(frozen=True, eq=False)
class FitResult:
    x: np.ndarray
    state: FitState
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    history: tuple[float, ...] = ()


def fit_hazard(design: HazardDesign, x0: np.ndarray | None = None, opt_cfg=None) -> FitResult:
    """Regularized ML fit of the non-latent model."""
    from services.optimizer import minimize

    if design.layout.latent:
        raise ValueError("latent designs are fitted by em_latent.em_fit")
    x0 = design.initial_point() if x0 is None else np.asarray(x0, dtype=float)
    result = minimize(design.objective_and_gradient, x0, opt_cfg)
    if not np.all(np.isfinite(result.x)):
        raise NonFiniteError("fit produced non-finite parameters", point=result.x)
    clips = design.diagnostics.get("eta_clips", 0)
    if clips:
        logger.warning(f"linear predictor clipped at ±{design.eta_clip} in {clips} row evaluations")
    return FitResult(x=result.x, state=design.layout.unpack(result.x), value=result.value,
                     grad_norm=result.grad_norm, iterations=result.iterations,
                     converged=result.converged, history=result.history)
