"""Synthetic cohorts with drug exposure, two comorbidities and a monthly outcome.

Subjects are simulated month by month.  Within month m (t = m·Δ) the order is:
drug decision, treatment flags, outcome draw, then onset draws that take
effect at t + Δ.  An event at month m sets T = t and ends the panel on that
row; otherwise the panel runs to the last grid point ≤ C.

Every subject owns independent counter-based streams keyed by
(replicate, subject, process), so a dataset does not depend on the order or
the number of workers that produce it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import expit

from config import config
from constants import ALL_ESTIMATORS
from services.errors import HazardError
from services.panel_data import PanelDataset, SubjectPanel, expected_steps, make_dataset

logger = logging.getLogger(__name__)

TREATMENT_NAMES = ("A1", "A2")
BASE_COVARIATES = ("age", "date", "x1", "x2")
TEST_NAMES = ("test1", "test2", "test3")

# Stream ids inside a subject's key.
PROC_BASELINE, PROC_DRUG, PROC_EVENT, PROC_COND1, PROC_COND2, PROC_LATENT = range(6)

SHORT_SPELL_MONTHS = 18
COND1_RATE = 0.025
DRUG_STOP = 0.01
COND2_BASE = 0.05
COND2_DRUG = 0.05
COND2_DECAY = 3.0

T_BINS = np.arange(-6.0, 6.5, 0.5)


@dataclass(frozen=True)
class Sim1Config:
    n_subjects: int = 2000
    P2: float = 1.0
    seed: int = 0
    theta_star: tuple[float, float] = (1.0, 2.0)
    dt: float = field(default_factory=lambda: config.DT)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if not math.isfinite(self.P2):
            raise ValueError(f"P2 must be finite, got {self.P2}")

    @property
    def dgp(self) -> int:
        return 1


@dataclass(frozen=True)
class Sim2Config(Sim1Config):
    P2: float = 0.5
    kappa_star: float = 3.0
    sigma_test: tuple[float, float, float] = (2.0, 1.0, 4.0)
    beta_star: tuple[float, float, float, float] = (-0.5, 1.0, 0.0, 0.0)   # (β0, β1, β2, β3)

    @property
    def dgp(self) -> int:
        return 2

    @property
    def beta_layout(self) -> np.ndarray:
        """β* in parameter-layout order (β1..β3, β0)."""
        return np.array(self.beta_star[1:] + self.beta_star[:1], dtype=float)


def subject_rng(seed: int, replicate: int, subject: int, proc: int) -> Generator:
    return Generator(Philox(SeedSequence(seed, spawn_key=(replicate, subject, proc))))


def monthly_event_rate(A1, A2, age, date, x1, x2, theta_star=(1.0, 2.0), P2=1.0,
                       kappa_w=0.0):
    """Outcome risk per month."""
    log_rate = (-7.0 + theta_star[0] * A1 + theta_star[1] * A2 + 0.04 * age
                + 0.2 * np.sin(np.pi * date / 8.0) - 0.2 * np.cos(np.pi * date / 6.0)
                + 2.0 * x1 * np.exp(-x1 / 1.5) + P2 * (1.0 - np.exp(-x2 / 2.5)) + kappa_w)
    return np.exp(log_rate) / 12.0


def drug_start_probability(x1):
    return 0.004 + 0.2 * x1 * np.exp(-x1 / 0.6) / 0.6 ** 2


def memory_increment(dt: float) -> float:
    """Contribution of one drug month to the condition-2 memory, at lag one month."""
    return (1.0 - math.exp(-COND2_DECAY * dt)) / COND2_DECAY


def _simulate_subject(cfg: Sim1Config, replicate: int, index: int):
    """Returns (SubjectPanel, W or None, probability clip count)."""
    dt = cfg.dt
    base = subject_rng(cfg.seed, replicate, index, PROC_BASELINE)
    age0 = base.uniform(50.0, 75.0)
    date0 = base.uniform(2000.0, 2005.0)
    C = base.uniform(5.0, 10.0)
    latent = isinstance(cfg, Sim2Config)
    tests = np.zeros(0)
    w, kappa_w = None, 0.0
    if latent:
        tests = base.normal(0.0, np.asarray(cfg.sigma_test, dtype=float))
        b = cfg.beta_star
        p_w = expit(b[0] + float(np.dot(b[1:], tests)))
        w = int(subject_rng(cfg.seed, replicate, index, PROC_LATENT).uniform() < p_w)
        kappa_w = cfg.kappa_star * w

    n_max = expected_steps(C, dt)
    u = {proc: subject_rng(cfg.seed, replicate, index, proc).uniform(size=n_max)
         for proc in (PROC_DRUG, PROC_EVENT, PROC_COND1, PROC_COND2)}

    decay = math.exp(-COND2_DECAY * dt)
    step = memory_increment(dt)
    on1 = on2 = None    # onset month index
    drug, spell, mem = False, 0, 0.0
    history: list[bool] = []
    rows_A, rows_X, event_time, clips = [], [], None, 0
    for m in range(n_max):
        t = m * dt
        x1 = (m - on1) * dt if on1 is not None else 0.0
        x2 = (m - on2) * dt if on2 is not None else 0.0
        if drug:
            drug = not (u[PROC_DRUG][m] < DRUG_STOP)
        else:
            drug = bool(u[PROC_DRUG][m] < drug_start_probability(x1))
        spell = spell + 1 if drug else 0
        history.append(drug)
        a1 = 1 if drug and spell <= SHORT_SPELL_MONTHS else 0
        a2 = 1 if drug and spell > SHORT_SPELL_MONTHS else 0
        mem = mem * decay + (step if m >= 2 and history[m - 2] else 0.0)

        rows_A.append((a1, a2))
        rows_X.append((age0 + t, date0 + t, x1, x2, *tests))
        rate = float(monthly_event_rate(a1, a2, age0 + t, date0 + t, x1, x2,
                                        cfg.theta_star, cfg.P2, kappa_w))
        if rate > 1.0:
            clips += 1
        if u[PROC_EVENT][m] < min(rate, 1.0):
            event_time = t
            break
        if on1 is None and u[PROC_COND1][m] < COND1_RATE:
            on1 = m + 1
        p2 = COND2_BASE + COND2_DRUG * mem
        if p2 > 1.0:
            clips += 1
        if on2 is None and u[PROC_COND2][m] < min(p2, 1.0):
            on2 = m + 1

    n = len(rows_A)
    panel = SubjectPanel(
        subject_id=index + 1, t=np.arange(n) * dt, A=np.array(rows_A, dtype=float),
        X=np.array(rows_X, dtype=float), censor_time=C, event_time=event_time,
        baseline_X0=tests,
    )
    return panel, w, clips


def _simulate(cfg: Sim1Config, replicate: int) -> tuple[PanelDataset, np.ndarray | None]:
    out = [_simulate_subject(cfg, replicate, i) for i in range(cfg.n_subjects)]
    latent = isinstance(cfg, Sim2Config)
    clips = sum(c for _, _, c in out)
    if clips:
        logger.warning(f"monthly probabilities clipped to 1 on {clips} subject-months")
    covariates = BASE_COVARIATES + (TEST_NAMES if latent else ())
    meta = {f"sim.{k}": v for k, v in asdict(cfg).items()}
    meta.update({"sim.dgp": cfg.dgp, "sim.replicate": replicate, "sim.prob_clips": clips})
    ds = make_dataset(
        [p for p, _, _ in out], cfg.dt, covariates, TREATMENT_NAMES,
        baseline_names=TEST_NAMES if latent else (),
        metadata={k: _meta_text(v) for k, v in meta.items()},
    )
    w = np.array([x for _, x, _ in out], dtype=int) if latent else None
    logger.info(f"simulated dgp {cfg.dgp} replicate {replicate}: {ds.n_subjects} subjects, "
                f"{ds.n_events} events")
    return ds, w


def _meta_text(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def simulate_1(cfg: Sim1Config, replicate: int = 0) -> PanelDataset:
    ds, _ = _simulate(cfg, replicate)
    return ds


def simulate_2(cfg: Sim2Config, replicate: int = 0) -> tuple[PanelDataset, np.ndarray]:
    """Dataset plus the hidden risk group W of every subject (never in the panel)."""
    return _simulate(cfg, replicate)


def simulate(cfg: Sim1Config, replicate: int = 0) -> tuple[PanelDataset, np.ndarray | None]:
    return _simulate(cfg, replicate)


def save_hidden_w(path, ds: PanelDataset, w: np.ndarray) -> None:
    frame = pd.DataFrame({"subject_id": [s.subject_id for s in ds.subjects], "W": w})
    frame.to_csv(path, index=False)


def load_hidden_w(path) -> np.ndarray:
    return pd.read_csv(path)["W"].to_numpy(dtype=int)


# ── Replicate experiments ────────────────────────────────────────────────────

def _replicate(cfg, replicate, estimators, settings):
    from services.pipeline_service import estimate

    records = []
    try:
        ds, _ = simulate(cfg, replicate)
        results = estimate(ds, settings, estimators)
    except (HazardError, np.linalg.LinAlgError, ValueError) as e:
        logger.warning(f"replicate {replicate} failed: {e}")
        return [{"replicate": replicate, "estimator": name, "arm": None, "error": str(e)}
                for name in estimators]
    for name in estimators:
        est = results.get(name)
        if isinstance(est, Exception) or est is None:
            records.append({"replicate": replicate, "estimator": name, "arm": None,
                            "error": str(est)})
            continue
        t = est.t_stats(cfg.theta_star)
        for k in range(len(est.theta_bar)):
            records.append({
                "replicate": replicate, "estimator": name, "arm": k + 1,
                "theta": est.theta_bar[k], "se": est.se[k], "theta_star": cfg.theta_star[k],
                "t": t[k], "error": "",
            })
    logger.info(f"replicate {replicate} finished")
    return records


def summarize_t(table: pd.DataFrame, n_replicates: int) -> pd.DataFrame:
    ok = table[table["error"] == ""]
    rows = []
    for (name, arm), part in ok.groupby(["estimator", "arm"], sort=True):
        rows.append({
            "estimator": name, "arm": int(arm), "replicates": n_replicates,
            "succeeded": len(part),
            "failed": n_replicates - len(part),
            "mean_t": part["t"].mean(), "std_t": part["t"].std(ddof=1),
            "mean_theta": part["theta"].mean(), "mean_se": part["se"].mean(),
        })
    return pd.DataFrame.from_records(rows)


def t_histogram(table: pd.DataFrame, bins=T_BINS) -> pd.DataFrame:
    """Counts of t per (estimator, arm) over fixed bins; out-of-range values go to the edges."""
    ok = table[table["error"] == ""]
    frames = []
    for (name, arm), part in ok.groupby(["estimator", "arm"], sort=True):
        t = np.clip(part["t"].to_numpy(dtype=float), bins[0], bins[-1])
        counts, edges = np.histogram(t, bins=bins)
        frames.append(pd.DataFrame({"estimator": name, "arm": int(arm), "bin_low": edges[:-1],
                                    "bin_high": edges[1:], "count": counts}))
    if not frames:
        return pd.DataFrame(columns=["estimator", "arm", "bin_low", "bin_high", "count"])
    return pd.concat(frames, ignore_index=True)


def replicate_experiment(cfg: Sim1Config, n_replicates: int, estimators, settings,
                         n_jobs: int | None = None):
    """Per-replicate t table, per-estimator summary and t histogram."""
    estimators = tuple(estimators)
    unknown = [e for e in estimators if e not in ALL_ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimators {unknown}; choose from {ALL_ESTIMATORS}")
    if n_replicates < 1:
        raise ValueError(f"n_replicates must be >= 1, got {n_replicates}")
    chunks = Parallel(n_jobs=n_jobs or config.N_JOBS)(
        delayed(_replicate)(cfg, r, estimators, settings) for r in range(n_replicates)
    )
    table = pd.DataFrame.from_records([rec for chunk in chunks for rec in chunk])
    for col in ("theta", "se", "theta_star", "t"):
        if col not in table:
            table[col] = np.nan
    failed = table.loc[table["error"] != "", "replicate"].nunique()
    if failed:
        logger.warning(f"{failed} of {n_replicates} replicates had failures and were excluded")
    return table, summarize_t(table, n_replicates), t_histogram(table)
