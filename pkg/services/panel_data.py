"""Discrete-time panel of subjects: validation, file I/O and normalization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse

from config import config
from constants import PANEL_FORMAT, PANEL_VERSION, RECORD_ROW, RECORD_SUBJECT
from services.errors import SchemaError, ZeroVarianceError

logger = logging.getLogger(__name__)

# Grid comparisons tolerate accumulated float error of this size (years).
GRID_EPS = 1e-9
BASELINE_PREFIX = "base_"


@dataclass(frozen=True, eq=False)
class SubjectPanel:
    subject_id: int
    t: np.ndarray             # (n_steps,) years since enrollment
    A: np.ndarray             # (n_steps, K) binary
    X: np.ndarray             # (n_steps, d) raw covariates
    censor_time: float
    event_time: float | None = None
    baseline_X0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_steps(self) -> int:
        return len(self.t)

    @property
    def has_event(self) -> bool:
        return self.event_time is not None

    @property
    def exit_time(self) -> float:
        if self.event_time is None:
            return self.censor_time
        return min(self.event_time, self.censor_time)


@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-covariate (mean, std) plus the same pair for elapsed time."""
    mean: np.ndarray
    std: np.ndarray
    t_mean: float = 0.0
    t_std: float = 1.0

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def apply_time(self, t: np.ndarray) -> np.ndarray:
        return (t - self.t_mean) / self.t_std


@dataclass(frozen=True, eq=False)
class PanelRows:
    """All (subject, timestep) rows stacked in subject order."""
    A: np.ndarray          # (N, K)
    X: np.ndarray          # (N, d) raw
    Z: np.ndarray          # (N, d+1) kernel inputs: normalized X, then elapsed time
    t: np.ndarray          # (N,)
    event: np.ndarray      # (N,) 1.0 on the step containing T_i
    subject: np.ndarray    # (N,) subject position 0..n-1
    first: np.ndarray      # (N,) True on t=0 rows
    offsets: np.ndarray    # (n+1,) row offsets per subject
    baseline: np.ndarray   # (n, p)

    @property
    def n_rows(self) -> int:
        return len(self.t)

    @property
    def n_subjects(self) -> int:
        return len(self.offsets) - 1

    @cached_property
    def aggregator(self) -> sparse.csr_matrix:
        """Sparse (n × N) matrix summing rows into subjects in fixed order."""
        n, N = self.n_subjects, self.n_rows
        return sparse.csr_matrix(
            (np.ones(N), (self.subject, np.arange(N))), shape=(n, N)
        )


@dataclass(frozen=True, eq=False)
class PanelDataset:
    subjects: tuple[SubjectPanel, ...]
    dt: float
    k_count: int
    d_count: int
    covariate_names: tuple[str, ...] = ()
    treatment_names: tuple[str, ...] = ()
    baseline_names: tuple[str, ...] = ()
    normalization: Normalization | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def p_count(self) -> int:
        return len(self.baseline_names)

    @property
    def n_rows(self) -> int:
        return sum(s.n_steps for s in self.subjects)

    @property
    def n_events(self) -> int:
        return sum(1 for s in self.subjects if s.has_event)

    @cached_property
    def rows(self) -> PanelRows:
        return stack_rows(self)

    def covariate_index(self, name: str) -> int:
        """Column of *name* in the kernel inputs (elapsed time is column d)."""
        from constants import ELAPSED_TIME
        if name == ELAPSED_TIME:
            return self.d_count
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"Unknown covariate '{name}'; have {list(self.covariate_names)}")

    def normalized_covariates(self) -> np.ndarray:
        return self.rows.Z[:, : self.d_count]

    def equals(self, other: "PanelDataset") -> bool:
        """Bit-exact comparison of every field."""
        if (self.dt != other.dt or self.k_count != other.k_count
                or self.d_count != other.d_count
                or self.covariate_names != other.covariate_names
                or self.treatment_names != other.treatment_names
                or self.baseline_names != other.baseline_names
                or self.n_subjects != other.n_subjects
                or dict(self.metadata) != dict(other.metadata)):
            return False
        if (self.normalization is None) != (other.normalization is None):
            return False
        if self.normalization is not None:
            a, b = self.normalization, other.normalization
            if not (np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)
                    and a.t_mean == b.t_mean and a.t_std == b.t_std):
                return False
        for s, o in zip(self.subjects, other.subjects):
            if (s.subject_id != o.subject_id or s.censor_time != o.censor_time
                    or s.event_time != o.event_time
                    or not np.array_equal(s.t, o.t)
                    or not np.array_equal(s.A, o.A)
                    or not np.array_equal(s.X, o.X)
                    or not np.array_equal(s.baseline_X0, o.baseline_X0)):
                return False
        return True


# ── Construction & validation ────────────────────────────────────────────────

def expected_steps(exit_time: float, dt: float) -> int:
    return int(math.floor(exit_time / dt + GRID_EPS)) + 1


def event_step(event_time: float, dt: float) -> int:
    """Index of the half-open interval [t, t+dt) that contains *event_time*."""
    return int(math.floor(event_time / dt + GRID_EPS))


def validate_subject(s: SubjectPanel, dt: float, k_count: int, d_count: int,
                     p_count: int) -> None:
    sid = s.subject_id
    if s.censor_time <= 0:
        raise SchemaError(f"subject {sid}: censor_time must be > 0, got {s.censor_time}")
    if s.event_time is not None and not (0 <= s.event_time <= s.censor_time + GRID_EPS):
        raise SchemaError(
            f"subject {sid}: event_time {s.event_time} outside [0, censor_time={s.censor_time}]"
        )
    if s.n_steps == 0:
        raise SchemaError(f"subject {sid}: no timesteps")
    if s.A.shape != (s.n_steps, k_count) or s.X.shape != (s.n_steps, d_count):
        raise SchemaError(f"subject {sid}: treatment/covariate shape mismatch")
    if len(s.baseline_X0) != p_count:
        raise SchemaError(f"subject {sid}: expected {p_count} baseline covariates")
    if abs(s.t[0]) > GRID_EPS:
        raise SchemaError(f"subject {sid}: first timestep must be t=0, got {s.t[0]}")
    steps = np.diff(s.t)
    if len(steps) and np.max(np.abs(steps - dt)) > 1e-6 * max(dt, 1.0):
        bad = int(np.argmax(np.abs(steps - dt))) + 1
        raise SchemaError(f"subject {sid}: non-uniform dt at row {bad} (t={s.t[bad]})")
    if not np.all(np.isin(s.A, (0, 1))):
        raise SchemaError(f"subject {sid}: treatment indicators must be 0/1")
    multi = np.flatnonzero(s.A.sum(axis=1) > 1)
    if len(multi):
        raise SchemaError(
            f"subject {sid}: simultaneous treatments at row {int(multi[0])} (t={s.t[multi[0]]})"
        )
    if not np.all(np.isfinite(s.X)):
        raise SchemaError(f"subject {sid}: non-finite covariate values")
    want = expected_steps(s.exit_time, dt)
    if s.n_steps != want:
        raise SchemaError(
            f"subject {sid}: {s.n_steps} timesteps but min(T, C)={s.exit_time} needs {want}"
        )


def make_dataset(subjects, dt: float, covariate_names, treatment_names,
                 baseline_names=(), metadata=None) -> PanelDataset:
    """Validate *subjects* and wrap them into an immutable dataset."""
    subjects = tuple(subjects)
    k_count, d_count = len(treatment_names), len(covariate_names)
    for s in subjects:
        validate_subject(s, dt, k_count, d_count, len(baseline_names))
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate subject ids")
    return PanelDataset(
        subjects=subjects, dt=float(dt), k_count=k_count, d_count=d_count,
        covariate_names=tuple(covariate_names), treatment_names=tuple(treatment_names),
        baseline_names=tuple(baseline_names), metadata=dict(metadata or {}),
    )


def stack_rows(ds: PanelDataset) -> PanelRows:
    lengths = np.array([s.n_steps for s in ds.subjects], dtype=int)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    N = int(offsets[-1])
    A = np.concatenate([s.A for s in ds.subjects]).astype(float) if N else np.zeros((0, ds.k_count))
    X = np.concatenate([s.X for s in ds.subjects]).astype(float) if N else np.zeros((0, ds.d_count))
    t = np.concatenate([s.t for s in ds.subjects]).astype(float) if N else np.zeros(0)
    subject = np.repeat(np.arange(ds.n_subjects), lengths)
    first = np.zeros(N, dtype=bool)
    first[offsets[:-1]] = True
    event = np.zeros(N)
    for i, s in enumerate(ds.subjects):
        if s.has_event:
            event[offsets[i] + event_step(s.event_time, ds.dt)] = 1.0
    norm = ds.normalization
    if norm is not None:
        Z = np.column_stack([norm.apply(X), norm.apply_time(t)])
    else:
        Z = np.column_stack([X, t])
    baseline = (np.vstack([s.baseline_X0 for s in ds.subjects]).astype(float)
                if ds.n_subjects and ds.p_count else np.zeros((ds.n_subjects, ds.p_count)))
    return PanelRows(A=A, X=X, Z=Z, t=t, event=event, subject=subject, first=first,
                     offsets=offsets, baseline=baseline)


# ── Normalization ────────────────────────────────────────────────────────────

def normalize_covariates(ds: PanelDataset) -> PanelDataset:
    """Store pooled (time-weighted) covariate means and population stds."""
    X = ds.rows.X
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for j in np.flatnonzero(~(std > 0)):
        name = ds.covariate_names[j] if j < len(ds.covariate_names) else str(j)
        raise ZeroVarianceError(f"covariate '{name}' has zero variance; drop the column")
    t = ds.rows.t
    t_std = float(t.std())
    norm = Normalization(mean=mean, std=std, t_mean=float(t.mean()),
                         t_std=t_std if t_std > 0 else 1.0)
    logger.info(f"Normalized {ds.d_count} covariates over {len(X)} rows")
    return apply_normalization(ds, norm)


def apply_normalization(ds: PanelDataset, normalization: Normalization) -> PanelDataset:
    """Attach existing (training) statistics without recomputing them."""
    return replace(ds, normalization=normalization)


# ── Subsetting & resampling ──────────────────────────────────────────────────

def subset(ds: PanelDataset, indices) -> PanelDataset:
    """Subjects at positions *indices*, keeping dt, names and normalization."""
    subjects = tuple(ds.subjects[int(i)] for i in indices)
    return replace(ds, subjects=subjects)


def resample_subjects(ds: PanelDataset, rng: np.random.Generator) -> PanelDataset:
    """Bootstrap by subject with replacement; drawn subjects get fresh ids."""
    picks = rng.integers(0, ds.n_subjects, size=ds.n_subjects)
    subjects = tuple(replace(ds.subjects[int(i)], subject_id=pos + 1)
                     for pos, i in enumerate(picks))
    return replace(ds, subjects=subjects)


# ── File I/O ─────────────────────────────────────────────────────────────────

def _columns(ds_names) -> list[str]:
    treatments, covariates, baseline = ds_names
    return (["record", "subject_id", "t", "censor_time", "event_time"]
            + list(treatments) + list(covariates)
            + [BASELINE_PREFIX + b for b in baseline])


def _fmt_vec(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_dataset(ds: PanelDataset, path) -> None:
    """Write the panel CSV with '#' metadata lines (bit-exact round trip)."""
    cols = _columns((ds.treatment_names, ds.covariate_names, ds.baseline_names))
    header = [
        f"# {PANEL_FORMAT} v{PANEL_VERSION}",
        f"# dt={ds.dt!r}",
        f"# treatments={','.join(ds.treatment_names)}",
        f"# covariates={','.join(ds.covariate_names)}",
        f"# baseline={','.join(ds.baseline_names)}",
    ]
    if ds.normalization is not None:
        n = ds.normalization
        header += [
            f"# normalization.mean={_fmt_vec(n.mean)}",
            f"# normalization.std={_fmt_vec(n.std)}",
            f"# normalization.time={n.t_mean!r},{n.t_std!r}",
        ]
    for key, value in sorted(ds.metadata.items()):
        header.append(f"# meta.{key}={value}")

    K, d, p = ds.k_count, ds.d_count, ds.p_count
    n_rows = ds.n_rows + ds.n_subjects
    table = np.full((n_rows, 3 + K + d + p), np.nan)
    record = np.empty(n_rows, dtype=object)
    sid = np.empty(n_rows, dtype=np.int64)
    pos = 0
    for s in ds.subjects:
        record[pos] = RECORD_SUBJECT
        sid[pos] = s.subject_id
        table[pos, 1] = s.censor_time
        if s.event_time is not None:
            table[pos, 2] = s.event_time
        table[pos, 3 + K + d:] = s.baseline_X0
        pos += 1
        m = s.n_steps
        record[pos:pos + m] = RECORD_ROW
        sid[pos:pos + m] = s.subject_id
        table[pos:pos + m, 0] = s.t
        table[pos:pos + m, 3:3 + K] = s.A
        table[pos:pos + m, 3 + K:3 + K + d] = s.X
        pos += m
    df = pd.DataFrame(table, columns=cols[2:])
    df.insert(0, "subject_id", sid)
    df.insert(0, "record", record)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(header) + "\n")
        df.to_csv(fh, index=False, float_format="%.17g", na_rep="")


def _read_header(path) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            else:
                meta.setdefault("_format", body)
    return meta


def _split_names(text: str) -> tuple[str, ...]:
    return tuple(p for p in text.split(",") if p) if text else ()


def load_dataset(path) -> PanelDataset:
    """Read and validate a panel file written by save_dataset (or by hand)."""
    if not Path(path).is_file():
        raise SchemaError(f"{path}: panel file not found")
    header = _read_header(path)
    fmt = header.get("_format", "")
    if fmt and not fmt.startswith(PANEL_FORMAT):
        raise SchemaError(f"{path}: not a {PANEL_FORMAT} file (header '{fmt}')")
    treatments = _split_names(header.get("treatments", ""))
    covariates = _split_names(header.get("covariates", ""))
    baseline = _split_names(header.get("baseline", ""))
    try:
        df = pd.read_csv(path, comment="#", float_precision="round_trip",
                         dtype={"record": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: unreadable panel file: {e}")
    if not treatments and not covariates:
        # Header-less file: infer from column names (A_* treatments, rest covariates).
        rest = [c for c in df.columns[5:] if not c.startswith(BASELINE_PREFIX)]
        treatments = tuple(c for c in rest if c.startswith("A"))
        covariates = tuple(c for c in rest if not c.startswith("A"))
        baseline = tuple(c[len(BASELINE_PREFIX):] for c in df.columns
                         if c.startswith(BASELINE_PREFIX))
    cols = _columns((treatments, covariates, baseline))
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")

    dt = float(header["dt"]) if "dt" in header else None
    subjects = []
    K = len(treatments)
    bcols = [BASELINE_PREFIX + b for b in baseline]
    for sid, grp in df.groupby("subject_id", sort=False):
        try:
            sid = int(sid)
        except (TypeError, ValueError):
            raise SchemaError(f"{path}: subject_id must be an integer, got {sid!r}")
        heads = grp[grp["record"] == RECORD_SUBJECT]
        body = grp[grp["record"] == RECORD_ROW]
        if len(heads) != 1:
            raise SchemaError(f"subject {sid}: expected exactly one '{RECORD_SUBJECT}' header line")
        if body.empty:
            raise SchemaError(f"subject {sid}: no timestep rows")
        head = heads.iloc[0]
        if body[list(treatments)].isna().any().any():
            raise SchemaError(f"subject {sid}: missing treatment indicator")
        X = body[list(covariates)]
        if X.iloc[0].isna().any():
            raise SchemaError(f"subject {sid}: covariates missing at t=0")
        X = X.ffill()  # carry last observation forward between recorded changes
        t = body["t"].to_numpy(dtype=float)
        if dt is None and len(t) > 1:
            dt = float(t[1] - t[0])
        A = body[list(treatments)].to_numpy(dtype=float)
        if not np.all(np.isin(A, (0.0, 1.0))):
            raise SchemaError(f"subject {sid}: treatment indicators must be 0/1")
        if K and A.sum(axis=1).max() > 1:
            row = int(np.argmax(A.sum(axis=1) > 1))
            raise SchemaError(f"subject {sid}: simultaneous treatments at row {row}")
        event = head["event_time"]
        subjects.append(SubjectPanel(
            subject_id=sid, t=t, A=A.astype(np.int8), X=X.to_numpy(dtype=float),
            censor_time=float(head["censor_time"]),
            event_time=None if pd.isna(event) else float(event),
            baseline_X0=head[bcols].to_numpy(dtype=float) if bcols else np.zeros(0),
        ))
    if dt is None:
        dt = config.DT
    metadata = {k[len("meta."):]: v for k, v in header.items() if k.startswith("meta.")}
    ds = make_dataset(subjects, dt, covariates, treatments, baseline, metadata)
    if "normalization.mean" in header:
        t_mean, t_std = (float(v) for v in header["normalization.time"].split(","))
        norm = Normalization(
            mean=np.array([float(v) for v in header["normalization.mean"].split(",") if v]),
            std=np.array([float(v) for v in header["normalization.std"].split(",") if v]),
            t_mean=t_mean, t_std=t_std,
        )
        if np.any(norm.std <= 0):
            raise SchemaError(f"{path}: normalization stds must be positive")
        ds = apply_normalization(ds, norm)
    logger.info(f"Loaded {ds.n_subjects} subjects ({ds.n_rows} rows, {ds.n_events} events) from {path}")
    return ds
