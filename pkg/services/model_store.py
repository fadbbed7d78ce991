"""JSON model files, nuisance bundles, evidence reports and estimate files.

Every document carries ``format`` and ``version``.  Bases are stored as kernel
spec + pivot anchors + pivot block; the factor for any rows is rebuilt from
those by the Nyström extension, so fitted f̂ can be evaluated on new data.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from constants import (
    BUNDLE_FORMAT, BUNDLE_VERSION, ESTIMATE_FORMAT, ESTIMATE_VERSION, EVIDENCE_FORMAT,
    EVIDENCE_VERSION, MODEL_FORMAT, MODEL_VERSION,
)
from services.errors import SchemaError
from services.hazard_likelihood import HessianBlocks, ParameterLayout
from services.kernel_engine import KernelSpec, LowRankBasis, MultiKernelModel
from services.panel_data import Normalization

logger = logging.getLogger(__name__)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path, document: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(document), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path, expected_format: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: cannot read JSON document: {e}")
    if doc.get("format") != expected_format:
        raise SchemaError(f"{path}: expected a {expected_format} document, got {doc.get('format')!r}")
    return doc


def write_table(path, table: pd.DataFrame) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.10g")


# ── Pieces ───────────────────────────────────────────────────────────────────

def kernel_to_dict(spec: KernelSpec) -> dict:
    return {"kind": spec.kind, "covariate_indices": list(spec.covariate_indices),
            "bandwidth": spec.bandwidth, "reg_lambda": spec.reg_lambda, "names": list(spec.names)}


def kernel_from_dict(doc: dict) -> KernelSpec:
    return KernelSpec(kind=doc["kind"], covariate_indices=tuple(doc["covariate_indices"]),
                      bandwidth=float(doc["bandwidth"]), reg_lambda=float(doc["reg_lambda"]),
                      names=tuple(doc.get("names", ())))


def basis_to_dict(basis: LowRankBasis) -> dict:
    return {"kernel": kernel_to_dict(basis.spec), "anchors": basis.anchors,
            "pivot_block": basis.pivot_block, "pinv_tol": basis.pinv_tol}


def basis_from_dict(doc: dict) -> LowRankBasis:
    spec = kernel_from_dict(doc["kernel"])
    anchors = np.asarray(doc["anchors"], dtype=float).reshape(-1, spec.dim)
    block = np.asarray(doc["pivot_block"], dtype=float).reshape(len(anchors), len(anchors))
    return LowRankBasis(spec=spec, anchors=anchors, pivot_block=block,
                        pivots=np.zeros(0, dtype=int), L=np.zeros((0, len(anchors))),
                        pinv_tol=float(doc.get("pinv_tol", 1e-10)))


def normalization_to_dict(norm: Normalization | None) -> dict | None:
    if norm is None:
        return None
    return {"mean": norm.mean, "std": norm.std, "t_mean": norm.t_mean, "t_std": norm.t_std}


def normalization_from_dict(doc: dict | None) -> Normalization | None:
    if doc is None:
        return None
    return Normalization(mean=np.asarray(doc["mean"], float), std=np.asarray(doc["std"], float),
                         t_mean=float(doc["t_mean"]), t_std=float(doc["t_std"]))


def blocks_to_dict(blocks: HessianBlocks | None) -> dict | None:
    if blocks is None:
        return None
    return {"H_tt": blocks.H_tt, "H_tf": blocks.H_tf, "H_ff": blocks.H_ff}


# ── Model file ───────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class StoredModel:
    model: MultiKernelModel
    layout: ParameterLayout
    bases: tuple[LowRankBasis, ...]
    x: np.ndarray
    normalization: Normalization | None
    covariate_names: tuple[str, ...]
    treatment_names: tuple[str, ...]
    log_bme: float | None
    responsibilities: np.ndarray | None = None   # (n_subjects, 2) for latent fits
    subject_ids: tuple[int, ...] = ()

    @property
    def theta(self) -> np.ndarray:
        return self.x[self.layout.theta]

    def f_values(self, Z: np.ndarray) -> np.ndarray:
        """f̂ (bias included) on normalized kernel-input rows."""
        f = np.full(len(Z), self.x[self.layout.bias])
        for k, b in enumerate(self.bases):
            f += b.extend(Z) @ self.x[self.layout.u_slice(k)]
        return f


def save_model(path, report, ds) -> None:
    """Write a fitted EvidenceReport together with the data's naming and scaling."""
    lay = report.design.layout
    doc = {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "name": report.model.name,
        "latent": report.model.latent_block,
        "include_elapsed_time_kernel": report.model.include_elapsed_time_kernel,
        "kernels": [kernel_to_dict(k) for k in report.model.kernels],
        "hyperparams": report.hyperparams,
        "layout": {"k_count": lay.k_count, "block_dims": list(lay.block_dims),
                   "p_count": lay.p_count},
        "bases": [basis_to_dict(b) for b in report.bases],
        "x": report.x,
        "log_bme": report.log_bme,
        "converged": report.converged,
        "normalization": normalization_to_dict(ds.normalization),
        "covariate_names": list(ds.covariate_names),
        "treatment_names": list(ds.treatment_names),
    }
    if lay.latent:
        doc["kappa"] = report.fitted.kappa
        doc["beta"] = report.fitted.beta
        doc["subject_ids"] = [s.subject_id for s in ds.subjects]
        doc["responsibilities"] = report.design.responsibilities(report.x)
    write_json(path, doc)
    logger.info(f"model '{report.model.name}' written to {path}")


def load_model(path) -> StoredModel:
    doc = read_json(path, MODEL_FORMAT)
    if doc.get("version") != MODEL_VERSION:
        raise SchemaError(f"{path}: unsupported model version {doc.get('version')}")
    kernels = tuple(kernel_from_dict(k) for k in doc["kernels"])
    model = MultiKernelModel(kernels=kernels,
                             include_elapsed_time_kernel=bool(doc["include_elapsed_time_kernel"]),
                             latent_block=bool(doc["latent"]), name=doc["name"])
    lay = doc["layout"]
    layout = ParameterLayout(k_count=int(lay["k_count"]), block_dims=tuple(lay["block_dims"]),
                             latent=model.latent_block, p_count=int(lay["p_count"]))
    x = np.asarray(doc["x"], dtype=float)
    if len(x) != layout.n_params:
        raise SchemaError(f"{path}: parameter vector has {len(x)} entries, layout needs "
                          f"{layout.n_params}")
    return StoredModel(
        model=model, layout=layout, bases=tuple(basis_from_dict(b) for b in doc["bases"]),
        x=x, normalization=normalization_from_dict(doc.get("normalization")),
        covariate_names=tuple(doc["covariate_names"]),
        treatment_names=tuple(doc["treatment_names"]), log_bme=doc.get("log_bme"),
        responsibilities=(np.asarray(doc["responsibilities"], dtype=float)
                          if doc.get("responsibilities") is not None else None),
        subject_ids=tuple(int(s) for s in doc.get("subject_ids", ())),
    )


# ── Evidence, bundle, estimate ───────────────────────────────────────────────

def evidence_document(report, audit=None) -> dict:
    doc = {
        "format": EVIDENCE_FORMAT, "version": EVIDENCE_VERSION,
        "model": report.model.name,
        "kernels": [k.label for k in report.model.kernels],
        "log_bme": report.log_bme,
        "hyperparams": report.hyperparams,
        "hessian_logdet": report.hessian_logdet,
        "converged": report.converged,
        "theta_hat": report.fitted.theta,
    }
    if report.em is not None:
        doc["em"] = {"iterations": report.em.iterations, "converged": report.em.converged,
                     "kappa": report.fitted.kappa, "small_kappa": report.em.small_kappa,
                     "trace": report.em.trace}
    if audit is not None:
        doc["audit"] = {"log_bayes_factor": audit.log_bayes_factor, "violated": audit.violated,
                        "base_log_bme": audit.base.log_bme,
                        "augmented_log_bme": audit.augmented.log_bme,
                        "augmented_hyperparams": audit.augmented.hyperparams}
    return doc


def save_evidence(path, report, audit=None) -> None:
    write_json(path, evidence_document(report, audit))


def bundle_document(plan, folds, route: str, tuning: dict | None = None) -> dict:
    fold_docs = []
    for f in folds:
        g_docs = {
            str(k + 1): {"zeta": g.zeta, "log_bme": g.log_bme, "trivial": g.trivial, "x": g.x,
                         "bases": [basis_to_dict(b) for b in g.bases]}
            for k, g in sorted(f.g_hats.items())
        }
        fold_docs.append({
            "fold_index": f.fold_index,
            "n_train": f.train.n_subjects, "n_val": f.val.n_subjects,
            "n_holdout": f.holdout.n_subjects,
            "theta_hat": f.theta_hat,
            "kappa_hat": f.state.kappa,
            "zeta": f.zeta,
            "hessian_train": blocks_to_dict(f.hessian_train),
            "hessian_val": blocks_to_dict(f.hessian_val),
            "em_trace": list(f.em_trace),
            "g": g_docs,
        })
    return {
        "format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "route": route,
        "M": plan.M, "seed": plan.seed, "assignments": plan.assignments,
        "tuning": {name: table.to_dict(orient="records") for name, table in (tuning or {}).items()},
        "folds": fold_docs,
    }


def save_bundle(path, plan, folds, route: str, tuning: dict | None = None) -> None:
    write_json(path, bundle_document(plan, folds, route, tuning))


def estimate_document(name: str, est, treatment_names=()) -> dict:
    t = est.t_stats()
    return {
        "format": ESTIMATE_FORMAT, "version": ESTIMATE_VERSION,
        "estimator": name, "route": est.route,
        "treatments": list(treatment_names),
        "n_subjects": est.n_subjects,
        "theta_bar": est.theta_bar, "se": est.se, "sigma_hat": est.sigma_hat,
        "theta_star": est.theta_star, "t_stats": t,
        "zeta": est.zeta, "diagnostics": est.diagnostics,
    }


def save_estimates(path, estimates: dict, treatment_names=()) -> None:
    """One document holding every estimator that ran: {"estimates": {name: ...}}."""
    doc = {"format": ESTIMATE_FORMAT, "version": ESTIMATE_VERSION,
           "estimates": {name: estimate_document(name, est, treatment_names)
                         for name, est in estimates.items()}}
    write_json(path, doc)
