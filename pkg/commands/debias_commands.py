"""nuisance, debias and pipeline: Steps 2 and 3 with their result files."""
import logging
from dataclasses import replace

from commands.options import (
    add_data_arg, add_model_args, add_nuisance_args, add_runtime_args, output_dir, read_data,
    route_of, settings_from_args,
)
from constants import ESTIMATOR_ROUTE, EST_NAIVE
from services.debias_scores import naive_estimate
from services.errors import HazardError
from services.model_store import save_bundle, save_estimates, save_evidence, save_model, write_table
from services.pipeline_service import prepare, run_step1, run_step2, run_step3
from utils import fmt_estimate

logger = logging.getLogger(__name__)

ROUTE_ESTIMATOR = {route: name for name, route in ESTIMATOR_ROUTE.items() if route is not None}


class StageError(HazardError):
    """A pipeline stage failed; wraps the original error with the stage name."""

    def __init__(self, stage: str, error: HazardError):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.exit_code = error.exit_code


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except HazardError as e:
        raise StageError(name, e) from e


def _write_tuning(out, nuisance) -> list:
    paths = []
    for name, table in nuisance.tuning.items():
        path = out / f"tuning_{name}.csv"
        write_table(path, table)
        paths.append(path)
    return paths


def _estimate_text(est, names) -> str:
    return "; ".join(f"{n}: {fmt_estimate(t, s)}" for n, t, s in zip(names, est.theta_bar, est.se))


def cmd_nuisance(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    route = route_of(args)
    report, _ = _stage("step 1: model", run_step1, ds, settings)
    nuisance = _stage("step 2: nuisance", run_step2, ds, report, settings, route)
    out = output_dir(args)
    path = out / "nuisance.json"
    save_bundle(path, nuisance.plan, nuisance.folds, route, nuisance.tuning)
    outputs = [path] + _write_tuning(out, nuisance)
    zetas = ", ".join(f"{k}={v:g}" for k, v in nuisance.zetas.items())
    return {"success": True,
            "message": f"{nuisance.plan.M} folds fitted for the {route} route ({zetas})",
            "outputs": [str(p) for p in outputs]}


def cmd_debias(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    route = route_of(args)
    report, _ = _stage("step 1: model", run_step1, ds, settings)
    nuisance = _stage("step 2: nuisance", run_step2, ds, report, settings, route)
    est = _stage("step 3: debias", run_step3, nuisance, settings)
    naive = _stage("step 3: debias", naive_estimate, report, settings.theta_star)
    out = output_dir(args)
    path = out / "estimate.json"
    save_estimates(path, {ROUTE_ESTIMATOR[route]: est, EST_NAIVE: naive}, ds.treatment_names)
    return {"success": True, "message": _estimate_text(est, ds.treatment_names),
            "theta_bar": est.theta_bar.tolist(), "se": est.se.tolist(), "outputs": [str(path)]}


def cmd_pipeline(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    tune = not args.no_tune and settings.hyperparams is None
    settings = replace(settings, audit=not args.no_audit, tune=tune)
    route = route_of(args)
    report, audit = _stage("step 1: model selection", run_step1, ds, settings)
    nuisance = _stage("step 2: nuisance", run_step2, ds, report, settings, route)
    est = _stage("step 3: debias", run_step3, nuisance, settings)
    naive = _stage("step 3: debias", naive_estimate, report, settings.theta_star)

    out = output_dir(args)
    outputs = [out / "evidence.json", out / "model.json", out / "nuisance.json",
               out / "estimate.json"]
    save_evidence(outputs[0], report, audit)
    save_model(outputs[1], report, ds)
    save_bundle(outputs[2], nuisance.plan, nuisance.folds, route, nuisance.tuning)
    save_estimates(outputs[3], {ROUTE_ESTIMATOR[route]: est, EST_NAIVE: naive}, ds.treatment_names)
    if report.grid is not None:
        outputs.append(out / "grid.csv")
        write_table(outputs[-1], report.grid)
    outputs += _write_tuning(out, nuisance)
    message = _estimate_text(est, ds.treatment_names)
    if audit is not None and audit.violated:
        message += f" (time homogeneity violated: log BF {audit.log_bayes_factor:.3f})"
    return {"success": True, "message": message, "theta_bar": est.theta_bar.tolist(),
            "se": est.se.tolist(), "outputs": [str(p) for p in outputs]}


def _common(p) -> None:
    add_data_arg(p)
    add_model_args(p)
    add_nuisance_args(p)
    p.add_argument("--out-dir", help="directory for result files")
    add_runtime_args(p)


def register_commands(subparsers) -> None:
    p = subparsers.add_parser("nuisance", help="Step 2: cross-fitted nuisances, written as a bundle")
    _common(p)
    p.set_defaults(handler=cmd_nuisance)

    p = subparsers.add_parser("debias", help="Steps 2-3 at given hyperparameters")
    _common(p)
    p.set_defaults(handler=cmd_debias)

    p = subparsers.add_parser("pipeline", help="Steps 1-3 with evidence audit and all result files")
    _common(p)
    p.add_argument("--no-audit", action="store_true", default=None,
                   help="skip the time-homogeneity audit")
    p.add_argument("--no-tune", action="store_true", default=None,
                   help="fit at default or --hp hyperparameters instead of the evidence grid search")
    p.set_defaults(handler=cmd_pipeline)
