"""fit, evidence and audit: Step 1 of the pipeline on its own."""
import logging

from commands.options import (
    UsageError, add_data_arg, add_model_args, add_runtime_args, output_dir, read_data,
    settings_from_args,
)
from services.kernel_engine import build_model
from services.model_evidence import (
    bootstrap_log_bayes_factors, fit_model, grid_search, time_homogeneity_audit,
)
from services.model_store import save_evidence, save_model, write_table
from services.pipeline_service import (
    REFERENCE_MODELS, build_run_model, em_config, kernel_input_names, prepare, run_step1,
)
from utils import fmt_float

logger = logging.getLogger(__name__)


def _theta_text(report) -> str:
    return ", ".join(fmt_float(v) for v in report.fitted.theta)


def cmd_fit(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    report, _ = run_step1(ds, settings)
    out = output_dir(args)
    outputs = [out / "model.json", out / "evidence.json"]
    save_model(outputs[0], report, ds)
    save_evidence(outputs[1], report)
    if report.grid is not None:
        outputs.append(out / "grid.csv")
        write_table(outputs[-1], report.grid)
    return {
        "success": True,
        "message": f"{report.model.name}: log BME {fmt_float(report.log_bme)}, θ̂ = [{_theta_text(report)}]",
        "log_bme": report.log_bme,
        "outputs": [str(p) for p in outputs],
    }


def _other_model(args, ds):
    if args.against and args.against_reference:
        raise UsageError("give --against or --against-reference, not both")
    if args.against_reference:
        text, latent = REFERENCE_MODELS[args.against_reference]
        return build_model(text, kernel_input_names(ds), name=args.against_reference, latent=latent)
    if args.against:
        return build_model(args.against, kernel_input_names(ds), name="against")
    return None


def cmd_evidence(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    report, _ = run_step1(ds, settings)
    out = output_dir(args)
    outputs = [out / "evidence.json"]
    save_evidence(outputs[0], report)
    result = {"success": True, "log_bme": report.log_bme,
              "message": f"{report.model.name}: log BME {fmt_float(report.log_bme)}"}
    other = _other_model(args, ds)
    if other is not None:
        cfg = em_config(settings) if other.latent_block else None
        if settings.tune:
            b = grid_search(ds, other, settings.n_jobs, cfg)
        else:
            b = fit_model(ds, other, settings.hyperparams, cfg)
        log_bf = report.log_bme - b.log_bme
        result["log_bayes_factor"] = log_bf
        result["message"] += f"; log BF vs {other.name} {fmt_float(log_bf)}"
        if args.bootstrap:
            model = build_run_model(ds, settings)
            table = bootstrap_log_bayes_factors(
                ds, model, other, n_boot=args.bootstrap, seed=args.boot_seed or 0,
                hp_a=report.hyperparams, hp_b=b.hyperparams, tune=settings.tune,
                n_jobs=settings.n_jobs, em_cfg=cfg,
            )
            outputs.append(out / "bootstrap_log_bf.csv")
            write_table(outputs[-1], table)
            wins = int((table["log_bf"] > 0).sum())
            result["message"] += f"; bootstrap: {wins}/{len(table)} replicates favour {report.model.name}"
    if report.grid is not None:
        outputs.append(out / "grid.csv")
        write_table(outputs[-1], report.grid)
    result["outputs"] = [str(p) for p in outputs]
    return result


def cmd_audit(args) -> dict:
    ds = prepare(read_data(args))
    settings = settings_from_args(args)
    model = build_run_model(ds, settings)
    em_cfg = em_config(settings) if model.latent_block else None
    audit = time_homogeneity_audit(ds, model, settings.hyperparams, tune=settings.tune,
                                   n_jobs=settings.n_jobs, em_cfg=em_cfg)
    out = output_dir(args)
    path = out / "audit.json"
    save_evidence(path, audit.base, audit)
    verdict = "violated" if audit.violated else "not violated"
    return {
        "success": True,
        "message": f"time homogeneity {verdict} for {model.name}: "
                   f"log BF(+time) {fmt_float(audit.log_bayes_factor)}",
        "log_bayes_factor": audit.log_bayes_factor,
        "violated": audit.violated,
        "outputs": [str(path)],
    }


def _common(p) -> None:
    add_data_arg(p)
    add_model_args(p)
    p.add_argument("--out-dir", help="directory for result files")
    add_runtime_args(p)


def register_commands(subparsers) -> None:
    p = subparsers.add_parser("fit", help="fit one model and write the model file")
    _common(p)
    p.set_defaults(handler=cmd_fit)

    p = subparsers.add_parser("evidence", help="Laplace evidence, optionally against a second model")
    _common(p)
    p.add_argument("--against", help="second model (kernel text) for a log Bayes factor")
    p.add_argument("--against-reference", choices=sorted(REFERENCE_MODELS),
                   help="second model from the reference set")
    p.add_argument("--bootstrap", type=int, help="subject-level bootstrap replicates of the log BF")
    p.add_argument("--boot-seed", type=int, help="bootstrap seed")
    p.set_defaults(handler=cmd_evidence)

    p = subparsers.add_parser("audit", help="time-homogeneity audit (model + elapsed-time kernel)")
    _common(p)
    p.set_defaults(handler=cmd_audit)
