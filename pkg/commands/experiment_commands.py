"""experiment: replicate simulations and collect t-statistics per estimator."""
import logging

from commands.options import (
    UsageError, add_model_args, add_nuisance_args, add_runtime_args, output_dir,
    settings_from_args,
)
from commands.simulate_commands import add_sim_args, sim_config
from constants import ALL_ESTIMATORS, EST_DEBIAS_G, EST_DEBIAS_H, EST_DEBIAS_LATENT, EST_NAIVE
from services.model_store import write_table
from services.sim_dgp import replicate_experiment
from utils import fmt_float

logger = logging.getLogger(__name__)

DEFAULT_REFERENCE = {1: "correct", 2: "latent"}
DEFAULT_ESTIMATORS = {
    False: (EST_NAIVE, EST_DEBIAS_H, EST_DEBIAS_G),
    True: (EST_NAIVE, EST_DEBIAS_LATENT),
}


def _estimators(args, latent: bool) -> tuple[str, ...]:
    if not args.estimators:
        return DEFAULT_ESTIMATORS[latent]
    names = tuple(n.strip() for n in args.estimators.split(",") if n.strip())
    unknown = [n for n in names if n not in ALL_ESTIMATORS]
    if unknown:
        raise UsageError(f"unknown estimator(s) {unknown}; choose from {list(ALL_ESTIMATORS)}")
    return names


def cmd_experiment(args) -> dict:
    if args.replicates is None or args.replicates < 1:
        raise UsageError("--replicates must be a positive integer")
    cfg = sim_config(args)
    if not args.model and not args.reference:
        args.reference = DEFAULT_REFERENCE[cfg.dgp]
    settings = settings_from_args(args, theta_star=cfg.theta_star)
    estimators = _estimators(args, settings.latent)

    table, summary, hist = replicate_experiment(cfg, args.replicates, estimators, settings,
                                                n_jobs=settings.n_jobs)
    out = output_dir(args)
    outputs = [out / "t_table.csv", out / "summary.csv", out / "histogram.csv"]
    write_table(outputs[0], table)
    with open(outputs[1], "w") as fh:
        fh.write(f"# replicates={args.replicates}\n")
        summary.to_csv(fh, index=False, float_format="%.10g")
    write_table(outputs[2], hist)

    lines = [f"{r.estimator} arm {r.arm}: mean t {fmt_float(r.mean_t, 3)}, "
             f"sd t {fmt_float(r.std_t, 3)} ({r.succeeded}/{r.replicates})"
             for r in summary.itertuples()]
    return {"success": True,
            "message": "\n".join(lines) or "no estimator succeeded on any replicate",
            "outputs": [str(p) for p in outputs]}


def register_commands(subparsers) -> None:
    p = subparsers.add_parser("experiment", help="replicate experiment on a simulated cohort")
    add_sim_args(p)
    p.add_argument("--replicates", type=int, help="number of replicates")
    p.add_argument("--estimators",
                   help="comma list from naive_ml, debias_H, debias_g, debias_latent")
    add_model_args(p)
    add_nuisance_args(p, with_route=False)
    p.add_argument("--out-dir", help="directory for result files")
    add_runtime_args(p)
    p.set_defaults(handler=cmd_experiment)
