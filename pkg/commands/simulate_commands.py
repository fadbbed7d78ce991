"""simulate: synthetic cohorts from the two reference data-generating processes."""
import logging
from pathlib import Path

from commands.options import UsageError, add_runtime_args, require
from services.panel_data import save_dataset
from services.sim_dgp import Sim1Config, Sim2Config, save_hidden_w, simulate

logger = logging.getLogger(__name__)


def sim_config(args):
    """Sim1Config / Sim2Config from --dgp, --n, --p2, --kappa and --seed."""
    require(args, "dgp", "seed")
    kw = {"seed": args.seed}
    if args.n is not None:
        kw["n_subjects"] = args.n
    if args.p2 is not None:
        kw["P2"] = args.p2
    if args.dgp == 1:
        if args.kappa is not None:
            raise UsageError("--kappa only applies to --dgp 2")
        return Sim1Config(**kw)
    if args.kappa is not None:
        kw["kappa_star"] = args.kappa
    return Sim2Config(**kw)


def add_sim_args(p) -> None:
    p.add_argument("--dgp", type=int, choices=(1, 2), help="1: observed confounding, 2: latent risk group")
    p.add_argument("--n", type=int, help="number of subjects (default 2000)")
    p.add_argument("--p2", type=float, help="effect size of condition 2 (default 1.0, or 0.5 for dgp 2)")
    p.add_argument("--kappa", type=float, help="latent-group log hazard ratio κ* for dgp 2 (default 3.0)")
    p.add_argument("--seed", type=int, help="master seed (required)")


def cmd_simulate(args) -> dict:
    require(args, "out")
    cfg = sim_config(args)
    ds, w = simulate(cfg, args.replicate or 0)
    save_dataset(ds, args.out)
    outputs = [args.out]
    if w is not None:
        hidden = args.hidden_w or str(Path(args.out).with_suffix(".w.csv"))
        save_hidden_w(hidden, ds, w)
        outputs.append(hidden)
    return {
        "success": True,
        "message": f"{ds.n_subjects} subjects, {ds.n_events} events written to {args.out}",
        "outputs": outputs,
    }


def register_commands(subparsers) -> None:
    p = subparsers.add_parser("simulate", help="simulate a cohort panel")
    add_sim_args(p)
    p.add_argument("--replicate", type=int, help="replicate index inside the seed's stream layout")
    p.add_argument("--out", help="panel file to write")
    p.add_argument("--hidden-w", help="sidecar CSV for the hidden risk group (dgp 2)")
    add_runtime_args(p)
    p.set_defaults(handler=cmd_simulate)
