"""Shared command-line options, run-config files and settings assembly."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from dotenv import dotenv_values

from config import config
from constants import ROUTE_FLAGS, RUN_SCHEMA_VERSION
from services.errors import HazardError
from services.panel_data import load_dataset
from services.pipeline_service import (
    DEFAULT_ZETA_GRID_G, DEFAULT_ZETA_GRID_H, REFERENCE_MODELS, ZETA_RULE_BME, ZETA_RULE_CV,
    RunSettings,
)
from utils import parse_float_list

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


# ── Argument groups ──────────────────────────────────────────────────────────

def add_runtime_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="dotenv-format run file (SCHEMA_VERSION=1); flags override it")
    p.add_argument("--jobs", type=int, help=f"worker threads (default HAZARD_N_JOBS={config.N_JOBS})")


def add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", help="kernels, e.g. 'linear:age;gaussian:date;gaussian:x1,x2'")
    g.add_argument("--reference", choices=sorted(REFERENCE_MODELS),
                   help="use a reference model for the simulated cohorts")
    g.add_argument("--name", help="model name used in reports")
    g.add_argument("--latent", action="store_true", default=None,
                   help="add the binary latent class with a logistic baseline prior")
    g.add_argument("--hp", help="hyperparameters, e.g. 'gauss1_lambda=3,gauss1_sigma=0.7'")
    g.add_argument("--tune", action="store_true", default=None,
                   help="grid-search hyperparameters by Laplace evidence")
    g.add_argument("--em-starts", type=int, help="random EM starts")
    g.add_argument("--em-seed", type=int, help="seed for EM starts")
    g.add_argument("--kappa0", type=float, help="start EM near this κ instead of random starts")


def add_nuisance_args(p: argparse.ArgumentParser, with_route: bool = True) -> None:
    g = p.add_argument_group("cross-fitting")
    if with_route:
        g.add_argument("--route", choices=sorted(ROUTE_FLAGS), help="h, g or latent (default h)")
    g.add_argument("--folds", type=int, help=f"number of folds M (default {config.FOLDS})")
    g.add_argument("--fold-seed", type=int, help="seed of the fold partition")
    g.add_argument("--zeta-h", type=float, help="fixed ζ_n for the Hessian route")
    g.add_argument("--zeta-h-grid", help="ζ_n grid for CVErr_H tuning")
    g.add_argument("--zeta-c", type=float, help="ζ_n = c·n^-alpha schedule: c")
    g.add_argument("--zeta-alpha", type=float, help="ζ_n = c·n^-alpha schedule: alpha")
    g.add_argument("--zeta-g", type=float, help="fixed ζ for every g_k")
    g.add_argument("--zeta-g-grid", help="ζ grid for g_k tuning")
    g.add_argument("--zeta-g-rule", choices=(ZETA_RULE_CV, ZETA_RULE_BME),
                   help="pick ζ for g_k by CVErr_g or by evidence (default cv)")
    g.add_argument("--include-2d", action="store_true", default=None,
                   help="keep 2D+ gaussian kernels in the g_k models")
    g.add_argument("--full-newton", action="store_true", default=None,
                   help="iterate the latent-route Newton solve to convergence")
    g.add_argument("--theta-star", help="reference θ* for t-statistics, e.g. '1.0,2.0'")


def add_data_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="panel file")


# ── Run-config files ─────────────────────────────────────────────────────────

def load_run_config(path) -> dict[str, str]:
    if not Path(path).is_file():
        raise UsageError(f"run config {path} not found")
    values = {k.upper(): v for k, v in dotenv_values(path).items() if v is not None}
    version = values.pop("SCHEMA_VERSION", None)
    if version != str(RUN_SCHEMA_VERSION):
        raise UsageError(f"run config {path}: SCHEMA_VERSION={RUN_SCHEMA_VERSION} required, "
                         f"got {version!r}")
    return values


def config_defaults(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    """Map run-file keys onto parser dests; string values go through each flag's type."""
    actions = {a.dest.upper(): a for a in parser._actions if a.dest != "help"}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"run config key {key} is not an option of this command")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            defaults[action.dest] = raw
    return defaults


# ── Settings ─────────────────────────────────────────────────────────────────

def parse_hyperparams(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    hp = {}
    for part in text.replace(";", ",").split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"hyperparameter '{part}' must look like key=value")
        key, value = part.split("=", 1)
        hp[key.strip()] = float(value)
    return hp


def route_of(args) -> str:
    return ROUTE_FLAGS[getattr(args, "route", None) or "h"]


def model_text(args) -> tuple[str, bool, str]:
    """(kernel text, latent flag, name) from --model / --reference."""
    if args.model and args.reference:
        raise UsageError("give --model or --reference, not both")
    if args.reference:
        text, latent = REFERENCE_MODELS[args.reference]
        return text, bool(args.latent) or latent, args.name or args.reference
    if not args.model:
        raise UsageError("a model is required (--model or --reference)")
    return args.model, bool(args.latent), args.name or "model"


def _grid(text, default):
    values = parse_float_list(text)
    return tuple(values) if values else default


def settings_from_args(args, theta_star=None) -> RunSettings:
    text, latent, name = model_text(args)
    star = parse_float_list(getattr(args, "theta_star", None)) or theta_star
    kw = dict(
        model_text=text, model_name=name, latent=latent,
        hyperparams=parse_hyperparams(args.hp), tune=bool(args.tune),
        em_seed=args.em_seed or 0, kappa0=args.kappa0,
        theta_star=tuple(star) if star else None,
        n_jobs=args.jobs,
    )
    if args.em_starts is not None:
        kw["em_starts"] = args.em_starts
    if hasattr(args, "fold_seed"):
        kw.update(
            fold_seed=args.fold_seed or 0, zeta_H=args.zeta_h,
            zeta_grid_H=_grid(args.zeta_h_grid, DEFAULT_ZETA_GRID_H),
            zeta_c=args.zeta_c, zeta_alpha=args.zeta_alpha, zeta_g=args.zeta_g,
            zeta_grid_g=_grid(args.zeta_g_grid, DEFAULT_ZETA_GRID_G),
            zeta_g_rule=args.zeta_g_rule or ZETA_RULE_CV,
            include_2d=bool(args.include_2d), full_newton=bool(args.full_newton),
        )
        if args.folds is not None:
            kw["folds"] = args.folds
    try:
        return RunSettings(**kw)
    except ValueError as e:
        raise UsageError(str(e))


def require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"missing required option(s): {' '.join(missing)}")


def read_data(args):
    require(args, "data")
    return load_dataset(args.data)


def output_dir(args) -> Path:
    out = Path(getattr(args, "out_dir", None) or config.OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_handler(handler, args) -> dict:
    """Call a handler and turn service errors into the shared result dictionary."""
    try:
        return handler(args)
    except (UsageError, ValueError) as e:
        return {"success": False, "message": str(e), "usage": True}
    except HazardError as e:
        logger.error(f"{args.command} failed: {e}")
        return {"success": False, "message": f"{type(e).__name__}: {e}",
                "exit_code": e.exit_code}
