"""Command-line entry point: ``reconbound <train|account|bounds|attack|pipeline|grid>``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from typing import Optional, Sequence

import jsonschema

from reconbound.autodiff import ConvergenceError, NonSmoothPrimitiveError
from reconbound.data import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

STAGES_FOR = {
    "train": ("train",),
    "account": ("train", "account", "bounds"),
    "attack": ("train", "account", "bounds", "attack"),
    "pipeline": ("train", "account", "bounds", "attack"),
}

# flag -> (config section, key)
OVERRIDES = {
    "sigma": ("mechanism", "sigma"),
    "clip": ("mechanism", "clip"),
    "lr": ("mechanism", "lr"),
    "iters": ("mechanism", "iters"),
    "batch": ("mechanism", "batch"),
    "delta": ("mechanism", "delta"),
    "mechanism": ("mechanism", "kind"),
    "trials": ("attack", "trials"),
    "runs": ("accounting", "runs"),
    "kappa_policy": ("accounting", "kappa_policy"),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mechanism", choices=["output-perturb", "dp-sgd"])
    p.add_argument("--sigma", type=float, help="noise multiplier")
    p.add_argument("--clip", type=float, help="clip norm C")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--iters", type=int, help="number of DP-SGD steps T")
    p.add_argument("--batch", type=int, help="batch size B")
    p.add_argument("--delta", type=float, help="total DP failure budget (default 1/n)")
    p.add_argument("--runs", type=int, help="independent accountant runs to average")
    p.add_argument("--kappa-policy", choices=["amplified", "convexity"])
    p.add_argument("--trials", type=int, help="attack trials")
    p.add_argument("--unsafe-reveal", action="store_true",
                   help="keep sample indices in the report (per-sample leakage is sensitive)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reconbound", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("train", "train the private model and write a checkpoint"),
                        ("account", "train, then run both accountants and bounds"),
                        ("attack", "account, then evaluate the reconstruction attack"),
                        ("pipeline", "every stage"),
                        ("grid", "run the Cartesian product in config['grid']")]:
        _add_run_flags(sub.add_parser(name, help=help_))

    b = sub.add_parser("bounds", help="evaluate MSE lower bounds from privacy parameters")
    b.add_argument("--epsilon2", type=float, help="order-2 RDP epsilon")
    b.add_argument("--epsilon-dp", type=float, help="pure DP epsilon, for the membership-inference ceiling")
    b.add_argument("--n", type=int, help="output perturbation: dataset size")
    b.add_argument("--l2", type=float, help="output perturbation: L2 strength")
    b.add_argument("--sigma", type=float, help="output perturbation: noise std")
    b.add_argument("--trace", type=float, help="Fisher information trace")
    b.add_argument("--dfil", type=float, help="average FIM diagonal")
    b.add_argument("--dim", type=int, default=1)
    b.add_argument("--diam", type=float, default=1.0, help="box diameter per coordinate")
    return parser


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.setdefault(section, {})[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.unsafe_reveal:
        cfg["unsafe_reveal"] = True
    if args.out:
        cfg.setdefault("output", {})["dir"] = args.out
    return cfg


def _bounds(args) -> dict:
    from reconbound.accounting import (
        BoundInputs,
        dfil_bound,
        mia_advantage_bound,
        mse_lower_bound_fil,
        mse_lower_bound_rdp,
        rdp_output_perturbation,
    )

    out: dict = {}
    eps = args.epsilon2
    if eps is None and None not in (args.n, args.l2, args.sigma):
        eps = rdp_output_perturbation(args.n, args.l2, args.sigma)
    if eps is not None:
        inputs = BoundInputs(diam=[args.diam] * args.dim)
        out["epsilon2"] = eps
        out["rdp_mse_bound"] = mse_lower_bound_rdp(eps, inputs)
    if args.epsilon_dp is not None:
        adv = mia_advantage_bound(args.epsilon_dp)
        out["mia_advantage_bound"] = adv
        out["mia_success_probability_bound"] = (1.0 + adv) / 2.0
    if args.trace is not None:
        out["fil_mse_bound"] = mse_lower_bound_fil(args.trace, args.dim)
    if args.dfil is not None:
        out["fil_mse_bound"] = dfil_bound(args.dfil)
    if not out:
        raise ValueError("bounds needs --epsilon2, (--n --l2 --sigma), --epsilon-dp, --trace or --dfil")
    return {k: (v if math.isfinite(v) else str(v)) for k, v in out.items()}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bounds":
            print(json.dumps(_bounds(args), indent=2, sort_keys=True))
            return EXIT_OK

        from reconbound.pipeline import load_config, run_grid, run_pipeline

        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "grid":
            rows = run_grid(cfg)
            failed = [r for r in rows if r["status"] != "ok"]
            print(f"{len(rows)} grid runs, {len(failed)} failed")
            return EXIT_NUMERIC if failed else EXIT_OK
        res = run_pipeline(cfg, stages=STAGES_FOR[args.command])
        print(f"wrote {res.out_dir}")
        return EXIT_OK
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (jsonschema.ValidationError, NonSmoothPrimitiveError, ValueError) as exc:
        # ConfigError is a ValueError
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
