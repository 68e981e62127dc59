"""Command line entry point: simulate, fit, bayes-fit, report, eval-truth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments as ex
from .autodiff import NonFiniteValue, NonPositiveDiagonal
from .sde import BlowUp, CholeskyFailure

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("krflux")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="JSON experiment config")
    parser.add_argument("--preset", default=default, help="problem preset (overrides the config file)")
    parser.add_argument("--budget", choices=["paper", "desk"], default=default, help="preset budget")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="master seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="run directory (default: runs/<preset>)")
    parser.add_argument("--lambda", dest="lam", type=float, metavar="X", default=default,
                        help="weight of the flux residual")
    parser.add_argument("--epochs", type=int, metavar="N", default=default, help="training epochs")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krflux", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    add("simulate", "generate snapshot data from the ground-truth SDE")
    p = add("fit", "train the map and dynamics parameters")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: <out>/data)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p = add("bayes-fit", "variational refinement from a deterministic checkpoint")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="CKPT", help="default: <out>/fit/checkpoint.json")
    p = add("report", "write density and potential grids")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--times", type=float, nargs="+", help="density grid times")
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), help="grid axis range")
    p.add_argument("--resolution", type=int, help="points per axis")
    p.add_argument("--plane", type=int, nargs=2, metavar=("I", "J"), help="0-based axes of the 2-D slice")
    p = add("eval-truth", "compare recovered parameters with the ground truth")
    p.add_argument("--checkpoint", metavar="CKPT")
    return parser


def _config(args) -> dict:
    user = {}
    if args.config:
        with open(args.config) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ex.InvalidConfig(f"config: not valid JSON ({exc})") from exc
    over = {}
    if args.preset is not None:
        over["preset"] = args.preset
    if args.budget is not None:
        over["budget"] = args.budget
    if args.seed is not None:
        over["seed"] = args.seed
    if args.lam is not None:
        over.setdefault("loss", {})["lam"] = args.lam
    if args.epochs is not None:
        over.setdefault("loss", {})["epochs"] = args.epochs
    if "schema_version" not in user:
        user["schema_version"] = ex.SCHEMA_VERSION
    return ex.resolve_config(user, over)


def _out(args, cfg) -> str:
    return args.out or cfg.get("out") or os.path.join("runs", cfg["preset"])


def _progress(every: int = 100):
    def cb(rep):
        epoch = getattr(rep, "epoch", None)
        if epoch is None:
            epoch = len(rep.elbo)
            value = rep.elbo[-1]
        else:
            value = rep.loss[-1]
        if epoch % every == 0:
            log.info("epoch %d loss %.6g", epoch, value)
    return cb


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    ckpt_arg = getattr(args, "checkpoint", None)
    if cmd in ("report", "eval-truth") and not (args.config or args.preset):
        # the checkpoint carries its own config
        cfg = None
        if not (args.out or ckpt_arg):
            raise ex.InvalidConfig("checkpoint: pass --checkpoint, --out, --config or --preset")
        out = args.out or os.path.dirname(os.path.dirname(os.path.abspath(ckpt_arg)))
    else:
        cfg = _config(args)
        out = _out(args, cfg)
    if cmd == "simulate":
        ds = ex.cmd_simulate(cfg, out)
        print(f"wrote {len(ds)} snapshots x {len(ds.samples[0])} samples (d={ds.dim}) to {out}/data")
    elif cmd == "fit":
        data = args.data or os.path.join(out, "data")
        rep = ex.cmd_fit(cfg, data, out, resume=args.resume, progress=_progress())
        print(json.dumps({"epochs": rep.epoch, "final_loss": rep.loss[-1], "theta2": rep.theta2[-1]}, indent=1))
    elif cmd == "bayes-fit":
        data = args.data or os.path.join(out, "data")
        ckpt = args.checkpoint or os.path.join(out, "fit", "checkpoint.json")
        res = ex.cmd_bayes_fit(cfg, data, ckpt, out, progress=_progress())
        print(json.dumps(res["reported"], indent=1))
    elif cmd == "report":
        ckpt = args.checkpoint or os.path.join(out, "fit", "checkpoint.json")
        grid = {}
        if args.times:
            grid["times"] = args.times
        if args.range:
            grid["lo"], grid["hi"] = args.range
        if args.resolution:
            grid["resolution"] = args.resolution
        if args.plane:
            grid["plane"] = list(args.plane)
        for path in ex.cmd_report(ckpt, out, grid):
            print(path)
    elif cmd == "eval-truth":
        ckpt = args.checkpoint or os.path.join(out, "fit", "checkpoint.json")
        print(json.dumps(ex.cmd_eval_truth(ckpt, cfg, out), indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ex.InvalidConfig, ex.PreTrainRequired) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteValue, NonPositiveDiagonal, BlowUp, CholeskyFailure, FloatingPointError) as exc:
        print(f"error: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
