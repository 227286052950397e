"""Command line entry point: ``wvgnn <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness as Hs
from .checks import equivariance_checks, invariance_checks, loss_gradchecks, op_gradchecks


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="master seed (default: training.seed from the config)")
    common.add_argument("--out-dir", default=".", help="directory for checkpoints and CSV files")
    common.add_argument("--desk-scale", action="store_true",
                        help="evaluate on 1/20 of the configured realizations and cap training steps")
    common.add_argument("--threads", type=int, default=1, help="worker threads for evaluation draws")
    common.add_argument("--timing", action="store_true",
                        help="record wall-clock seconds in the CSV (otherwise 0, keeping output reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wvgnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train an ICGNN and write a checkpoint")
    for name, text in (("eval", "compare ICGNN against baselines"),
                       ("generalize", "evaluate a checkpoint across network sizes"),
                       ("finetune", "frozen vs briefly fine-tuned checkpoint on a shifted scenario"),
                       ("csi-sweep", "SE under norm-bounded CSI errors")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="checkpoint path (default: output.checkpoint in --out-dir)")
        if name == "generalize":
            sp.add_argument("--var", help="swept quantity")
            sp.add_argument("--values", type=int, nargs="+", help="sweep values")
        if name == "finetune":
            sp.add_argument("--steps", type=int, help="number of Adam updates")
        if name == "csi-sweep":
            sp.add_argument("--bounds", type=float, nargs="+",
                            help="error bounds as fractions of the average per-user channel norm")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every differentiable op")
    sub.add_parser("proptest", parents=[common], help="permutation invariance and equivariance checks")
    return p


def _run_checks(results):
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AssertionError(f"{len(failed)} check(s) failed: {', '.join(failed)}")


def run(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = Hs.load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg["training"]["seed"])
    if args.threads < 1:
        raise Hs.ConfigError("--threads must be >= 1")
    os.makedirs(args.out_dir, exist_ok=True)
    ctx = Hs.RunContext(cfg, seed, args.out_dir, args.desk_scale, args.threads, args.timing)
    cmd = args.command
    if cmd == "train":
        _, curve = Hs.cmd_train(ctx)
        print(f"trained {len(curve.steps)} steps; checkpoint {ctx.path('checkpoint')}")
    elif cmd == "eval":
        _print_rows(Hs.cmd_eval(ctx, args.checkpoint))
    elif cmd == "generalize":
        _print_rows(Hs.cmd_generalize(ctx, args.checkpoint, args.var, args.values))
    elif cmd == "finetune":
        _print_rows(Hs.cmd_finetune(ctx, args.checkpoint, args.steps))
    elif cmd == "csi-sweep":
        _print_rows(Hs.cmd_csi_sweep(ctx, args.checkpoint, args.bounds))
    elif cmd == "gradcheck":
        _run_checks(op_gradchecks(seed) + loss_gradchecks(seed))
    elif cmd == "proptest":
        _run_checks(invariance_checks(seed) + equivariance_checks(seed))
    return 0


def _print_rows(rows):
    for r in rows:
        print(f"{r['scenario']:<32} {r['method']:<18} {r['sweep_var']}={r['sweep_val']!s:<6} "
              f"SE {r['mean_se']:.4f} +- {r['stderr']:.4f}")


def main(argv=None):
    try:
        return run(argv)
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
