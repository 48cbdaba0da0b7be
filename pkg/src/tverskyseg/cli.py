"""Command-line entry point: ``tverskyseg {synth,train,eval,gradcheck,info}``.

Exit codes: 0 success, 1 check or training failure, 2 configuration/data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import VolumeFormatError
from .kernels import ShapeError
from .synth import InfeasibleConfig, gen_synthetic

log = logging.getLogger("tverskyseg")

DATA_ERRORS = (ConfigError, VolumeFormatError, InfeasibleConfig, CheckpointError,
               ShapeError, FileNotFoundError, KeyError)


def cmd_synth(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    synth = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    out = Path(args.out or cfg.data.dir)
    gen_synthetic(synth, out)
    print(f"wrote {synth.count} volumes and manifest.json to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config, seed=args.seed, out=args.out)
    result = train(cfg, resume=args.resume, figures=not args.no_figures)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; best val DSC {result.best_val_dsc:.4f}, "
          f"last val DSC {last['val_dsc']:.4f}; outputs in {result.out_dir}")
    for tag, report in (result.test or {}).items():
        m = report["mean"]
        print(f"test ({tag} checkpoint, epoch {report['epoch']}): DSC {m['dsc']:.4f} F2 {m['f2']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint, format_table

    report = evaluate_checkpoint(args.ckpt, args.split, args.out, figures=not args.no_figures)
    print(format_table(report))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_end_to_end, check_tversky_grad

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    gc = cfg.gradcheck
    seed = gc.seed if args.seed is None else args.seed
    results = [
        check_tversky_grad(gc.instances, gc.max_extent, gc.h_loss, gc.tol_loss, seed),
        check_end_to_end(seed, h=gc.h_e2e, tolerance=gc.tol_e2e),
    ]
    for r in results:
        print(r.summary())
    return 0 if all(r.passed for r in results) else 1


def cmd_info(args) -> int:
    state = load_checkpoint(args.ckpt)
    n_params = sum(a.size for a in state.params.values())
    print(f"checkpoint {args.ckpt}")
    print(f"  epoch             {state.epoch}")
    print(f"  parameters        {n_params} in {len(state.params)} tensors")
    print(f"  adam step         {state.adam.step}")
    print(f"  lr                {state.schedule.current_lr:g} (best val loss {state.schedule.best_val_loss:.6g})")
    print(f"  next weights      w_tversky={state.weights.w_tversky:.6f} w_bce={state.weights.w_bce:.6f}")
    print(f"  best val DSC      {state.best_val_dsc:.4f}")
    print("  config:")
    for line in state.config_text.strip().splitlines():
        print("    " + line)
    return 0


def _globals(default):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default, help="override the configured seed")
    common.add_argument("--out", default=default, help="output directory override")
    common.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return common


def build_parser() -> argparse.ArgumentParser:
    # globals are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values given before it
    common = _globals(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="tverskyseg", parents=[_globals(None)],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", parents=[common], help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .train import TrainingError

    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
