"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, bad
config document, missing input paths).
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..data import generate_synthetic_dataset, save_corpus
from ..model import export_weights, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .experiments import adapt_eval, load_splits, make_run_dir, run_experiment1, run_experiment2, train_single
from .report import emit_report

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ttt_histo")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", type=Path, help="experiment config JSON (defaults used when omitted)")
    p.add_argument("--out", type=Path, help="parent directory for run directories")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--corpus", type=Path, help="load slides saved by gen-data instead of regenerating")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="ttt-histo", description="Test-time training experiments on synthetic slides.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the synthetic slide corpus")
    _common(p)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--task", choices=("rsp", "simclr"))

    p = sub.add_parser("sweep-lambda", help="lambda_s sweep plus the pretrain/finetune probe")
    _common(p)

    p = sub.add_parser("adapt-eval", help="evaluate one adaptation setting on a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--method", choices=("none", "ttt", "adabn", "tent", "memo"))
    p.add_argument("--step-size", type=float)
    p.add_argument("--shift", action="append", help="shift name from the config (repeatable)")
    p.add_argument("--split", default="testA", choices=("val", "testA", "testB"))

    p = sub.add_parser("sweep-step-size", help="shift x step-size grid with unadapted baselines")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="trained model; trained from scratch when omitted")
    p.add_argument("--method", default="ttt", choices=("ttt", "adabn", "tent", "memo"))
    p.add_argument("--shift", action="append", help="restrict to these shift names (repeatable)")
    p.add_argument("--lambda-s", type=float)

    p = sub.add_parser("report", help="emit report tables for a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("export-weights", help="export checkpoint weights as raw float32 + index")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _existing(path, what):
    if path is not None and not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def load_config(args):
    cfg = ExperimentConfig.load(_existing(args.config, "config")) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.output_dir = str(args.out)
    lam = getattr(args, "lambda_s", None)
    if lam is not None:
        if not 0.0 <= lam <= 1.0:
            raise UsageError(f"--lambda-s must be in [0, 1], got {lam}")
        cfg.training = replace(cfg.training, lambda_s=lam)
        cfg.experiment2 = replace(cfg.experiment2, lambda_s=lam)
    overrides = {}
    if getattr(args, "step_size", None) is not None:
        overrides["step_size"] = args.step_size
    if getattr(args, "method", None) is not None and args.command == "adapt-eval":
        overrides["method"] = args.method
    if overrides:
        cfg.adapt = replace(cfg.adapt, **overrides)
    for name in getattr(args, "shift", None) or []:
        try:
            cfg.shift(name)
        except KeyError as e:
            raise UsageError(e.args[0]) from None
    if getattr(args, "task", None):
        cfg.model = replace(cfg.model, task=args.task)
    return cfg


def run(args):
    if args.command == "report":
        written = emit_report(_existing(args.run, "run directory"), plots=args.plots)
        for name, path in sorted(written.items()):
            print(f"{name}: {path}")
        return
    cfg = load_config(args)
    corpus = _existing(args.corpus, "corpus")
    checkpoint = _existing(getattr(args, "checkpoint", None), "checkpoint")
    run_dir = make_run_dir(cfg.output_dir, args.command, cfg)
    print(f"run directory: {run_dir}")

    if args.command == "gen-data":
        save_corpus(generate_synthetic_dataset(cfg.data), run_dir / "corpus", cfg.data)
    elif args.command == "train":
        info = train_single(cfg, run_dir, load_splits(cfg, corpus))
        if info["status"] != "ok":
            raise RuntimeError(info["error"])
    elif args.command == "sweep-lambda":
        run_experiment1(cfg, run_dir, load_splits(cfg, corpus))
        emit_report(run_dir)
    elif args.command == "adapt-eval":
        adapt_eval(cfg, run_dir, checkpoint, load_splits(cfg, corpus), args.shift, args.split)
    elif args.command == "sweep-step-size":
        if args.shift:
            cfg.experiment2 = replace(cfg.experiment2, shifts=list(args.shift))
        summary = run_experiment2(cfg, run_dir, load_splits(cfg, corpus), checkpoint, method=args.method)
        emit_report(run_dir)
        if summary["failures"]:
            raise RuntimeError(f"{len(summary['failures'])} grid point(s) failed; see experiment2.json")
    elif args.command == "export-weights":
        model, _ = load_checkpoint(checkpoint)
        export_weights(model, run_dir / "weights")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
