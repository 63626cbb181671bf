"""Command line entry point: ``attnxfer <command> --config PATH --seed N``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig, load_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--workdir", default=".", help="directory holding all artefacts (default: .)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnxfer", description="Attention-map video classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate the synthetic source/target datasets"),
        ("pretrain", "train the source-domain classifier"),
        ("cache", "precompute attention maps for all target frames"),
        ("classify-unatt", "sliding-window energy classifier"),
        ("train-energynet", "train the EnergyNet on target-train videos"),
        ("classify-energynet", "classify with a trained EnergyNet"),
        ("classify-cnn", "frame-vote baseline on the classifier's scores"),
        ("eval", "write an evaluation report"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "eval":
            p.add_argument("--method", choices=pipeline.METHODS, default="unatt")
            p.add_argument("--out", help="report path (default: <workdir>/report-<method>.json)")
    return parser


def run(args) -> object:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_seed(args.seed)
    wd = args.workdir
    cmd = args.command
    if cmd == "synth":
        return pipeline.run_synth(cfg, wd)
    if cmd == "pretrain":
        return {"epoch_losses": pipeline.run_pretrain(cfg, wd)}
    if cmd == "cache":
        return {"entries": len(pipeline.run_cache(cfg, wd))}
    if cmd == "classify-unatt":
        return pipeline.run_classify_unatt(cfg, wd)
    if cmd == "train-energynet":
        result = pipeline.run_train_energynet(cfg, wd)
        return {"iterations": len(result.log)}
    if cmd == "classify-energynet":
        return pipeline.run_classify_energynet(cfg, wd)
    if cmd == "classify-cnn":
        return pipeline.run_classify_cnn(cfg, wd)
    if cmd == "eval":
        report = pipeline.run_eval(cfg, wd, args.method, args.out)
        return {"mAP": report.mAP, "top1": report.top1, "top3": report.top3}
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as exc:  # noqa: BLE001 - reported as one line
        print(f"error: {args.command}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
