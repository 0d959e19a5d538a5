"""Command-line entry point: ``s2ifsl <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import pipeline
from .config import METHODS, ExperimentConfig, from_plain, to_plain
from .types import Mode, ValidationError

MODES = {"inductive": Mode.INDUCTIVE, "transductive": Mode.TRANSDUCTIVE, "semi": Mode.SEMI_SUPERVISED}


def _apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` pairs; values are parsed as YAML scalars/lists."""
    plain = to_plain(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        node = plain
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ValidationError(f"--set: {key!r} is not a config path")
            node = node[p]
        if leaf not in node:
            raise ValidationError(f"--set: unknown key {key!r}")
        node[leaf] = yaml.safe_load(raw)
    return from_plain(ExperimentConfig, plain)


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args.set or [])
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set evaluation.n_episodes=100")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="s2ifsl", description="Semi-supervised incremental few-shot pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)
    sub.add_parser("synth", parents=[common], help="write the dataset bundle")
    sub.add_parser("pretrain", parents=[common], help="supervised pre-training on base classes")
    mt = sub.add_parser("metatrain", parents=[common], help="episodic meta-training")
    mt.add_argument("algorithm", choices=pipeline.ALGORITHMS)
    ev = sub.add_parser("evaluate", parents=[common], help="score methods on the test episode stream")
    ev.add_argument("mode", choices=sorted(MODES))
    ev.add_argument("--algorithm", choices=pipeline.ALGORITHMS, default="alg2")
    ev.add_argument("--methods", nargs="+", choices=METHODS)
    ev.add_argument("--force", action="store_true", help="recompute even if results exist")
    for name, help_ in (("ablate", "baseline / +PR / +fake-unlabeled / +adaptation table"),
                        ("sweep", "joint accuracy per base:novel unlabeled ratio")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--force", action="store_true", help="recompute even if results exist")
    sub.add_parser("report", parents=[common], help="markdown/json report and plots from existing artifacts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.stage == "synth":
            out = pipeline.stage_synth(cfg)
        elif args.stage == "pretrain":
            out = pipeline.stage_pretrain(cfg)
        elif args.stage == "metatrain":
            out = pipeline.stage_metatrain(cfg, args.algorithm)
        elif args.stage == "evaluate":
            out = pipeline.stage_evaluate(cfg, args.algorithm, MODES[args.mode], args.methods, force=args.force)
        elif args.stage == "ablate":
            out = pipeline.stage_ablate(cfg, force=args.force)
        elif args.stage == "sweep":
            out = pipeline.stage_sweep(cfg, force=args.force)
        else:
            out = pipeline.stage_report(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
