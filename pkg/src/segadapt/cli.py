"""Command-line entry point.

Subcommands: generate-data, pretrain-seg, train-aug, train, evaluate,
report. Exit codes: 0 success, 2 usage error, 3 missing prerequisite,
4 training failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import ConfigError, DataError, PipelineError, TrainingError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_PREREQ = 3
EXIT_TRAINING = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="Toy domain-adaptation pipeline: restyling GAN "
                    "augmentation plus mean-teacher self-ensembling.")
    parser.add_argument("--config", help="pipeline config JSON (defaults used "
                                         "when omitted)")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", help="override config output directory")
    parser.add_argument("--variant", choices=pipeline.VARIANTS,
                        help="ablation variant for 'train'")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", help="render the two-domain toy benchmark")
    sub.add_parser("pretrain-seg", help="pretrain the frozen constraint segmenter")
    sub.add_parser("train-aug", help="train the restyling generator (GAN stage)")
    p_train = sub.add_parser("train", help="run one adaptation variant")
    p_train.add_argument("--variant", dest="variant_local",
                         choices=pipeline.VARIANTS)
    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on target-eval")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest")
    p_eval.add_argument("--report-out", help="also write the report JSON here")
    sub.add_parser("report", help="emit plots and CSVs for finished runs")
    return parser


def _load_config(args) -> pipeline.PipelineConfig:
    cfg = (pipeline.load_config(args.config) if args.config
           else pipeline.PipelineConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "generate-data":
            path = pipeline.cmd_generate_data(cfg)
            print(f"dataset manifest: {path}")
        elif args.command == "pretrain-seg":
            path = pipeline.cmd_pretrain_fseg(cfg)
            print(f"constraint segmenter: {path}")
        elif args.command == "train-aug":
            path = pipeline.cmd_train_aug(cfg)
            print(f"generator: {path}")
        elif args.command == "train":
            variant = getattr(args, "variant_local", None) or args.variant
            if variant is None:
                parser.error("train requires --variant")
            out = pipeline.cmd_train(cfg, variant)
            print(f"{variant}: final mIoU {100 * out['miou']:.2f}")
        elif args.command == "evaluate":
            manifest = args.manifest or cfg.manifest_path
            report = pipeline.cmd_evaluate(args.checkpoint, manifest,
                                           out_path=args.report_out)
            print(report.to_json())
        elif args.command == "report":
            for path in pipeline.cmd_report(cfg):
                print(f"wrote {path}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
