"""Command-line entry point: ``intermoco <command> --config run.yaml [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import __version__
from . import workbench as wb
from .config import apply_overrides, config_from_dict, load_raw
from .data import generate_synthetic_dataset
from .errors import ConfigError, DataError, DimensionError, NumericError, UndefinedMetricError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("intermoco")


def _block_list(text: str) -> list[int]:
    try:
        blocks = [int(b) for b in text.replace(" ", "").split(",") if b]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated block numbers, got {text!r}") from None
    if not blocks:
        raise argparse.ArgumentTypeError("block list is empty")
    return blocks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intermoco", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the top-level and training seed")
    common.add_argument("--output-dir", help="output root (default: $%s or ./runs)" % "INTERMOCO_OUTPUT_ROOT")
    common.add_argument("--checkpoint", help="pretraining checkpoint to evaluate")
    common.add_argument("--manifest", help="dataset manifest CSV")

    p = sub.add_parser("pretrain", parents=[common], help="momentum-contrast pretraining")
    p.add_argument("--mode", choices=["moco", "moco+mse", "moco+bt"])
    p.add_argument("--block-mask", type=_block_list, help='blocks with an intermediate loss, e.g. "1,2,3,4"')
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")

    p = sub.add_parser("finetune", parents=[common], help="LL / E2E fine-tuning over label fractions")
    p.add_argument("--mode", choices=["LL", "E2E"], help="restrict to one fine-tuning mode")
    p.add_argument("--fraction", type=float, action="append", help="label fraction (repeatable)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("probe", parents=[common], help="layer-wise linear probing")
    p.add_argument("--block-mask", type=_block_list, help="blocks to probe (default: all)")

    for name, desc in (("analyze-cka", "feature-reuse CKA grid"), ("analyze-ks", "KS distance grid")):
        p = sub.add_parser(name, parents=[common], help=desc)
        p.add_argument("--fraction", type=float, action="append", help="label fraction (repeatable)")

    p = sub.add_parser("report", parents=[common], help="consolidate run directories")
    p.add_argument("runs", nargs="*", help="run directories (default: report.runs or every run under the root)")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic PNG + CSV dataset")
    p.add_argument("out", help="output directory")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--channels", type=int, default=3, choices=[1, 3])
    p.add_argument("--seed", type=int, default=0)
    return parser


def overrides_from_args(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
        out["train.seed"] = args.seed
    if args.output_dir is not None:
        out["output_dir"] = args.output_dir
    if args.checkpoint is not None:
        out["checkpoint"] = args.checkpoint
    if args.manifest is not None:
        out["dataset.manifest"] = args.manifest
    mode = getattr(args, "mode", None)
    fractions = getattr(args, "fraction", None)
    blocks = getattr(args, "block_mask", None)
    epochs = getattr(args, "epochs", None)
    if args.command == "pretrain":
        if mode is not None:
            out["train.mode"] = mode
        if blocks is not None:
            out["train.block_mask"] = blocks
        if epochs is not None:
            out["train.epochs"] = epochs
    elif args.command == "finetune":
        if mode is not None:
            out["finetune.modes"] = [mode]
        if fractions:
            out["finetune.fractions"] = fractions
        if epochs is not None:
            out["finetune.epochs"] = epochs
    elif args.command == "probe":
        if blocks is not None:
            out["probe.blocks"] = blocks
    elif args.command in ("analyze-cka", "analyze-ks"):
        if fractions:
            out["analysis.fractions"] = fractions
    elif args.command == "report" and args.no_plots:
        out["report.plots"] = False
    return out


def run(args) -> None:
    if args.command == "synth":
        manifest = generate_synthetic_dataset(args.out, args.classes, args.samples, args.size, args.noise,
                                              args.seed, args.channels)
        print(manifest)
        return
    raw = load_raw(args.config) if args.config else {}
    cfg = config_from_dict(apply_overrides(raw, overrides_from_args(args)))
    if args.command == "pretrain":
        out = wb.cmd_pretrain(cfg, resume=args.resume)
    elif args.command == "finetune":
        out = wb.cmd_finetune(cfg)
    elif args.command == "probe":
        out = wb.cmd_probe(cfg)
    elif args.command == "analyze-cka":
        out = wb.cmd_analyze_cka(cfg)
    elif args.command == "analyze-ks":
        out = wb.cmd_analyze_ks(cfg)
    else:
        out = wb.cmd_report(cfg, args.runs)
    print(out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run(args)
    except (ConfigError, DimensionError, UsageError, yaml.YAMLError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericError, UndefinedMetricError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
