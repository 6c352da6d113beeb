"""Command-line surface: run / cft / mgi / fid-ref / report.

Flags override config-file values through dotted --set assignments; exit
codes are 0 success, 2 configuration, 3 numeric, 4 IO.
"""
from __future__ import annotations

import argparse
import sys

import yaml

from .config import apply_override, serialize_config, validate_config
from .errors import ConfigValidationError, IOFailure, PairtuneError
from .fid import EmbeddingSpec
from .pipeline import build_fid_reference, render_report, run, stage_cft, stage_mgi


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("-c", "--config", help="YAML config file (defaults apply without one)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="override a config value by dotted path, e.g. cft.alpha=50",
    )
    parser.add_argument("--source", help="shorthand for --set source-path=...")
    parser.add_argument("--target", help="shorthand for --set target-path=...")
    parser.add_argument("--output-dir", help="shorthand for --set output-dir=...")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=...")


def _load_config(args):
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise IOFailure(f"cannot read config {args.config}: {exc}") from exc
    else:
        text = ""
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigValidationError(["config: top level must be a mapping"])
    if args.source:
        raw["source-path"] = args.source
    if args.target:
        raw["target-path"] = args.target
    if args.output_dir:
        raw["output-dir"] = args.output_dir
    if args.seed is not None:
        raw["seed"] = args.seed
    for assignment in args.overrides:
        apply_override(raw, assignment)
    return validate_config(yaml.safe_dump(raw))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairtune",
        description="Exemplar-guided image translation by per-pair online optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full two-stage pipeline")
    _add_config_args(p_run)
    p_run.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p_cft = sub.add_parser("cft", help="stage 1 only: fine-tune and emit the warped image")
    _add_config_args(p_cft)

    p_mgi = sub.add_parser("mgi", help="stage 2 only: invert against a warped image")
    _add_config_args(p_mgi)
    p_mgi.add_argument("--warped", required=True, help="warped image (.png or .f64) to invert against")

    p_ref = sub.add_parser("fid-ref", help="build a reference statistics file from images")
    p_ref.add_argument("image_dir", help="directory of reference images")
    p_ref.add_argument("-o", "--out", required=True, help="output stats file")
    p_ref.add_argument("--output-dim", type=int, default=16, help="embedding dimension")
    p_ref.add_argument("--embed-seed", type=int, default=0, help="embedding projection seed")
    p_ref.add_argument(
        "--crop-policy", choices=("expand", "whole"), default="expand", help="per-image crop expansion"
    )

    p_rep = sub.add_parser("report", help="re-render the comparison grid from a run directory")
    p_rep.add_argument("run_dir", help="directory written by a previous run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args)
            if args.print_config:
                print(serialize_config(cfg), end="")
                return 0
            report = run(cfg)
            print(f"selected {report.manifest['selected-hypothesis']} -> {report.selected_path}")
            print(f"grid: {report.artifacts['grid']}")
        elif args.command == "cft":
            cfg = _load_config(args)
            result = stage_cft(cfg)
            print(f"warped image: {result['warped']} (final total loss {result['final-total']:.6f})")
        elif args.command == "mgi":
            cfg = _load_config(args)
            result = stage_mgi(cfg, args.warped)
            print(f"selected {result['selected']} -> {result['final']}")
        elif args.command == "fid-ref":
            embed = EmbeddingSpec(output_dim=args.output_dim, seed=args.embed_seed)
            stats = build_fid_reference(args.image_dir, embed, args.crop_policy, args.out)
            print(f"wrote {args.out}: dim {stats.dim}, {stats.sample_count} samples")
        elif args.command == "report":
            path = render_report(args.run_dir)
            print(f"grid: {path}")
    except ConfigValidationError as exc:
        for message in exc.errors:
            print(f"config error: {message}", file=sys.stderr)
        return exc.exit_code
    except PairtuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
