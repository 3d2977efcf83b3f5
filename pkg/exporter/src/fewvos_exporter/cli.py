"""Command-line entry point: export a dataset of frames and masks."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbones import RESNET_STAGES
from .export import ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export",
        description="Extract backbone feature maps and masks into FTS tensors"
                    " plus a dataset manifest.",
    )
    parser.add_argument("--data", required=True, help="dataset root directory")
    parser.add_argument("--backbone", default="resnet50",
                        choices=("resnet50", "tiny"))
    parser.add_argument("--stage", default="layer3",
                        help=f"backbone stage to tap ({', '.join(RESNET_STAGES)})")
    parser.add_argument("--weights", help="optional backbone state-dict path")
    parser.add_argument("--stride", type=int, default=1,
                        help="keep every Nth frame")
    parser.add_argument("--out", required=True, help="output root directory")
    parser.add_argument("--remap", help="JSON object remapping mask class ids")
    parser.add_argument("--folds", help="JSON file with fold class lists")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for randomly initialized backbones")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        remap = {}
        if args.remap:
            remap = {int(k): int(v) for k, v in json.loads(args.remap).items()}
        folds = None
        if args.folds:
            folds = json.loads(Path(args.folds).read_text())
        job = ExportJob(
            data_root=Path(args.data),
            out_root=Path(args.out),
            backbone=args.backbone,
            stage=args.stage,
            weights=args.weights,
            stride=args.stride,
            class_remap=remap,
            folds=folds,
            seed=args.seed,
        )
        manifest = export(job)
    except (ExportError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
