"""CLI: export patch features from pretrained vision backbones."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbones import BACKBONE_NAMES, BackboneError
from .export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtexport",
        description="Run a vision backbone over an image folder and write "
                    "a patch-feature file (MMTF).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export features for every image in a directory")
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--backbone", required=True, choices=sorted(BACKBONE_NAMES))
    p.add_argument("--resolution", type=int, required=True, choices=(224, 384))
    p.add_argument("--patch", type=int, default=16, choices=(4, 16, 32))
    p.add_argument("--out", required=True)
    p.add_argument("--weights", choices=("pretrained", "random"), default="pretrained")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(images=args.images, backbone=args.backbone,
                        resolution=args.resolution, patch=args.patch,
                        out=args.out, weights=args.weights, seed=args.seed)
        summary = export(job)
    except BackboneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary.written} records ({summary.rows_per_record} x "
          f"{summary.d_img} each) to {args.out}; skipped {len(summary.skipped)}")
    if summary.skipped:
        print("skipped files: " + ", ".join(summary.skipped))
    return 0


if __name__ == "__main__":
    sys.exit(main())
