"""CLI: export --root DIR --out FILE [--model NAME] [--prompt TEMPLATE]."""

from __future__ import annotations

import argparse
import sys

from .backbones import DEFAULT_BACKBONE, BackboneError
from .export import ExportError, ExportJob, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftfuse-export",
        description="Run an image encoder over a per-domain/per-class folder tree "
                    "and write a DIFZ feature file",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode an image tree into a feature file")
    p.add_argument("--root", required=True, help="dataset root: <domain>/<class>/<images>")
    p.add_argument("--out", required=True, help="output DIFZ path")
    p.add_argument("--model", default=DEFAULT_BACKBONE,
                   help=f"backbone name (default {DEFAULT_BACKBONE}; "
                        f"projection-<dim> works offline)")
    p.add_argument("--prompt", default="a good photo of [CLS]",
                   help="prompt template recorded in the manifest metadata")
    p.add_argument("--batch-size", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = export_features(ExportJob(args.root, args.out, args.model, args.prompt, args.batch_size))
    except (ExportError, BackboneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(
        f"wrote {result.records} records ({result.feature_dim}-d, "
        f"{result.num_classes} classes, {len(result.domains)} domains) to {args.out}"
        + (f"; skipped {result.skipped}" if result.skipped else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
