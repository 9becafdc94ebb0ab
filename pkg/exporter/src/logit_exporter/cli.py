"""CLI adapter: pretrained TorchScript model -> pipeline logit tensors."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import (
    DEFAULT_CROP,
    ExportError,
    ExportSpec,
    export_logits,
    load_class_map,
    load_palette_names,
)


def parse_crop(text: str) -> tuple[int, int]:
    try:
        w, h = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"crop must look like 1200x480, got {text!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("crop dimensions must be positive")
    return w, h


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-logits",
        description="Run a TorchScript segmentation model over manifest VIS images "
        "and write VNF1 logit tensors plus an updated manifest.",
    )
    parser.add_argument("--manifest", required=True, help="dataset manifest file")
    parser.add_argument("--weights", required=True, help="TorchScript model path")
    parser.add_argument(
        "--classes", required=True, help="class map file: `palette name = model channel`"
    )
    parser.add_argument("--out", required=True, help="output directory for tensors")
    parser.add_argument(
        "--palette", required=True, help="pipeline palette file defining class order"
    )
    parser.add_argument(
        "--crop",
        type=parse_crop,
        default=DEFAULT_CROP,
        help="input crop as WIDTHxHEIGHT (default 1200x480)",
    )
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    try:
        names = load_palette_names(args.palette)
        channels = load_class_map(args.classes, names)
        spec = ExportSpec(
            weights=Path(args.weights),
            channel_of_class=channels,
            crop=args.crop,
            device=args.device,
        )
        updated, failures = export_logits(args.manifest, spec, args.out)
        print(f"export-logits: wrote updated manifest {updated}")
        if failures:
            print(
                f"export-logits: {len(failures)} sample(s) failed: {', '.join(failures)}",
                file=sys.stderr,
            )
            return 1
        return 0
    except (ExportError, OSError) as exc:
        print(f"export-logits: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
