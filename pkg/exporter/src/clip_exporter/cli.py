"""clip-export: convert and verify CLIP image-encoder checkpoints."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .export import CLIP_MEAN, CLIP_STD, export
from .verify import VerificationError, random_images, verify


def _load_state(path):
    loaded = torch.load(path, map_location="cpu", weights_only=True)
    if hasattr(loaded, "state_dict"):
        loaded = loaded.state_dict()
    if "state_dict" in loaded and isinstance(loaded["state_dict"], dict):
        loaded = loaded["state_dict"]
    return loaded


def _load_images(args, side):
    if args.images:
        from PIL import Image

        arrays = []
        for p in sorted(Path(args.images).iterdir())[: args.n_images]:
            img = Image.open(p).convert("RGB")
            a = np.asarray(img, np.float32) / 255.0
            h, w = a.shape[:2]
            if min(h, w) < side:
                raise ValueError(f"{p}: image smaller than encoder side {side}")
            top, left = (h - side) // 2, (w - side) // 2
            arrays.append(a[top : top + side, left : left + side].transpose(2, 0, 1))
        return np.stack(arrays)
    return random_images(args.n_images, side, args.seed)


def cmd_export(args) -> int:
    state = _load_state(args.source)
    meta = export(
        state, args.out, heads=args.heads,
        mean=tuple(args.mean) if args.mean else CLIP_MEAN,
        std=tuple(args.std) if args.std else CLIP_STD,
        source_id=str(args.source),
    )
    print(json.dumps(meta, indent=2, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    state = _load_state(args.source)
    from .container import read_container

    manifest, _ = read_container(args.container)
    side = manifest["meta"]["config"]["image_side"]
    images = _load_images(args, side)
    report = verify(
        args.container, state, images, threshold=args.threshold,
        heads=args.heads, activation=args.activation,
    )
    for l, c in enumerate(report.per_block):
        print(f"block {l}: cosine {c:.6f}")
    if not report.passed:
        print(
            f"FAIL at block {report.first_failure} "
            f"(threshold {report.threshold})",
            file=sys.stderr,
        )
        return 1
    print(f"PASS: all {len(report.per_block)} blocks >= {report.threshold}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="clip-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a checkpoint to a container")
    p.add_argument("source", help="torch checkpoint (.pt) with the vision tower")
    p.add_argument("out", help="output container path")
    p.add_argument("--heads", type=int, help="override inferred head count")
    p.add_argument("--mean", type=float, nargs=3, help="pixel normalization mean")
    p.add_argument("--std", type=float, nargs=3, help="pixel normalization std")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="compare container against the source model")
    p.add_argument("container")
    p.add_argument("source")
    p.add_argument("--images", help="directory of sample images (center-cropped)")
    p.add_argument("--n-images", type=int, default=8, dest="n_images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.999)
    p.add_argument("--heads", type=int)
    p.add_argument("--activation", choices=("gelu", "quick_gelu"), default="gelu")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
