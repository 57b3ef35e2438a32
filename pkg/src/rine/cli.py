"""Command-line interface.

Subcommands cover the full pipeline: training (with ablation switches),
multi-dataset evaluation, the perturbation-robustness harness, importance
analysis, parameter counting, feature export, and toy-corpus/backbone
generation for desk-scale runs.

Option precedence is flags > --config JSON file > built-in defaults, and
every run that produces outputs writes the fully-resolved options next to
them.  RINE_THREADS caps numeric worker threads for the whole process.
"""

from __future__ import annotations

import os

_threads = os.environ.get("RINE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import head as hd
from .data import PERTURB_KINDS, PerturbConfig, load_dataset, perturb, preprocess_eval, synth_toy_dataset
from .kernels import Rng, sigmoid
from .losses import LossConfig
from .metrics import evaluate, importance_frequency, write_importance_csv, write_report
from .trainer import TrainConfig, train


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; unknown config keys are errors."""
    opts = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        opts.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _write_resolved(out_dir, opts: dict, name: str = "resolved_options.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(opts, sort_keys=True, indent=2))


_TRAIN_DEFAULTS = {
    "seed": 0,
    "epochs": 1,
    "batch_size": 128,
    "lr": 1e-3,
    "xi": 0.2,
    "tau": 0.1,
    "proj_width": 128,
    "depth": 2,
    "dropout": 0.5,
    "no_tie": False,
    "no_contrastive": False,
    "last_block_only": False,
    "no_augment": False,
    "cache_features": False,
}


def cmd_train(args) -> int:
    opts = _resolve(args, _TRAIN_DEFAULTS)
    vit_config, vit_weights = bb.load_weights(args.backbone)
    head_config = hd.HeadConfig(
        blocks=vit_config.blocks,
        backbone_width=vit_config.width,
        proj_width=opts["proj_width"],
        depth=opts["depth"],
        dropout=opts["dropout"],
        use_tie=not opts["no_tie"],
        last_block_only=opts["last_block_only"],
    )
    xi = 0.0 if opts["no_contrastive"] else opts["xi"]
    config = TrainConfig(
        head=head_config,
        loss=LossConfig(xi=xi, tau=opts["tau"]),
        batch_size=opts["batch_size"],
        lr=opts["lr"],
        epochs=opts["epochs"],
        seed=opts["seed"],
        augment=not opts["no_augment"],
        cache_features=opts["cache_features"],
    )
    out = Path(args.out)
    _write_resolved(out, opts)
    params, history = train(args.data, (vit_config, vit_weights), config, out_dir=out)
    hd.save_head(out / "head.rwc", params, head_config)
    print(f"trained {len(history)} steps; head written to {out / 'head.rwc'}")

    if args.val:
        report = evaluate((head_config, params), (vit_config, vit_weights), args.val)
        write_report(report, out, stem="val_report")
        print(f"validation: avg_acc={report.avg_acc:.4f} avg_ap={report.avg_ap:.4f}")
        if report.skipped:
            return 1
    return 0


def _load_pair(args):
    vit_config, vit_weights = bb.load_weights(args.backbone)
    head_config, head_params = hd.load_head(args.head)
    if head_config.blocks != vit_config.blocks or head_config.backbone_width != vit_config.width:
        raise ValueError(
            f"head ({head_config.blocks} blocks, width {head_config.backbone_width}) "
            f"does not match backbone ({vit_config.blocks} blocks, width {vit_config.width})"
        )
    return (head_config, head_params), (vit_config, vit_weights)


def _print_report(report):
    for d in report.datasets:
        print(f"{d.name}: n={d.n} acc={d.acc:.4f} ap={d.ap:.4f}")
    print(f"AVG: acc={report.avg_acc:.4f} ap={report.avg_ap:.4f}")
    for name in report.skipped:
        print(f"skipped: {name}")


def cmd_eval(args) -> int:
    head, backbone = _load_pair(args)
    report = evaluate(head, backbone, args.data_dirs, batch_size=args.batch_size)
    if args.out:
        _write_resolved(args.out, {"batch_size": args.batch_size, "seed": args.seed})
        write_report(report, args.out)
    _print_report(report)
    return 1 if report.skipped else 0


_PERTURB_DEFAULTS = {
    "seed": 0,
    "apply_prob": 0.5,
    "blur_sigma_max": 3.0,
    "jpeg_quality_min": 30,
    "jpeg_quality_max": 100,
    "crop_fraction": 0.875,
    "noise_sigma_max": 0.05,
}


def cmd_perturb_eval(args) -> int:
    opts = _resolve(args, _PERTURB_DEFAULTS)
    head, backbone = _load_pair(args)
    cfg = PerturbConfig(
        apply_prob=opts["apply_prob"],
        blur_sigma=(0.0, opts["blur_sigma_max"]),
        jpeg_quality=(opts["jpeg_quality_min"], opts["jpeg_quality_max"]),
        crop_fraction=opts["crop_fraction"],
        noise_sigma=(0.0, opts["noise_sigma_max"]),
    )
    rng = Rng(opts["seed"])

    def transform(sample, _idx):
        return perturb(sample, args.kind, rng.derive("perturb", sample.id), cfg)

    report = evaluate(head, backbone, args.data_dirs, batch_size=args.batch_size,
                      transform=transform)
    if args.out:
        _write_resolved(args.out, {**opts, "kind": args.kind})
        write_report(report, args.out, stem=f"report_{args.kind}")
    _print_report(report)
    return 1 if report.skipped else 0


def cmd_analyze_importance(args) -> int:
    head_config, head_params = hd.load_head(args.head)
    if head_params.importance is None:
        raise ValueError("head was trained without the importance estimator")
    freq = importance_frequency(head_params.importance)
    if args.out:
        write_importance_csv(freq, args.out)
    for l, f in enumerate(freq, start=1):
        print(f"block {l}: {f:.4f}")
    print(f"sum: {freq.sum():.6f}")
    return 0


def cmd_param_count(args) -> int:
    if args.config:
        config = hd.HeadConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        missing = [
            flag for flag, value in (
                ("--blocks", args.blocks),
                ("--backbone-width", args.backbone_width),
                ("--proj-width", args.proj_width),
                ("--depth", args.depth),
            ) if value is None
        ]
        if missing:
            raise ValueError(f"param-count needs --config or {' '.join(missing)}")
        config = hd.HeadConfig(
            blocks=args.blocks,
            backbone_width=args.backbone_width,
            proj_width=args.proj_width,
            depth=args.depth,
            use_tie=not args.no_tie,
            last_block_only=args.last_block_only,
        )
    print(f"{hd.param_count(config):,}")
    return 0


def cmd_export_features(args) -> int:
    head, backbone = _load_pair(args)
    head_config, head_params = head
    vit_config, vit_weights = backbone
    rows = []
    batch, meta = [], []

    def flush():
        if not batch:
            return
        k = bb.encode_collect(np.stack(batch), vit_weights, vit_config)
        if head_config.last_block_only:
            k = k[:, -1:, :]
        _, feats, _ = hd.forward(k, head_params, head_config, mode="eval")
        for (sid, label), f in zip(meta, feats):
            rows.append(f"{sid},{label}," + ",".join(repr(float(v)) for v in f))
        batch.clear()
        meta.clear()

    for sample in load_dataset(args.data):
        sample = preprocess_eval(sample, crop_side=vit_config.image_side)
        batch.append(sample.pixels)
        meta.append((sample.id, sample.label))
        if len(batch) == args.batch_size:
            flush()
    flush()

    header = "id,label," + ",".join(f"f{i}" for i in range(head_config.proj_width))
    Path(args.out).write_text(header + "\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


def cmd_synth_toy(args) -> int:
    manifest = synth_toy_dataset(
        args.out, args.n_per_class, args.side, args.amplitude,
        Rng(args.seed), patch=args.patch,
    )
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_make_toy_backbone(args) -> int:
    config = bb.ViTConfig(
        width=args.width, blocks=args.blocks, patch=args.patch,
        heads=args.heads, image_side=args.image_side,
    )
    weights = bb.random_backbone(config, Rng(args.seed), with_pre_ln=args.pre_ln)
    bb.save_weights(args.out, config, weights)
    print(f"wrote toy backbone {config.to_dict()} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rine", description="Synthetic-image detector pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detection head")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", nargs="*", default=[], help="validation dataset dirs")
    p.add_argument("--backbone", required=True, help="backbone container file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="JSON options file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--xi", type=float, help="contrastive loss weight")
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--proj-width", type=int, dest="proj_width")
    p.add_argument("--depth", type=int, help="projection stack depth")
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-tie", action="store_const", const=True, dest="no_tie",
                   help="ablation: uniform block weights instead of learned")
    p.add_argument("--no-contrastive", action="store_const", const=True,
                   dest="no_contrastive", help="ablation: cross-entropy only")
    p.add_argument("--last-block-only", action="store_const", const=True,
                   dest="last_block_only", help="ablation: final CLS token only")
    p.add_argument("--no-augment", action="store_const", const=True, dest="no_augment")
    p.add_argument("--cache-features", action="store_const", const=True,
                   dest="cache_features")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a head on dataset directories")
    p.add_argument("--head", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--data-dirs", nargs="+", required=True, dest="data_dirs")
    p.add_argument("--out", help="directory for report.json / report.csv")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb-eval", help="evaluate under a perturbation kind")
    p.add_argument("--head", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--data-dirs", nargs="+", required=True, dest="data_dirs")
    p.add_argument("--kind", required=True, choices=PERTURB_KINDS)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--apply-prob", type=float, dest="apply_prob")
    p.add_argument("--blur-sigma-max", type=float, dest="blur_sigma_max")
    p.add_argument("--jpeg-quality-min", type=int, dest="jpeg_quality_min")
    p.add_argument("--jpeg-quality-max", type=int, dest="jpeg_quality_max")
    p.add_argument("--crop-fraction", type=float, dest="crop_fraction")
    p.add_argument("--noise-sigma-max", type=float, dest="noise_sigma_max")
    p.set_defaults(func=cmd_perturb_eval)

    p = sub.add_parser("analyze-importance", help="block importance frequencies")
    p.add_argument("--head", required=True)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_analyze_importance)

    p = sub.add_parser("param-count", help="closed-form trainable parameter count")
    p.add_argument("--config", help="head-config JSON (alternative to the flags)")
    p.add_argument("--blocks", type=int)
    p.add_argument("--backbone-width", type=int, dest="backbone_width")
    p.add_argument("--proj-width", type=int, dest="proj_width")
    p.add_argument("--depth", type=int)
    p.add_argument("--no-tie", action="store_true", dest="no_tie")
    p.add_argument("--last-block-only", action="store_true", dest="last_block_only")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("export-features", help="dump head feature vectors as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("synth-toy", help="generate the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, required=True, dest="n_per_class")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--amplitude", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=8)
    p.set_defaults(func=cmd_synth_toy)

    p = sub.add_parser("make-toy-backbone", help="random frozen backbone container")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--image-side", type=int, default=32, dest="image_side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pre-ln", action="store_true", dest="pre_ln")
    p.set_defaults(func=cmd_make_toy_backbone)

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
