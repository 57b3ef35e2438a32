"""Adam training loop for the head, with the fixed learning-rate schedule,
ablation switches, hyperparameter grid search, and checkpoint/resume.

The backbone stays frozen: batches flow augment -> crop -> encode (no
gradients) -> head forward -> losses -> hand-derived backward -> Adam.
Every random choice (shuffling, augmentation, dropout) comes from a
substream derived from (seed, purpose, counter), so a run is a pure
function of its inputs and resuming from a checkpoint continues
bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import ViTConfig, ViTWeights, encode_collect
from .container import ContainerError, read_container, write_container
from .data import ImageSample, augment_train, load_dataset, preprocess_eval
from .head import HeadConfig, HeadParams, backward, forward, init_params
from .kernels import Rng
from .losses import LossConfig, bce_with_logits, combined, supcontrast
from .metrics import evaluate

logger = logging.getLogger(__name__)

Array = np.ndarray

# default hyperparameter search grid
GRID_XI = (0.1, 0.2, 0.4, 0.8)
GRID_DEPTH = (1, 2, 4)
GRID_WIDTH = (128, 256, 512, 1024)


@dataclass(frozen=True)
class TrainConfig:
    head: HeadConfig
    loss: LossConfig = LossConfig()
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0       # deliberately none by default
    grad_clip: float = 0.0          # 0 disables; deliberately off by default
    seed: int = 0
    augment: bool = True
    cache_features: bool = False    # only honored when augment is off

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs pairs)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "head": self.head.to_dict(),
            "loss": self.loss.to_dict(),
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "augment": self.augment,
            "cache_features": self.cache_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["head"] = HeadConfig.from_dict(d["head"])
        d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def effective_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Factor-10 drops entering epochs 6 and 11; short runs stay constant."""
    if total_epochs <= 5 or epoch <= 5:
        return base_lr
    if epoch <= 10:
        return base_lr * 0.1
    return base_lr * 0.01


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    moments: tuple[dict[str, Array], dict[str, Array]],
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update; ``step`` is 1-based.

    Returns (new_params, (new_m, new_v)); inputs are not mutated.  A
    non-finite gradient aborts, naming the offending tensor.
    """
    new_p, new_m, new_v = {}, {}, {}
    m_prev, v_prev = moments
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in {name!r}")
        m = beta1 * m_prev[name] + (1.0 - beta1) * g
        v = beta2 * v_prev[name] + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_p, (new_m, new_v)


def _zeros_like(params: dict[str, Array]) -> dict[str, Array]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _materialize(dataset) -> list[ImageSample]:
    if isinstance(dataset, (str, Path)):
        return list(load_dataset(dataset))
    return list(dataset)


def _encode_batch(batch, vit_config, vit_weights, head_config, cache):
    """Center-crop + encode a batch, reading/writing the feature cache."""
    def encode(samples):
        images = np.stack(
            [preprocess_eval(s, crop_side=vit_config.image_side).pixels for s in samples]
        )
        return encode_collect(images, vit_weights, vit_config)

    if cache is None:
        k = encode(batch)
    else:
        k = np.stack([cache[s.id] for s in batch])
    if head_config.last_block_only:
        k = k[:, -1:, :]
    return k


def _encode_augmented(batch, vit_config, vit_weights, head_config, root_rng, epoch):
    """Per-sample augmentation rng is keyed on (seed, sample id, epoch)."""
    images = np.stack(
        [
            augment_train(
                s, root_rng.derive("augment", s.id, epoch),
                crop_side=vit_config.image_side,
            ).pixels
            for s in batch
        ]
    )
    k = encode_collect(images, vit_weights, vit_config)
    if head_config.last_block_only:
        k = k[:, -1:, :]
    return k


def save_checkpoint(
    path, params: HeadParams, moments, global_step: int, epoch: int,
    steps_done_in_epoch: int, config: TrainConfig,
) -> None:
    tensors = {}
    named = params.named()
    for name, p in named.items():
        tensors[f"param.{name}"] = p
        tensors[f"m.{name}"] = moments[0][name]
        tensors[f"v.{name}"] = moments[1][name]
    meta = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "global_step": global_step,
        "epoch": epoch,
        "steps_done_in_epoch": steps_done_in_epoch,
    }
    write_container(path, "checkpoint", meta, tensors)


def load_checkpoint(path, config: TrainConfig):
    """Restore (params, moments, global_step, epoch, steps_done_in_epoch).

    The stored config digest must match ``config``: resuming under a
    different configuration would not continue the same run.
    """
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise ContainerError(f"{path}: kind {manifest.get('kind')!r} is not a checkpoint")
    meta = manifest["meta"]
    if meta["config_digest"] != config.digest():
        raise ContainerError(
            f"{path}: checkpoint was written under a different training config"
        )
    template = init_params(config.head, Rng(config.seed))
    named = {k: tensors[f"param.{k}"] for k in template.named()}
    m = {k: tensors[f"m.{k}"] for k in named}
    v = {k: tensors[f"v.{k}"] for k in named}
    params = template.replace(named)
    return params, (m, v), meta["global_step"], meta["epoch"], meta["steps_done_in_epoch"]


def history_csv(history: list[dict]) -> str:
    lines = ["step,ce_loss,cont_loss,lr"]
    for row in history:
        lines.append(
            f"{row['step']},{row['ce_loss']!r},{row['cont_loss']!r},{row['lr']!r}"
        )
    return "\n".join(lines) + "\n"


def train(
    dataset,
    backbone: tuple[ViTConfig, ViTWeights],
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_after_steps: int | None = None,
) -> tuple[HeadParams, list[dict]]:
    """Train the head; returns (final params, per-step history).

    ``dataset`` is a directory in the standard layout or a sequence of
    ImageSample.  With ``out_dir`` set, writes the resolved config, the
    history CSV, and a checkpoint there.  ``stop_after_steps`` halts once
    the global step counter reaches that value (checkpoint still written),
    which together with ``resume_from`` gives bit-identical continuation
    from any step boundary.
    """
    vit_config, vit_weights = backbone
    if config.head.blocks != vit_config.blocks:
        raise ValueError(
            f"head expects {config.head.blocks} blocks, backbone has {vit_config.blocks}"
        )
    if config.head.backbone_width != vit_config.width:
        raise ValueError(
            f"head expects width {config.head.backbone_width}, "
            f"backbone has {vit_config.width}"
        )

    samples = _materialize(dataset)
    if not samples:
        raise ValueError("train: empty dataset")
    if len({s.label for s in samples}) < 2:
        logger.warning(
            "train: single-class dataset; contrastive term is degenerate, "
            "proceeding with cross-entropy only"
        )

    cache = None
    if config.cache_features:
        if config.augment:
            logger.warning(
                "train: feature cache disabled because augmentation changes "
                "backbone inputs every epoch"
            )
        else:
            # precompute in fixed-size chunks in dataset order so the cache
            # content never depends on the resume point
            cache = {}
            for i in range(0, len(samples), config.batch_size):
                chunk = samples[i : i + config.batch_size]
                images = np.stack(
                    [
                        preprocess_eval(s, crop_side=vit_config.image_side).pixels
                        for s in chunk
                    ]
                )
                k = encode_collect(images, vit_weights, vit_config)
                for row, s in zip(k, chunk):
                    cache[s.id] = row

    root_rng = Rng(config.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    xi = config.loss.xi

    if resume_from is not None:
        params, moments, global_step, epoch0, done0 = load_checkpoint(
            resume_from, config
        )
        if done0 >= steps_per_epoch:
            epoch0, done0 = epoch0 + 1, 0
    else:
        params = init_params(config.head, Rng(config.seed))
        moments = (_zeros_like(params.named()), _zeros_like(params.named()))
        global_step, epoch0, done0 = 0, 1, 0

    history: list[dict] = []
    stopped = False
    at_epoch, at_done = config.epochs, steps_per_epoch
    for epoch in range(epoch0, config.epochs + 1):
        lr = effective_lr(config.lr, epoch, config.epochs)
        perm = root_rng.derive("shuffle", epoch).permutation(n)
        first = done0 if epoch == epoch0 else 0
        for bi in range(first, steps_per_epoch):
            batch = [samples[i] for i in perm[bi * config.batch_size : (bi + 1) * config.batch_size]]
            if config.augment:
                k = _encode_augmented(
                    batch, vit_config, vit_weights, config.head, root_rng, epoch
                )
            else:
                if cache is None:
                    k = _encode_batch(batch, vit_config, vit_weights, config.head, None)
                else:
                    k = _encode_batch(batch, vit_config, vit_weights, config.head, cache)

            global_step += 1
            labels = np.asarray([s.label for s in batch])
            logits, feats, trace = forward(
                k, params, config.head, mode="train",
                rng=root_rng.derive("dropout", global_step),
            )
            ce, g_ce = bce_with_logits(logits, labels)
            if xi > 0 and len(batch) >= 2:
                cont, g_cont = supcontrast(
                    feats, labels, tau=config.loss.tau,
                    normalize=config.loss.normalize_features,
                )
            else:
                cont, g_cont = 0.0, np.zeros_like(feats)
            _, g_logits, g_feats = combined(ce, g_ce, cont, g_cont, xi)

            grads = backward(trace, params, g_logits, g_feats if xi > 0 else None)
            named = params.named()
            if config.weight_decay:
                grads = {k2: g + config.weight_decay * named[k2] for k2, g in grads.items()}
            if config.grad_clip:
                total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if total > config.grad_clip:
                    scale = config.grad_clip / total
                    grads = {k2: g * scale for k2, g in grads.items()}
            new_named, moments = adam_step(
                named, grads, moments, global_step, lr,
                config.beta1, config.beta2, config.adam_eps,
            )
            params = params.replace(new_named)
            history.append(
                {
                    "step": global_step,
                    "epoch": epoch,
                    "ce_loss": ce,
                    "cont_loss": cont,
                    "lr": lr,
                }
            )
            if stop_after_steps is not None and global_step >= stop_after_steps:
                stopped = True
                at_epoch, at_done = epoch, bi + 1
                break
        if stopped:
            break

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2)
        )
        (out_dir / "history.csv").write_text(history_csv(history))
        save_checkpoint(
            out_dir / "checkpoint.rwc", params, moments, global_step,
            at_epoch, at_done, config,
        )
    return params, history


def default_grid() -> list[tuple[float, int, int]]:
    """Default (xi, depth, proj_width) search grid: 48 cells."""
    return [(xi, q, w) for xi in GRID_XI for q in GRID_DEPTH for w in GRID_WIDTH]


def grid_search(
    dataset,
    backbone: tuple[ViTConfig, ViTWeights],
    val_dirs,
    base_config: TrainConfig,
    grid=None,
    selection_metric=None,
) -> list[dict]:
    """Train one head per grid cell (same seed) and rank on validation.

    ``selection_metric(report) -> float`` defaults to avg accuracy + avg
    average-precision.  Per-cell failures are recorded and ranked last
    instead of aborting the sweep.
    """
    cells = default_grid() if grid is None else list(grid)
    results = []
    for xi, depth, width in cells:
        entry = {"xi": xi, "depth": depth, "proj_width": width}
        try:
            cfg = replace(
                base_config,
                head=replace(base_config.head, proj_width=width, depth=depth),
                loss=replace(base_config.loss, xi=xi),
            )
            params, _ = train(dataset, backbone, cfg)
            report = evaluate((cfg.head, params), backbone, val_dirs)
            if report.skipped:
                raise RuntimeError(f"validation datasets failed: {report.skipped}")
            score = (
                selection_metric(report)
                if selection_metric is not None
                else report.avg_acc + report.avg_ap
            )
            entry.update(
                score=float(score), acc=report.avg_acc, ap=report.avg_ap, error=None
            )
        except Exception as exc:
            logger.warning("grid_search: cell %s failed: %s", entry, exc)
            entry.update(score=float("-inf"), acc=None, ap=None, error=str(exc))
        results.append(entry)
    results.sort(key=lambda r: -r["score"])
    return results
