"""Evaluation metrics, the multi-dataset harness, and the block-importance
frequency analysis.

Fixed conventions so numbers are platform-independent: the accuracy
threshold is 0.5 with ties counted as positive predictions; average
precision is the non-interpolated step sum over a descending score sort
with ties broken by original index; block-importance argmax ties go to the
smallest block index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ViTConfig, ViTWeights, encode_collect
from .data import load_dataset, preprocess_eval
from .head import HeadConfig, HeadParams, forward
from .kernels import sigmoid

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass
class DatasetMetrics:
    name: str
    n: int
    acc: float
    ap: float


@dataclass
class EvalReport:
    datasets: list[DatasetMetrics] = field(default_factory=list)
    avg_acc: float = float("nan")
    avg_ap: float = float("nan")
    skipped: list[str] = field(default_factory=list)   # dataset names that errored

    def to_dict(self) -> dict:
        return {
            "datasets": [
                {"name": d.name, "n": d.n, "acc": d.acc, "ap": d.ap}
                for d in self.datasets
            ],
            "avg_acc": self.avg_acc,
            "avg_ap": self.avg_ap,
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        lines = ["name,n,acc,ap"]
        for d in self.datasets:
            lines.append(f"{d.name},{d.n},{d.acc!r},{d.ap!r}")
        lines.append(f"AVG,{sum(d.n for d in self.datasets)},{self.avg_acc!r},{self.avg_ap!r}")
        return "\n".join(lines) + "\n"


def accuracy(scores: Array, labels: Array) -> float:
    """Fraction of correct 0.5-threshold decisions; score == 0.5 predicts
    positive.  Scores are probabilities in [0, 1]."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("accuracy: empty input")
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("accuracy: scores must be probabilities in [0, 1]")
    pred = scores >= 0.5
    return float(np.mean(pred == labels.astype(bool)))


def average_precision(scores: Array, labels: Array) -> float:
    """Step-wise (non-interpolated) average precision.

    AP = sum over the ranked positives of precision-at-that-rank divided
    by the positive count; descending stable sort, ties kept in original
    index order.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise ValueError("average_precision: empty input")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("average_precision: undefined for single-class labels")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, labels.size + 1)
    return float(precision[ranked].sum() / n_pos)


def importance_frequency(importance_logits: Array) -> Array:
    """Per-block frequency of winning the column-wise importance argmax.

    For each feature column the winning block is the argmax of the logits
    (ties to the smallest block index); returns the (blocks,) histogram of
    wins normalized by the column count, summing to 1.
    """
    a = np.asarray(importance_logits)
    if a.ndim != 2:
        raise ValueError(f"importance_frequency: expected 2-D logits, got {a.shape}")
    winners = np.argmax(a, axis=0)
    counts = np.bincount(winners, minlength=a.shape[0])
    return counts.astype(np.float64) / a.shape[1]


def _scores_for_dir(
    dataset_dir,
    head_config: HeadConfig,
    head_params: HeadParams,
    vit_config: ViTConfig,
    vit_weights: ViTWeights,
    batch_size: int,
    transform=None,
) -> tuple[Array, Array]:
    """Center-crop, encode, run the head in eval mode; returns (probabilities,
    labels).  ``transform`` (sample, sample_index) -> sample runs before the
    crop (the perturbation hook)."""
    scores, labels = [], []
    batch_px, batch_y = [], []

    def flush():
        if not batch_px:
            return
        images = np.stack(batch_px)
        k = encode_collect(images, vit_weights, vit_config)
        if head_config.last_block_only:
            k = k[:, -1:, :]
        logits, _, _ = forward(k, head_params, head_config, mode="eval")
        scores.append(sigmoid(logits))
        labels.extend(batch_y)
        batch_px.clear()
        batch_y.clear()

    for idx, sample in enumerate(load_dataset(dataset_dir)):
        if transform is not None:
            sample = transform(sample, idx)
        sample = preprocess_eval(sample, crop_side=vit_config.image_side)
        batch_px.append(sample.pixels)
        batch_y.append(sample.label)
        if len(batch_px) == batch_size:
            flush()
    flush()
    return np.concatenate(scores), np.asarray(labels)


def evaluate(
    head: tuple[HeadConfig, HeadParams],
    backbone: tuple[ViTConfig, ViTWeights],
    dataset_dirs,
    batch_size: int = 64,
    transform=None,
) -> EvalReport:
    """Score every dataset directory and aggregate an unweighted average.

    Per-dataset failures are logged and listed in ``report.skipped``; the
    average is over the datasets that succeeded.
    """
    head_config, head_params = head
    vit_config, vit_weights = backbone
    report = EvalReport()
    for dataset_dir in dataset_dirs:
        name = Path(dataset_dir).name
        try:
            scores, labels = _scores_for_dir(
                dataset_dir, head_config, head_params, vit_config, vit_weights,
                batch_size, transform,
            )
            metrics = DatasetMetrics(
                name=name,
                n=int(labels.size),
                acc=accuracy(scores, labels),
                ap=average_precision(scores, labels),
            )
            report.datasets.append(metrics)
        except Exception as exc:
            logger.warning("evaluate: skipping dataset %s (%s)", dataset_dir, exc)
            report.skipped.append(name)
    if report.datasets:
        report.avg_acc = float(np.mean([d.acc for d in report.datasets]))
        report.avg_ap = float(np.mean([d.ap for d in report.datasets]))
    return report


def write_report(report: EvalReport, out_dir, stem: str = "report") -> None:
    """Emit the report as both JSON and CSV under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(report.to_json())
    (out_dir / f"{stem}.csv").write_text(report.to_csv())


def write_importance_csv(frequencies: Array, path) -> None:
    """CSV (block_index, frequency); block indices are 1-based."""
    lines = ["block_index,frequency"]
    for l, f in enumerate(frequencies, start=1):
        lines.append(f"{l},{float(f)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
