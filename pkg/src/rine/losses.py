"""Training objectives: binary cross-entropy on logits, supervised
contrastive loss on the head's feature vectors, and their weighted sum.

Each loss returns (value, analytic gradient) so the trainer never needs
an autodiff engine.  The contrastive term follows the batch-wise
same-label-attraction formulation: anchors without any same-label partner
are excluded from the average rather than counted as zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kernels import sigmoid

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class LossConfig:
    xi: float = 0.2             # contrastive weight; 0 disables the term
    tau: float = 0.1            # contrastive temperature
    normalize_features: bool = True

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return {
            "xi": self.xi,
            "tau": self.tau,
            "normalize_features": self.normalize_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def bce_with_logits(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean binary cross-entropy in the stable softplus form.

    loss_i = y*softplus(-z) + (1-y)*softplus(z); grad = (sigmoid(z) - y)/b.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.size == 0:
        raise ValueError("bce_with_logits: empty batch")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    y = labels.astype(logits.dtype)
    losses = y * np.logaddexp(0.0, -logits) + (1.0 - y) * np.logaddexp(0.0, logits)
    grad = (sigmoid(logits) - y) / logits.shape[0]
    return float(losses.mean()), grad


def supcontrast(
    features: Array,
    labels: Array,
    tau: float = 0.1,
    normalize: bool = True,
) -> tuple[float, Array]:
    """Supervised contrastive loss with its gradient w.r.t. ``features``.

    With z_i the (optionally L2-normalized) feature rows and
    P(i) = {p != i : label_p == label_i}:

        loss = mean over anchors with P(i) nonempty of
               -1/|P(i)| * sum_{p in P(i)} log
                   exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau)

    A batch where no anchor has a positive (the other class absent and
    every label unique) is degenerate: loss 0, zero gradient, logged.
    """
    f = np.asarray(features)
    labels = np.asarray(labels)
    b = f.shape[0]
    if b < 2:
        raise ValueError("supcontrast: need at least two samples")

    if normalize:
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        norms = np.maximum(norms, np.finfo(f.dtype).tiny)
        z = f / norms
    else:
        z = f

    sim = (z @ z.T) / tau
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(b, dtype=bool)
    pos = same & off_diag
    pos_count = pos.sum(axis=1)
    anchors = pos_count > 0
    m = int(anchors.sum())
    if m == 0:
        logger.warning("supcontrast: no anchor has a positive; degenerate batch")
        return 0.0, np.zeros_like(f)

    # log-denominator excludes the anchor itself
    neg_inf = np.finfo(sim.dtype).min
    sim_off = np.where(off_diag, sim, neg_inf)
    row_max = sim_off.max(axis=1, keepdims=True)
    expo = np.where(off_diag, np.exp(sim_off - row_max), 0.0)
    logden = np.log(expo.sum(axis=1)) + row_max[:, 0]

    per_anchor = np.where(
        anchors,
        -(np.where(pos, sim, 0.0).sum(axis=1) - pos_count * logden)
        / np.maximum(pos_count, 1),
        0.0,
    )
    loss = float(per_anchor.sum() / m)

    # d loss / d sim[i, j] for j != i, anchors only
    soft = expo / expo.sum(axis=1, keepdims=True)
    g_sim = np.where(
        anchors[:, None],
        (soft - pos / np.maximum(pos_count, 1)[:, None]) / m,
        0.0,
    )
    g_z = (g_sim + g_sim.T) @ z / tau
    if normalize:
        grad = (g_z - (g_z * z).sum(axis=1, keepdims=True) * z) / norms
    else:
        grad = g_z
    return loss, grad.astype(f.dtype)


def combined(
    loss_ce: float,
    grad_ce: Array,
    loss_cont: float,
    grad_cont: Array,
    xi: float,
) -> tuple[float, Array, Array]:
    """loss_ce + xi*loss_cont with the matching gradient streams.

    xi == 0 returns the CE loss and gradient untouched (bit-identical) and
    a zero feature gradient.
    """
    if xi == 0:
        return loss_ce, grad_ce, np.zeros_like(grad_cont)
    return loss_ce + xi * loss_cont, grad_ce, xi * grad_cont
