"""Conversion verification: source model vs container reference.

Both sides see the same [0,1] images; the report carries the mean cosine
similarity between their CLS tokens at every block.  A conversion passes
when every block reaches the threshold (0.999 by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import reference, source_model
from .container import read_container


class VerificationError(ValueError):
    pass


@dataclass
class VerifyReport:
    per_block: list[float] = field(default_factory=list)
    threshold: float = 0.999

    @property
    def passed(self) -> bool:
        return all(c >= self.threshold for c in self.per_block)

    @property
    def first_failure(self):
        for i, c in enumerate(self.per_block):
            if c < self.threshold:
                return i
        return None


def _mean_cosine(a, b):
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return float(np.mean(num / np.maximum(den, 1e-12)))


def verify(container_path, state, images, threshold=0.999, heads=None,
           activation="gelu", check=False) -> VerifyReport:
    """Compare per-block CLS stacks; ``check=True`` raises on failure,
    naming the first below-threshold block."""
    manifest, _ = read_container(container_path)
    norm = manifest["meta"]["normalization"]
    src = source_model.collect_cls(
        state, images, norm["mean"], norm["std"], heads=heads, activation=activation
    )
    ref = reference.collect_cls(container_path, images)
    if src.shape != ref.shape:
        raise VerificationError(
            f"shape mismatch: source {src.shape} vs container {ref.shape}"
        )
    report = VerifyReport(threshold=threshold)
    for l in range(src.shape[1]):
        report.per_block.append(_mean_cosine(src[:, l, :], ref[:, l, :]))
    if check and not report.passed:
        l = report.first_failure
        raise VerificationError(
            f"verification failed at block {l}: cosine "
            f"{report.per_block[l]:.6f} < {threshold}"
        )
    return report


def random_images(n: int, side: int, seed: int = 0) -> np.ndarray:
    """Deterministic sample images for verification runs."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 3, side, side)).astype(np.float32)
