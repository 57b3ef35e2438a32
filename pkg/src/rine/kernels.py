"""Deterministic dense-array kernels and counter-based randomness.

All kernels are pure functions over numpy arrays.  float32 is the working
precision throughout the package; passing float64 inputs keeps the whole
computation in float64, which the finite-difference gradient checks rely on.

Randomness comes from Philox4x32-10 (a counter-based generator), so a seed
fully determines every draw sequence on every platform.  Independent
substreams are derived from a parent stream by hashing string/int labels
into the Philox key, never by drawing from the parent, so stream contents
do not depend on consumption order.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import erf

Array = np.ndarray

_SQRT2 = math.sqrt(2.0)    # Python float: keeps float32 inputs in float32
_U64 = (1 << 64) - 1


class Rng:
    """Seeded counter-based random stream (numpy Philox4x32-10).

    The 128-bit Philox key is ``seed`` in the low word and a label hash in
    the high word; ``derive`` produces an independent stream for a new label
    tuple without touching this stream's counter.
    """

    def __init__(self, seed: int, _label_hash: int = 0):
        self.seed = int(seed) & _U64
        self._label_hash = int(_label_hash) & _U64
        key = self.seed | (self._label_hash << 64)
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def derive(self, *labels) -> "Rng":
        """Independent substream keyed by (seed, labels); order-insensitive
        with respect to draws made from self."""
        h = hashlib.blake2b(digest_size=8)
        h.update(repr((self._label_hash,) + labels).encode())
        return Rng(self.seed, int.from_bytes(h.digest(), "little"))

    @property
    def state(self):
        """Philox counter state (JSON-serializable dict)."""
        return self._bitgen.state

    # thin draw helpers so call sites stay short
    def random(self, shape=None, dtype=np.float64):
        return self.gen.random(shape, dtype=dtype)

    def uniform(self, low, high, shape=None):
        return self.gen.uniform(low, high, shape)

    def normal(self, loc, scale, shape=None):
        return self.gen.normal(loc, scale, shape)

    def integers(self, low, high, shape=None):
        """Uniform integers in [low, high] inclusive."""
        return self.gen.integers(low, high, size=shape, endpoint=True)

    def permutation(self, n: int) -> Array:
        return self.gen.permutation(n)


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with an explicit inner-dimension check.

    Accepts stacked operands (numpy broadcasting rules); the contraction is
    always last-axis-of-a against second-to-last-of-b.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    return a @ b


def softmax(x: Array, axis: int) -> Array:
    """Max-stabilized softmax along ``axis``; slices sum to 1."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Biased variance (divide by d), matching the transformer convention.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match feature width {x.shape[-1]}"
        )
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def gelu(x: Array) -> Array:
    """Exact-Phi GELU: x * Phi(x) with Phi from erf (no tanh approximation)."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def relu(x: Array) -> Array:
    return np.maximum(np.asarray(x), 0)


def sigmoid(x: Array) -> Array:
    """Stable logistic; evaluated piecewise to avoid exp overflow."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout_mask(rng: Rng, shape, rate: float, dtype=np.float32) -> Array:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate).

    Eval-time code applies no rescaling because the keep branch already
    carries the 1/(1-rate) factor.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout_mask: rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=dtype)
    return keep.astype(dtype) * scale
