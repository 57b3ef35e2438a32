"""Numpy reference implementation of the container semantics.

Reads a container file and computes the per-block CLS stack exactly as
the format documentation prescribes: channel-major patch flattening,
``x @ W + b`` linear layout (patch projection transposed), pre-norm
blocks, exact-erf GELU, raw block outputs.  Kept free of any detector
package imports so it can arbitrate between the source model and any
consumer of the format.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .container import read_container

_SQRT2 = math.sqrt(2.0)


def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def collect_cls(container_path, images):
    """Per-block CLS stack (b, blocks, width) for [0,1] images."""
    manifest, t = read_container(container_path)
    meta = manifest["meta"]
    cfg = meta["config"]
    width, patch, heads = cfg["width"], cfg["patch"], cfg["heads"]
    head_dim = width // heads

    images = np.asarray(images, np.float32)
    mean = np.asarray(meta["normalization"]["mean"], np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(meta["normalization"]["std"], np.float32).reshape(1, 3, 1, 1)
    x = (images - mean) / std

    b, _, h, w = x.shape
    gh, gw = h // patch, w // patch
    patches = (
        x.reshape(b, 3, gh, patch, gw, patch)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, gh * gw, 3 * patch * patch)
    )
    tokens = patches @ t["patch_proj.weight"].T + t["patch_proj.bias"]
    z = np.concatenate(
        [np.broadcast_to(t["cls_token"], (b, 1, width)), tokens], axis=1
    ) + t["positional"]
    if meta.get("has_pre_ln"):
        z = _layer_norm(z, t["pre_ln.gamma"], t["pre_ln.beta"])

    out = []
    for i in range(cfg["blocks"]):
        p = f"block.{i}."
        hn = _layer_norm(z, t[p + "ln1.gamma"], t[p + "ln1.beta"])
        n_tok = hn.shape[1]

        def split_heads(a):
            return a.reshape(b, n_tok, heads, head_dim).transpose(0, 2, 1, 3)

        q = split_heads(hn @ t[p + "attn.q.weight"] + t[p + "attn.q.bias"])
        k = split_heads(hn @ t[p + "attn.k.weight"] + t[p + "attn.k.bias"])
        v = split_heads(hn @ t[p + "attn.v.weight"] + t[p + "attn.v.bias"])
        attn = _softmax(q @ k.transpose(0, 1, 3, 2) / np.float32(math.sqrt(head_dim)))
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n_tok, width)
        z = z + (ctx @ t[p + "attn.out.weight"] + t[p + "attn.out.bias"])

        h2 = _layer_norm(z, t[p + "ln2.gamma"], t[p + "ln2.beta"])
        z = z + (_gelu(h2 @ t[p + "mlp.fc.weight"] + t[p + "mlp.fc.bias"])
                 @ t[p + "mlp.proj.weight"] + t[p + "mlp.proj.bias"])
        out.append(z[:, 0, :].copy())
    return np.stack(out, axis=1)
