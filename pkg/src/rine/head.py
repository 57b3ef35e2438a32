"""Trainable fusion head over the frozen backbone's CLS-token stack.

Pipeline: a projection stack applied per (image, block) position with
weights shared across blocks -> softmax importance weights over blocks
(one weight per feature column, learned as a logit table) collapse the
block axis -> a second projection stack -> a 3-layer classifier emitting
one logit per image.  Dropout follows every ReLU in both projection
stacks (train mode only); the classifier has none.

The backward pass is written out by hand; it consumes the activations
cached in ``ForwardTrace`` and produces exact gradients for every
trainable tensor, including the importance logits through the softmax
Jacobian.  The backbone is frozen, so gradients stop at the head input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, check_tensors, read_container, write_container
from .kernels import Rng, dropout_mask, relu, softmax

Array = np.ndarray


@dataclass(frozen=True)
class HeadConfig:
    blocks: int                 # backbone block count n
    backbone_width: int         # CLS token width d
    proj_width: int             # projected feature width d'
    depth: int                  # layers per projection stack q
    dropout: float = 0.5
    use_tie: bool = True        # learnable importance weights vs uniform mean
    last_block_only: bool = False   # ablation: final CLS token only

    def __post_init__(self):
        if self.depth < 1 or self.proj_width < 1:
            raise ValueError("depth and proj_width must be >= 1")

    @property
    def fused_blocks(self) -> int:
        """Block positions the head actually fuses (1 in last-block mode)."""
        return 1 if self.last_block_only else self.blocks

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "backbone_width": self.backbone_width,
            "proj_width": self.proj_width,
            "depth": self.depth,
            "dropout": self.dropout,
            "use_tie": self.use_tie,
            "last_block_only": self.last_block_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclass
class Dense:
    weight: Array               # (in, out), applied as x @ W + b
    bias: Array                 # (out,)


@dataclass
class HeadParams:
    proj_in: list[Dense]
    importance: Array | None    # (fused_blocks, proj_width) logits; None w/o TIE
    proj_out: list[Dense]
    classifier: list[Dense]     # two ReLU layers + one output layer

    def named(self) -> dict[str, Array]:
        """Flat name -> tensor view; every trainable scalar appears once."""
        out = {}
        for m, layer in enumerate(self.proj_in):
            out[f"proj_in.{m}.weight"] = layer.weight
            out[f"proj_in.{m}.bias"] = layer.bias
        if self.importance is not None:
            out["importance.logits"] = self.importance
        for m, layer in enumerate(self.proj_out):
            out[f"proj_out.{m}.weight"] = layer.weight
            out[f"proj_out.{m}.bias"] = layer.bias
        for j, layer in enumerate(self.classifier):
            out[f"classifier.{j}.weight"] = layer.weight
            out[f"classifier.{j}.bias"] = layer.bias
        return out

    def replace(self, named: dict[str, Array]) -> "HeadParams":
        """New HeadParams taking tensors from ``named`` (same key scheme)."""
        def dense(prefix, n):
            return [
                Dense(named[f"{prefix}.{m}.weight"], named[f"{prefix}.{m}.bias"])
                for m in range(n)
            ]
        return HeadParams(
            proj_in=dense("proj_in", len(self.proj_in)),
            importance=named.get("importance.logits"),
            proj_out=dense("proj_out", len(self.proj_out)),
            classifier=dense("classifier", len(self.classifier)),
        )

    def astype(self, dtype) -> "HeadParams":
        return self.replace({k: v.astype(dtype) for k, v in self.named().items()})

    def copy(self) -> "HeadParams":
        return self.replace({k: v.copy() for k, v in self.named().items()})


def init_params(config: HeadConfig, rng: Rng) -> HeadParams:
    """Weights ~ uniform(+-1/sqrt(fan_in)), biases 0, importance ~ N(0, 0.02^2).

    Each tensor draws from its own derived substream, so the same seed
    gives the same tensors regardless of ablation flags elsewhere.
    """
    d, dp, q = config.backbone_width, config.proj_width, config.depth

    def uniform(r: Rng, fan_in: int, shape) -> Array:
        bound = 1.0 / np.sqrt(fan_in)
        return r.uniform(-bound, bound, shape).astype(np.float32)

    def stack(prefix: str, first_in: int) -> list[Dense]:
        layers = []
        for m in range(q):
            fan_in = first_in if m == 0 else dp
            layers.append(
                Dense(
                    uniform(rng.derive(prefix, m), fan_in, (fan_in, dp)),
                    np.zeros(dp, np.float32),
                )
            )
        return layers

    importance = None
    if config.use_tie:
        importance = (
            rng.derive("importance")
            .normal(0.0, 0.02, (config.fused_blocks, dp))
            .astype(np.float32)
        )
    classifier = [
        Dense(uniform(rng.derive("classifier", 0), dp, (dp, dp)), np.zeros(dp, np.float32)),
        Dense(uniform(rng.derive("classifier", 1), dp, (dp, dp)), np.zeros(dp, np.float32)),
        Dense(uniform(rng.derive("classifier", 2), dp, (dp, 1)), np.zeros(1, np.float32)),
    ]
    return HeadParams(
        proj_in=stack("proj_in", d),
        importance=importance,
        proj_out=stack("proj_out", dp),
        classifier=classifier,
    )


@dataclass
class _LayerTrace:
    x: Array                    # layer input
    active: Array               # ReLU pass-through mask (pre-activation > 0)
    drop: Array | None          # dropout mask, None in eval mode


@dataclass
class ForwardTrace:
    config: HeadConfig
    mode: str
    proj_in: list[_LayerTrace] = field(default_factory=list)
    stacked: Array | None = None        # (b, n_eff, d') after proj_in
    weights: Array | None = None        # (n_eff, d') block weights (softmax/uniform)
    fused: Array | None = None          # (b, d')
    proj_out: list[_LayerTrace] = field(default_factory=list)
    features: Array | None = None       # (b, d') contrastive features
    cls_in: list[Array] = field(default_factory=list)      # classifier layer inputs
    cls_active: list[Array] = field(default_factory=list)  # ReLU masks, first 2 layers


def _layer_forward(x, layer: Dense, drop_rate, rng, train: bool):
    z = x @ layer.weight + layer.bias
    active = z > 0
    a = np.maximum(z, 0)
    drop = None
    if train and drop_rate > 0:
        drop = dropout_mask(rng, a.shape, drop_rate, dtype=a.dtype)
        a = a * drop
    return a, _LayerTrace(x=x, active=active, drop=drop)


def _layer_backward(go, layer: Dense, tr: _LayerTrace):
    if tr.drop is not None:
        go = go * tr.drop
    gz = go * tr.active
    flat_x = tr.x.reshape(-1, tr.x.shape[-1])
    flat_gz = gz.reshape(-1, gz.shape[-1])
    gw = flat_x.T @ flat_gz
    gb = flat_gz.sum(axis=0)
    gx = gz @ layer.weight.T
    return gx, gw, gb


def forward(
    cls_stack: Array,
    params: HeadParams,
    config: HeadConfig,
    mode: str = "eval",
    rng: Rng | None = None,
):
    """Head forward pass.

    ``cls_stack``: (b, fused_blocks, backbone_width); in last-block-only
    mode the caller passes the already-sliced (b, 1, d) stack.  Returns
    (logits (b,), features (b, proj_width), trace); ``features`` is the
    second projection stack's output, the input to the contrastive loss.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"forward: mode must be train or eval, got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("forward: train mode needs an rng for dropout")
    cls_stack = np.asarray(cls_stack)
    n_eff = config.fused_blocks
    if cls_stack.ndim != 3 or cls_stack.shape[1:] != (n_eff, config.backbone_width):
        raise ValueError(
            f"forward: cls_stack shape {cls_stack.shape} does not match "
            f"(b, {n_eff}, {config.backbone_width})"
        )

    trace = ForwardTrace(config=config, mode=mode)
    h = cls_stack
    for m, layer in enumerate(params.proj_in):
        h, tr = _layer_forward(
            h, layer, config.dropout,
            rng.derive("proj_in", m) if train else None, train,
        )
        trace.proj_in.append(tr)
    trace.stacked = h                                   # (b, n_eff, d')

    if config.use_tie:
        w = softmax(params.importance, axis=0)          # column-wise over blocks
    else:
        w = np.full((n_eff, config.proj_width), 1.0 / n_eff, dtype=h.dtype)
    trace.weights = w
    fused = np.einsum("bld,ld->bd", h, w)
    trace.fused = fused

    h2 = fused
    for m, layer in enumerate(params.proj_out):
        h2, tr = _layer_forward(
            h2, layer, config.dropout,
            rng.derive("proj_out", m) if train else None, train,
        )
        trace.proj_out.append(tr)
    trace.features = h2

    c = h2
    for j, layer in enumerate(params.classifier[:-1]):
        z = c @ layer.weight + layer.bias
        trace.cls_in.append(c)
        trace.cls_active.append(z > 0)
        c = np.maximum(z, 0)
    trace.cls_in.append(c)
    logits = (c @ params.classifier[-1].weight + params.classifier[-1].bias)[:, 0]
    return logits, h2, trace


def backward(
    trace: ForwardTrace,
    params: HeadParams,
    grad_logits: Array,
    grad_features: Array | None = None,
) -> dict[str, Array]:
    """Exact gradients for every trainable tensor.

    ``grad_logits`` feeds the classifier output; ``grad_features`` (for
    the contrastive term, already xi-scaled) joins at the second
    projection stack's output.  Keys match ``HeadParams.named()``.
    """
    config = trace.config
    grads: dict[str, Array] = {}

    # classifier, last layer first
    g = np.asarray(grad_logits)[:, None]                # (b, 1)
    last = params.classifier[-1]
    grads["classifier.2.weight"] = trace.cls_in[-1].T @ g
    grads["classifier.2.bias"] = g.sum(axis=0)
    g = g @ last.weight.T
    for j in (1, 0):
        gz = g * trace.cls_active[j]
        grads[f"classifier.{j}.weight"] = trace.cls_in[j].T @ gz
        grads[f"classifier.{j}.bias"] = gz.sum(axis=0)
        g = gz @ params.classifier[j].weight.T

    if grad_features is not None:
        g = g + grad_features

    for m in range(len(params.proj_out) - 1, -1, -1):
        g, gw, gb = _layer_backward(g, params.proj_out[m], trace.proj_out[m])
        grads[f"proj_out.{m}.weight"] = gw
        grads[f"proj_out.{m}.bias"] = gb

    # fused = sum_l weights[l, k] * stacked[b, l, k]
    g_stacked = g[:, None, :] * trace.weights[None, :, :]
    if config.use_tie:
        g_w = np.einsum("bd,bld->ld", g, trace.stacked)
        s = trace.weights
        grads["importance.logits"] = s * (g_w - (g_w * s).sum(axis=0, keepdims=True))

    g = g_stacked
    for m in range(len(params.proj_in) - 1, -1, -1):
        g, gw, gb = _layer_backward(g, params.proj_in[m], trace.proj_in[m])
        grads[f"proj_in.{m}.weight"] = gw
        grads[f"proj_in.{m}.bias"] = gb
    return grads


def param_count(config: HeadConfig) -> int:
    """Closed-form trainable parameter count for a head configuration."""
    d, dp, q = config.backbone_width, config.proj_width, config.depth
    proj_in = (d * dp + dp) + (q - 1) * (dp * dp + dp)
    proj_out = q * (dp * dp + dp)
    tie = config.fused_blocks * dp if config.use_tie else 0
    classifier = 2 * (dp * dp + dp) + (dp + 1)
    return proj_in + proj_out + tie + classifier


def _expected_shapes(config: HeadConfig) -> dict:
    d, dp, q = config.backbone_width, config.proj_width, config.depth
    shapes = {}
    for m in range(q):
        fan_in = d if m == 0 else dp
        shapes[f"proj_in.{m}.weight"] = (fan_in, dp)
        shapes[f"proj_in.{m}.bias"] = (dp,)
        shapes[f"proj_out.{m}.weight"] = (dp, dp)
        shapes[f"proj_out.{m}.bias"] = (dp,)
    if config.use_tie:
        shapes["importance.logits"] = (config.fused_blocks, dp)
    shapes["classifier.0.weight"] = (dp, dp)
    shapes["classifier.0.bias"] = (dp,)
    shapes["classifier.1.weight"] = (dp, dp)
    shapes["classifier.1.bias"] = (dp,)
    shapes["classifier.2.weight"] = (dp, 1)
    shapes["classifier.2.bias"] = (1,)
    return shapes


def save_head(path, params: HeadParams, config: HeadConfig) -> None:
    write_container(path, "head", {"config": config.to_dict()}, params.named())


def load_head(path) -> tuple[HeadConfig, HeadParams]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "head":
        raise ContainerError(f"{path}: kind {manifest.get('kind')!r} is not a head")
    config = HeadConfig.from_dict(manifest["meta"]["config"])
    check_tensors(tensors, _expected_shapes(config), context=str(path))

    def dense(prefix):
        return [
            Dense(tensors[f"{prefix}.{m}.weight"], tensors[f"{prefix}.{m}.bias"])
            for m in range(config.depth)
        ]

    params = HeadParams(
        proj_in=dense("proj_in"),
        importance=tensors.get("importance.logits"),
        proj_out=dense("proj_out"),
        classifier=[
            Dense(tensors[f"classifier.{j}.weight"], tensors[f"classifier.{j}.bias"])
            for j in range(3)
        ],
    )
    return config, params
