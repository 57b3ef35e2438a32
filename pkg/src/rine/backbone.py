"""Frozen Vision-Transformer image encoder with per-block CLS collection.

Forward-only: nothing in this module computes or stores gradients.  The
encoder output used downstream is the stack of CLS tokens taken from every
transformer block's raw output (no final LayerNorm, no multimodal
projection), shaped (batch, blocks, width).

Conventions fixed here because exported checkpoints depend on them:

* patch flattening is (channel, row, col) within each patch, patches
  ordered row-major over the patch grid;
* ``patch_weight`` is stored (width, patch_len) and applied as
  ``patches @ patch_weight.T``;
* every other linear weight is stored (in, out) and applied as ``x @ W``;
* per-channel normalization constants travel inside the weight container
  and are applied here, so callers only crop images to ``image_side`` and
  scale pixels to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, check_tensors, read_container, write_container
from .kernels import Rng, gelu, layer_norm, softmax

Array = np.ndarray


@dataclass(frozen=True)
class ViTConfig:
    width: int                  # token embedding width
    blocks: int                 # number of transformer blocks
    patch: int                  # patch side length in pixels
    heads: int                  # attention heads
    image_side: int = 224

    def __post_init__(self):
        if self.image_side % self.patch != 0:
            raise ValueError(
                f"image_side {self.image_side} not divisible by patch {self.patch}"
            )
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def tokens(self) -> int:
        """Patch count p = image_side^2 / patch^2."""
        return (self.image_side // self.patch) ** 2

    @property
    def patch_len(self) -> int:
        return self.patch * self.patch * 3

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.width

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "blocks": self.blocks,
            "patch": self.patch,
            "heads": self.heads,
            "image_side": self.image_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(
            width=d["width"],
            blocks=d["blocks"],
            patch=d["patch"],
            heads=d["heads"],
            image_side=d["image_side"],
        )


@dataclass
class BlockWeights:
    ln1_gamma: Array
    ln1_beta: Array
    q_w: Array
    q_b: Array
    k_w: Array
    k_b: Array
    v_w: Array
    v_b: Array
    out_w: Array
    out_b: Array
    ln2_gamma: Array
    ln2_beta: Array
    fc_w: Array
    fc_b: Array
    proj_w: Array
    proj_b: Array


@dataclass
class ViTWeights:
    patch_weight: Array         # (width, patch_len)
    patch_bias: Array           # (width,)
    cls_token: Array            # (width,)
    positional: Array           # (tokens + 1, width)
    blocks: list[BlockWeights]
    norm_mean: Array            # (3,) per-channel, applied to [0,1] pixels
    norm_std: Array             # (3,)
    pre_ln: tuple[Array, Array] | None = None   # (gamma, beta) before block 1
    frozen: bool = field(default=True, repr=False)


_BLOCK_FIELDS = {
    "ln1.gamma": "ln1_gamma",
    "ln1.beta": "ln1_beta",
    "attn.q.weight": "q_w",
    "attn.q.bias": "q_b",
    "attn.k.weight": "k_w",
    "attn.k.bias": "k_b",
    "attn.v.weight": "v_w",
    "attn.v.bias": "v_b",
    "attn.out.weight": "out_w",
    "attn.out.bias": "out_b",
    "ln2.gamma": "ln2_gamma",
    "ln2.beta": "ln2_beta",
    "mlp.fc.weight": "fc_w",
    "mlp.fc.bias": "fc_b",
    "mlp.proj.weight": "proj_w",
    "mlp.proj.bias": "proj_b",
}


def _expected_shapes(config: ViTConfig, has_pre_ln: bool) -> dict:
    d, hid = config.width, config.mlp_hidden
    shapes = {
        "patch_proj.weight": (d, config.patch_len),
        "patch_proj.bias": (d,),
        "cls_token": (d,),
        "positional": (config.tokens + 1, d),
    }
    if has_pre_ln:
        shapes["pre_ln.gamma"] = (d,)
        shapes["pre_ln.beta"] = (d,)
    block_shapes = {
        "ln1.gamma": (d,),
        "ln1.beta": (d,),
        "attn.q.weight": (d, d),
        "attn.q.bias": (d,),
        "attn.k.weight": (d, d),
        "attn.k.bias": (d,),
        "attn.v.weight": (d, d),
        "attn.v.bias": (d,),
        "attn.out.weight": (d, d),
        "attn.out.bias": (d,),
        "ln2.gamma": (d,),
        "ln2.beta": (d,),
        "mlp.fc.weight": (d, hid),
        "mlp.fc.bias": (hid,),
        "mlp.proj.weight": (hid, d),
        "mlp.proj.bias": (d,),
    }
    for i in range(config.blocks):
        for suffix, shape in block_shapes.items():
            shapes[f"block.{i}.{suffix}"] = shape
    return shapes


def patchify(images: Array, patch: int) -> Array:
    """(b, 3, H, W) -> (b, p, patch^2*3) flattened patches.

    Patch (i, j) covers pixel rows i*patch..(i+1)*patch and the matching
    columns; within a patch the flat index is channel-major, then row,
    then column.  Sides must be divisible by ``patch``: cropping is the
    caller's job, resizing is deliberately not offered.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"patchify: expected (b, 3, H, W), got {images.shape}")
    b, _, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(
            f"patchify: sides {h}x{w} not divisible by patch {patch}; "
            "crop the image first (resizing is not supported)"
        )
    gh, gw = h // patch, w // patch
    x = images.reshape(b, 3, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)         # (b, gh, gw, c, pr, pc)
    return np.ascontiguousarray(x.reshape(b, gh * gw, 3 * patch * patch))


def embed(patches: Array, weights: ViTWeights) -> Array:
    """Project patches, prepend the CLS token, add positional embeddings."""
    b, p, plen = patches.shape
    d = weights.patch_weight.shape[0]
    if plen != weights.patch_weight.shape[1]:
        raise ValueError(
            f"embed: patch length {plen} does not match projection "
            f"{weights.patch_weight.shape}"
        )
    if weights.positional.shape != (p + 1, d):
        raise ValueError(
            f"embed: positional table {weights.positional.shape} does not match "
            f"{p} patches of width {d}"
        )
    tokens = patches @ weights.patch_weight.T + weights.patch_bias
    out = np.empty((b, p + 1, d), dtype=tokens.dtype)
    out[:, 0, :] = weights.cls_token + weights.positional[0]
    out[:, 1:, :] = tokens + weights.positional[1:]
    return out


def transformer_block(
    x: Array, block: BlockWeights, heads: int, return_attention: bool = False
):
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.)).

    Attention is standard multi-head scaled dot-product with per-head
    width d/heads and 1/sqrt(d/heads) scaling.
    """
    b, t, d = x.shape
    dh = d // heads

    h = layer_norm(x, block.ln1_gamma, block.ln1_beta)
    q = (h @ block.q_w + block.q_b).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    k = (h @ block.k_w + block.k_b).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    v = (h @ block.v_w + block.v_b).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(np.asarray(dh, dtype=x.dtype))
    attn = softmax(scores, axis=-1)            # (b, heads, t, t)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + (ctx @ block.out_w + block.out_b)

    h2 = layer_norm(x, block.ln2_gamma, block.ln2_beta)
    x = x + (gelu(h2 @ block.fc_w + block.fc_b) @ block.proj_w + block.proj_b)
    if return_attention:
        return x, attn
    return x


def encode_collect(images: Array, weights: ViTWeights, config: ViTConfig) -> Array:
    """Run the frozen encoder, recording the CLS token after every block.

    ``images``: (b, 3, image_side, image_side) in [0, 1]; the container's
    per-channel normalization is applied here.  Returns (b, blocks, width)
    raw block-output CLS tokens: no post-LN, no output projection.
    """
    images = np.asarray(images)
    if images.shape[2:] != (config.image_side, config.image_side):
        raise ValueError(
            f"encode_collect: images {images.shape[2:]} do not match "
            f"image_side {config.image_side}; crop first"
        )
    if len(weights.blocks) != config.blocks:
        raise ValueError(
            f"encode_collect: weights carry {len(weights.blocks)} blocks, "
            f"config declares {config.blocks}"
        )
    dtype = weights.cls_token.dtype
    mean = weights.norm_mean.reshape(1, 3, 1, 1)
    std = weights.norm_std.reshape(1, 3, 1, 1)
    x = (images.astype(dtype) - mean) / std

    z = embed(patchify(x, config.patch), weights)
    if weights.pre_ln is not None:
        z = layer_norm(z, weights.pre_ln[0], weights.pre_ln[1])
    cls_stack = np.empty((images.shape[0], config.blocks, config.width), dtype=dtype)
    for l, block in enumerate(weights.blocks):
        z = transformer_block(z, block, config.heads)
        cls_stack[:, l, :] = z[:, 0, :]
    return cls_stack


def save_weights(path, config: ViTConfig, weights: ViTWeights) -> None:
    tensors = {
        "patch_proj.weight": weights.patch_weight,
        "patch_proj.bias": weights.patch_bias,
        "cls_token": weights.cls_token,
        "positional": weights.positional,
    }
    if weights.pre_ln is not None:
        tensors["pre_ln.gamma"] = weights.pre_ln[0]
        tensors["pre_ln.beta"] = weights.pre_ln[1]
    for i, blk in enumerate(weights.blocks):
        for suffix, attr in _BLOCK_FIELDS.items():
            tensors[f"block.{i}.{suffix}"] = getattr(blk, attr)
    meta = {
        "config": config.to_dict(),
        "normalization": {
            "mean": [float(v) for v in weights.norm_mean],
            "std": [float(v) for v in weights.norm_std],
        },
        "has_pre_ln": weights.pre_ln is not None,
    }
    write_container(path, "vit_backbone", meta, tensors)


def load_weights(path) -> tuple[ViTConfig, ViTWeights]:
    """Load and shape-validate a backbone container; partial files are rejected."""
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "vit_backbone":
        raise ContainerError(f"{path}: kind {manifest.get('kind')!r} is not a backbone")
    meta = manifest["meta"]
    config = ViTConfig.from_dict(meta["config"])
    has_pre_ln = bool(meta.get("has_pre_ln", False))
    check_tensors(tensors, _expected_shapes(config, has_pre_ln), context=str(path))

    blocks = []
    for i in range(config.blocks):
        blocks.append(
            BlockWeights(
                **{
                    attr: tensors[f"block.{i}.{suffix}"]
                    for suffix, attr in _BLOCK_FIELDS.items()
                }
            )
        )
    weights = ViTWeights(
        patch_weight=tensors["patch_proj.weight"],
        patch_bias=tensors["patch_proj.bias"],
        cls_token=tensors["cls_token"],
        positional=tensors["positional"],
        blocks=blocks,
        norm_mean=np.asarray(meta["normalization"]["mean"], dtype=np.float32),
        norm_std=np.asarray(meta["normalization"]["std"], dtype=np.float32),
        pre_ln=(tensors["pre_ln.gamma"], tensors["pre_ln.beta"]) if has_pre_ln else None,
    )
    return config, weights


def _uniform(rng: Rng, shape, fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def random_backbone(
    config: ViTConfig, rng: Rng, with_pre_ln: bool = False
) -> ViTWeights:
    """Random frozen backbone for toy runs and tests.

    Weights ~ uniform(+-1/sqrt(fan_in)); LN gains 1, all biases 0; CLS and
    positional entries ~ N(0, 0.02^2); pixel normalization (0.5, 0.5) maps
    [0, 1] to [-1, 1].
    """
    d, hid = config.width, config.mlp_hidden
    blocks = []
    for i in range(config.blocks):
        r = rng.derive("block", i)
        blocks.append(
            BlockWeights(
                ln1_gamma=np.ones(d, np.float32),
                ln1_beta=np.zeros(d, np.float32),
                q_w=_uniform(r.derive("q"), (d, d), d),
                q_b=np.zeros(d, np.float32),
                k_w=_uniform(r.derive("k"), (d, d), d),
                k_b=np.zeros(d, np.float32),
                v_w=_uniform(r.derive("v"), (d, d), d),
                v_b=np.zeros(d, np.float32),
                out_w=_uniform(r.derive("out"), (d, d), d),
                out_b=np.zeros(d, np.float32),
                ln2_gamma=np.ones(d, np.float32),
                ln2_beta=np.zeros(d, np.float32),
                fc_w=_uniform(r.derive("fc"), (d, hid), d),
                fc_b=np.zeros(hid, np.float32),
                proj_w=_uniform(r.derive("proj"), (hid, d), hid),
                proj_b=np.zeros(d, np.float32),
            )
        )
    return ViTWeights(
        patch_weight=_uniform(rng.derive("patch"), (d, config.patch_len), config.patch_len),
        patch_bias=np.zeros(d, np.float32),
        cls_token=rng.derive("cls").normal(0.0, 0.02, d).astype(np.float32),
        positional=rng.derive("pos").normal(0.0, 0.02, (config.tokens + 1, d)).astype(np.float32),
        blocks=blocks,
        norm_mean=np.full(3, 0.5, np.float32),
        norm_std=np.full(3, 0.5, np.float32),
        pre_ln=(np.ones(d, np.float32), np.zeros(d, np.float32)) if with_pre_ln else None,
    )


def zeros_backbone(config: ViTConfig) -> ViTWeights:
    """All-zero weights (LN gains included); cheap shape-contract fixture."""
    d, hid = config.width, config.mlp_hidden
    z = lambda *shape: np.zeros(shape, np.float32)
    blocks = [
        BlockWeights(
            ln1_gamma=z(d), ln1_beta=z(d),
            q_w=z(d, d), q_b=z(d), k_w=z(d, d), k_b=z(d),
            v_w=z(d, d), v_b=z(d), out_w=z(d, d), out_b=z(d),
            ln2_gamma=z(d), ln2_beta=z(d),
            fc_w=z(d, hid), fc_b=z(hid), proj_w=z(hid, d), proj_b=z(d),
        )
        for _ in range(config.blocks)
    ]
    return ViTWeights(
        patch_weight=z(d, config.patch_len),
        patch_bias=z(d),
        cls_token=z(d),
        positional=z(config.tokens + 1, d),
        blocks=blocks,
        norm_mean=np.zeros(3, np.float32),
        norm_std=np.ones(3, np.float32),
    )
