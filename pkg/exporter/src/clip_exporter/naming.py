"""Source-checkpoint naming schemes and geometry inference.

Two public CLIP vision-tower layouts are recognized:

* the original research release ("openai"): ``visual.conv1.weight``,
  fused ``attn.in_proj_weight``, blocks under
  ``visual.transformer.resblocks.N``;
* the transformers library ("hf"): ``vision_model.embeddings.*``, split
  q/k/v projections, blocks under ``vision_model.encoder.layers.N``.

Text towers and multimodal projections are ignored.  Head count is not
stored in either layout; the CLIP family fixes heads = width / 64, which
callers may override.
"""

from __future__ import annotations

import math
import re


class UnknownArchitectureError(ValueError):
    pass


def detect_scheme(keys) -> str:
    keys = set(keys)
    if any(k.startswith("visual.conv1.weight") for k in keys):
        return "openai"
    if any(k.startswith("vision_model.embeddings.patch_embedding") for k in keys):
        return "hf"
    raise UnknownArchitectureError(
        "unrecognized checkpoint layout; supported: OpenAI CLIP state dicts "
        "(visual.*) and transformers CLIPVisionModel state dicts (vision_model.*)"
    )


_SCHEMES = {
    "openai": {
        "patch": "visual.conv1.weight",
        "cls": "visual.class_embedding",
        "positional": "visual.positional_embedding",
        "pre_ln": ("visual.ln_pre.weight", "visual.ln_pre.bias"),
        "block_re": re.compile(r"visual\.transformer\.resblocks\.(\d+)\."),
        "block_prefix": "visual.transformer.resblocks.{i}.",
    },
    "hf": {
        "patch": "vision_model.embeddings.patch_embedding.weight",
        "cls": "vision_model.embeddings.class_embedding",
        "positional": "vision_model.embeddings.position_embedding.weight",
        # sic: the attribute really is misspelled in the transformers library
        "pre_ln": ("vision_model.pre_layrnorm.weight", "vision_model.pre_layrnorm.bias"),
        "block_re": re.compile(r"vision_model\.encoder\.layers\.(\d+)\."),
        "block_prefix": "vision_model.encoder.layers.{i}.",
    },
}


def scheme_names(scheme: str) -> dict:
    return _SCHEMES[scheme]


def infer_geometry(shapes: dict, heads: int | None = None) -> dict:
    """Geometry from tensor shapes alone: works on {name: shape tuple}.

    Returns {width, blocks, patch, heads, image_side}.
    """
    scheme = detect_scheme(shapes)
    names = scheme_names(scheme)
    conv = shapes[names["patch"]]
    if len(conv) != 4 or conv[1] != 3 or conv[2] != conv[3]:
        raise UnknownArchitectureError(f"unexpected patch-projection shape {conv}")
    width, patch = int(conv[0]), int(conv[2])
    pos = shapes[names["positional"]]
    tokens = int(pos[0]) - 1
    grid = math.isqrt(tokens)
    if grid * grid != tokens or pos[1] != width:
        raise UnknownArchitectureError(f"unexpected positional-table shape {pos}")
    blocks = 1 + max(
        int(m.group(1)) for k in shapes if (m := names["block_re"].match(k))
    )
    if heads is None:
        if width % 64:
            raise UnknownArchitectureError(
                f"cannot infer head count for width {width}; pass heads explicitly"
            )
        heads = width // 64
    return {
        "width": width,
        "blocks": blocks,
        "patch": patch,
        "heads": heads,
        "image_side": patch * grid,
    }
