"""One-shot conversion of a CLIP vision tower into the container format.

The exporter owns every layout change so the container stays
checkpoint-agnostic:

* the patch convolution (width, 3, P, P) flattens to (width, P*P*3),
  which is exactly the container's channel-major/row/col patch order;
* every linear weight transposes from torch's (out, in) to the
  container's (in, out);
* fused in_proj q/k/v blocks are split;
* the final LayerNorm and the multimodal projection are dropped -- the
  detector reads raw block outputs.

The returned manifest records the source-to-container name map, the
permutations applied, dropped source tensors, and the normalization
constants (the published CLIP pixel statistics by default).
"""

from __future__ import annotations

import numpy as np

from .container import write_container
from .naming import detect_scheme, infer_geometry, scheme_names

# pixel normalization used by the public CLIP checkpoints
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def _np(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float32)


def _block_tensors(state, scheme: str, prefix: str, width: int):
    """(container-suffix -> (array, source-name, transform-tag)) for one block."""
    if scheme == "openai":
        in_w = _np(state[prefix + "attn.in_proj_weight"])
        in_b = _np(state[prefix + "attn.in_proj_bias"])
        qkv = {
            "q": (in_w[:width].T, prefix + "attn.in_proj_weight[0:d]", "split+transpose"),
            "k": (in_w[width : 2 * width].T, prefix + "attn.in_proj_weight[d:2d]", "split+transpose"),
            "v": (in_w[2 * width :].T, prefix + "attn.in_proj_weight[2d:3d]", "split+transpose"),
        }
        qkv_bias = {
            "q": (in_b[:width], prefix + "attn.in_proj_bias[0:d]", "split"),
            "k": (in_b[width : 2 * width], prefix + "attn.in_proj_bias[d:2d]", "split"),
            "v": (in_b[2 * width :], prefix + "attn.in_proj_bias[2d:3d]", "split"),
        }
        names = {
            "ln1": prefix + "ln_1",
            "ln2": prefix + "ln_2",
            "out": prefix + "attn.out_proj",
            "fc": prefix + "mlp.c_fc",
            "proj": prefix + "mlp.c_proj",
        }
    else:
        qkv = {
            a: (_np(state[f"{prefix}self_attn.{a}_proj.weight"]).T,
                f"{prefix}self_attn.{a}_proj.weight", "transpose")
            for a in ("q", "k", "v")
        }
        qkv_bias = {
            a: (_np(state[f"{prefix}self_attn.{a}_proj.bias"]),
                f"{prefix}self_attn.{a}_proj.bias", "copy")
            for a in ("q", "k", "v")
        }
        names = {
            "ln1": prefix + "layer_norm1",
            "ln2": prefix + "layer_norm2",
            "out": prefix + "self_attn.out_proj",
            "fc": prefix + "mlp.fc1",
            "proj": prefix + "mlp.fc2",
        }

    out = {}
    for a in ("q", "k", "v"):
        out[f"attn.{a}.weight"] = qkv[a]
        out[f"attn.{a}.bias"] = qkv_bias[a]
    for tag, ln in (("ln1", names["ln1"]), ("ln2", names["ln2"])):
        out[f"{tag}.gamma"] = (_np(state[ln + ".weight"]), ln + ".weight", "copy")
        out[f"{tag}.beta"] = (_np(state[ln + ".bias"]), ln + ".bias", "copy")
    for tag, lin in (("attn.out", names["out"]), ("mlp.fc", names["fc"]),
                     ("mlp.proj", names["proj"])):
        out[f"{tag}.weight"] = (_np(state[lin + ".weight"]).T, lin + ".weight", "transpose")
        out[f"{tag}.bias"] = (_np(state[lin + ".bias"]), lin + ".bias", "copy")
    return out


def convert(state, heads=None, mean=CLIP_MEAN, std=CLIP_STD, source_id="unknown"):
    """Convert a state dict; returns (manifest_meta, tensors)."""
    scheme = detect_scheme(state)
    names = scheme_names(scheme)
    geometry = infer_geometry({k: tuple(v.shape) for k, v in state.items()}, heads)
    width = geometry["width"]

    tensors, name_map, transforms = {}, {}, {}

    def put(container_name, array, source_name, transform):
        tensors[container_name] = array
        name_map[container_name] = source_name
        transforms[container_name] = transform

    conv = _np(state[names["patch"]])
    put("patch_proj.weight", conv.reshape(width, -1), names["patch"],
        "reshape(out, in_c*kh*kw)")
    tensors["patch_proj.bias"] = np.zeros(width, np.float32)
    name_map["patch_proj.bias"] = None      # synthesized: source convolution has no bias
    transforms["patch_proj.bias"] = "synthesized-zeros"
    put("cls_token", _np(state[names["cls"]]).reshape(width), names["cls"], "copy")
    put("positional", _np(state[names["positional"]]), names["positional"], "copy")

    pre_w, pre_b = names["pre_ln"]
    has_pre_ln = pre_w in state
    if has_pre_ln:
        put("pre_ln.gamma", _np(state[pre_w]), pre_w, "copy")
        put("pre_ln.beta", _np(state[pre_b]), pre_b, "copy")

    for i in range(geometry["blocks"]):
        prefix = names["block_prefix"].format(i=i)
        for suffix, (arr, src, transform) in _block_tensors(
            state, scheme, prefix, width
        ).items():
            put(f"block.{i}.{suffix}", np.ascontiguousarray(arr), src, transform)

    consumed = {v for v in name_map.values() if v is not None}
    consumed = {v.split("[")[0] for v in consumed}
    dropped = sorted(
        k for k in state
        if k not in consumed and not hasattr(state[k], "keys")
    )

    meta = {
        "config": geometry,
        "normalization": {"mean": list(mean), "std": list(std)},
        "has_pre_ln": has_pre_ln,
        "export": {
            "source_id": source_id,
            "scheme": scheme,
            "name_map": name_map,
            "transforms": transforms,
            "dropped_source_tensors": dropped,
            "activation": "gelu",   # container semantics: exact-erf GELU
        },
    }
    return meta, tensors


def export(state, out_path, heads=None, mean=CLIP_MEAN, std=CLIP_STD,
           source_id="unknown") -> dict:
    """Convert and write the container; returns the manifest metadata."""
    meta, tensors = convert(state, heads=heads, mean=mean, std=std,
                            source_id=source_id)
    write_container(out_path, "vit_backbone", meta, tensors)
    return meta
