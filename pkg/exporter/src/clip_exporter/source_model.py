"""Torch runner for the source checkpoint: the standard CLIP vision tower,
reconstructed from the raw state dict, reporting the CLS token after every
transformer block.

This side of the verification never touches the converted tensors; it
reads the source layout directly, so a conversion bug cannot cancel out.

``activation`` selects the MLP nonlinearity: ``gelu`` (exact erf, the
container semantics) or ``quick_gelu`` (x * sigmoid(1.702 x), used by the
original OpenAI training runs).  Verifying a QuickGELU checkpoint under
``gelu`` semantics will show the activation mismatch as reduced cosine --
that is the verifier doing its job, not a bug.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .naming import detect_scheme, infer_geometry, scheme_names


def _qkv(state, scheme, prefix, width):
    if scheme == "openai":
        w = state[prefix + "attn.in_proj_weight"]
        b = state[prefix + "attn.in_proj_bias"]
        return (
            (w[:width], b[:width]),
            (w[width : 2 * width], b[width : 2 * width]),
            (w[2 * width :], b[2 * width :]),
            (state[prefix + "attn.out_proj.weight"], state[prefix + "attn.out_proj.bias"]),
        )
    return (
        (state[prefix + "self_attn.q_proj.weight"], state[prefix + "self_attn.q_proj.bias"]),
        (state[prefix + "self_attn.k_proj.weight"], state[prefix + "self_attn.k_proj.bias"]),
        (state[prefix + "self_attn.v_proj.weight"], state[prefix + "self_attn.v_proj.bias"]),
        (state[prefix + "self_attn.out_proj.weight"], state[prefix + "self_attn.out_proj.bias"]),
    )


def _mlp_names(scheme):
    if scheme == "openai":
        return "mlp.c_fc", "mlp.c_proj", "ln_1", "ln_2"
    return "mlp.fc1", "mlp.fc2", "layer_norm1", "layer_norm2"


@torch.no_grad()
def collect_cls(state, images, mean, std, heads=None, activation="gelu"):
    """Run the tower on [0,1] float images (b, 3, s, s); returns the
    per-block CLS stack as a (b, blocks, width) numpy array."""
    scheme = detect_scheme(state)
    names = scheme_names(scheme)
    geometry = infer_geometry({k: tuple(v.shape) for k, v in state.items()}, heads)
    width, n_heads = geometry["width"], geometry["heads"]
    head_dim = width // n_heads

    if activation == "gelu":
        act = F.gelu
    elif activation == "quick_gelu":
        act = lambda v: v * torch.sigmoid(1.702 * v)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    x = torch.as_tensor(images, dtype=torch.float32)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    x = (x - mean_t) / std_t

    x = F.conv2d(x, state[names["patch"]].float(), stride=geometry["patch"])
    b = x.shape[0]
    x = x.reshape(b, width, -1).permute(0, 2, 1)            # (b, p, d)
    cls = state[names["cls"]].float().reshape(1, 1, width).expand(b, 1, width)
    x = torch.cat([cls, x], dim=1) + state[names["positional"]].float()

    pre_w, pre_b = names["pre_ln"]
    if pre_w in state:
        x = F.layer_norm(x, (width,), state[pre_w].float(), state[pre_b].float())

    fc_name, proj_name, ln1_name, ln2_name = _mlp_names(scheme)
    collected = []
    for i in range(geometry["blocks"]):
        prefix = names["block_prefix"].format(i=i)
        (qw, qb), (kw, kb), (vw, vb), (ow, ob) = _qkv(state, scheme, prefix, width)

        h = F.layer_norm(x, (width,), state[prefix + ln1_name + ".weight"].float(),
                         state[prefix + ln1_name + ".bias"].float())
        t = h.shape[1]
        q = F.linear(h, qw.float(), qb.float()).view(b, t, n_heads, head_dim).transpose(1, 2)
        k = F.linear(h, kw.float(), kb.float()).view(b, t, n_heads, head_dim).transpose(1, 2)
        v = F.linear(h, vw.float(), vb.float()).view(b, t, n_heads, head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / head_dim**0.5, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, width)
        x = x + F.linear(ctx, ow.float(), ob.float())

        h2 = F.layer_norm(x, (width,), state[prefix + ln2_name + ".weight"].float(),
                          state[prefix + ln2_name + ".bias"].float())
        h2 = act(F.linear(h2, state[prefix + fc_name + ".weight"].float(),
                          state[prefix + fc_name + ".bias"].float()))
        x = x + F.linear(h2, state[prefix + proj_name + ".weight"].float(),
                         state[prefix + proj_name + ".bias"].float())
        collected.append(x[:, 0, :].clone())

    return torch.stack(collected, dim=1).numpy()
