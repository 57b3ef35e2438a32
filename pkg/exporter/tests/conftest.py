"""Fabricated CLIP-style checkpoints: real public weights are not
available in the test environment, so the suites run on random-weight
towers with the exact tensor layouts of both public formats."""

import numpy as np
import pytest
import torch

WIDTH, BLOCKS, PATCH, IMAGE = 128, 3, 16, 64   # heads = width/64 = 2


def _t(rng, *shape, scale=0.02):
    return torch.from_numpy(rng.normal(0, scale, shape).astype(np.float32))


def make_openai_state(seed=0, width=WIDTH, blocks=BLOCKS, patch=PATCH, image=IMAGE):
    rng = np.random.default_rng(seed)
    tokens = (image // patch) ** 2
    state = {
        "visual.conv1.weight": _t(rng, width, 3, patch, patch, scale=0.05),
        "visual.class_embedding": _t(rng, width),
        "visual.positional_embedding": _t(rng, tokens + 1, width),
        "visual.ln_pre.weight": torch.ones(width),
        "visual.ln_pre.bias": torch.zeros(width),
        # post-LN and multimodal projection exist in the source but are dropped
        "visual.ln_post.weight": torch.ones(width),
        "visual.ln_post.bias": torch.zeros(width),
        "visual.proj": _t(rng, width, 64),
        # text-tower decoys that must be ignored
        "token_embedding.weight": _t(rng, 49408, 16),
        "transformer.resblocks.0.attn.in_proj_weight": _t(rng, 48, 16),
        "logit_scale": torch.zeros(()),
    }
    for i in range(blocks):
        p = f"visual.transformer.resblocks.{i}."
        state[p + "ln_1.weight"] = torch.ones(width)
        state[p + "ln_1.bias"] = torch.zeros(width)
        state[p + "attn.in_proj_weight"] = _t(rng, 3 * width, width, scale=0.05)
        state[p + "attn.in_proj_bias"] = torch.zeros(3 * width)
        state[p + "attn.out_proj.weight"] = _t(rng, width, width, scale=0.05)
        state[p + "attn.out_proj.bias"] = torch.zeros(width)
        state[p + "ln_2.weight"] = torch.ones(width)
        state[p + "ln_2.bias"] = torch.zeros(width)
        state[p + "mlp.c_fc.weight"] = _t(rng, 4 * width, width, scale=0.05)
        state[p + "mlp.c_fc.bias"] = torch.zeros(4 * width)
        state[p + "mlp.c_proj.weight"] = _t(rng, width, 4 * width, scale=0.05)
        state[p + "mlp.c_proj.bias"] = torch.zeros(width)
    return state


def make_hf_state(seed=0, width=WIDTH, blocks=BLOCKS, patch=PATCH, image=IMAGE):
    rng = np.random.default_rng(seed)
    tokens = (image // patch) ** 2
    state = {
        "vision_model.embeddings.patch_embedding.weight": _t(rng, width, 3, patch, patch, scale=0.05),
        "vision_model.embeddings.class_embedding": _t(rng, width),
        "vision_model.embeddings.position_embedding.weight": _t(rng, tokens + 1, width),
        "vision_model.pre_layrnorm.weight": torch.ones(width),
        "vision_model.pre_layrnorm.bias": torch.zeros(width),
        "vision_model.post_layernorm.weight": torch.ones(width),
        "vision_model.post_layernorm.bias": torch.zeros(width),
    }
    for i in range(blocks):
        p = f"vision_model.encoder.layers.{i}."
        for a in ("q", "k", "v", "out"):
            state[p + f"self_attn.{a}_proj.weight"] = _t(rng, width, width, scale=0.05)
            state[p + f"self_attn.{a}_proj.bias"] = torch.zeros(width)
        state[p + "layer_norm1.weight"] = torch.ones(width)
        state[p + "layer_norm1.bias"] = torch.zeros(width)
        state[p + "layer_norm2.weight"] = torch.ones(width)
        state[p + "layer_norm2.bias"] = torch.zeros(width)
        state[p + "mlp.fc1.weight"] = _t(rng, 4 * width, width, scale=0.05)
        state[p + "mlp.fc1.bias"] = torch.zeros(4 * width)
        state[p + "mlp.fc2.weight"] = _t(rng, width, 4 * width, scale=0.05)
        state[p + "mlp.fc2.bias"] = torch.zeros(width)
    return state


@pytest.fixture
def openai_state():
    return make_openai_state()


@pytest.fixture
def hf_state():
    return make_hf_state()
