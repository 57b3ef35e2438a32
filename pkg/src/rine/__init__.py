"""Synthetic-image detector built on a frozen ViT encoder.

The encoder's per-block CLS tokens are fused by a small trainable head
(shared projections, learned block-importance weights, classifier) and
trained with a combined cross-entropy / supervised-contrastive objective.
Everything runs on numpy with hand-derived gradients and seeded
counter-based randomness, so runs are reproducible bit-for-bit.
"""

from .backbone import (
    ViTConfig,
    ViTWeights,
    encode_collect,
    load_weights,
    random_backbone,
    save_weights,
)
from .head import (
    HeadConfig,
    HeadParams,
    backward,
    forward,
    init_params,
    load_head,
    param_count,
    save_head,
)
from .kernels import Rng
from .losses import LossConfig, bce_with_logits, combined, supcontrast
from .metrics import (
    EvalReport,
    accuracy,
    average_precision,
    evaluate,
    importance_frequency,
)
from .data import (
    ImageSample,
    PerturbConfig,
    augment_train,
    load_dataset,
    perturb,
    preprocess_eval,
    synth_toy_dataset,
)
from .trainer import TrainConfig, adam_step, grid_search, train

__version__ = "0.1.0"
