"""Train the detection head end to end on the toy task and evaluate it.

The backbone stays frozen; only the head (two projection stacks, the
block-importance logits, and the classifier) receives gradients, computed
by the hand-written backward pass and applied by Adam.

Run:  python demos/02_train_and_evaluate.py
"""

import tempfile
from pathlib import Path

from rine import (
    HeadConfig,
    LossConfig,
    Rng,
    TrainConfig,
    ViTConfig,
    evaluate,
    random_backbone,
    save_head,
    synth_toy_dataset,
    train,
)
from rine.head import param_count

work = Path(tempfile.mkdtemp(prefix="rine_demo_"))
synth_toy_dataset(work / "train", 1000, 32, 0.5, Rng(11))
synth_toy_dataset(work / "test", 300, 32, 0.5, Rng(22))

vit_config = ViTConfig(width=64, blocks=6, patch=8, heads=4, image_side=32)
backbone = (vit_config, random_backbone(vit_config, Rng(5)))

head = HeadConfig(blocks=6, backbone_width=64, proj_width=128, depth=1)
config = TrainConfig(
    head=head,
    loss=LossConfig(xi=0.2),
    batch_size=128,
    lr=1e-3,
    epochs=3,
    seed=0,
    augment=False,          # toy images are already crop-sized
    cache_features=True,    # frozen backbone -> encode each image once
)
print(f"trainable parameters: {param_count(head):,}")

params, history = train(work / "train", backbone, config, out_dir=work / "run")
print(f"steps: {len(history)}")
print(f"cross-entropy: {history[0]['ce_loss']:.4f} -> {history[-1]['ce_loss']:.4f}")
print(f"contrastive:   {history[0]['cont_loss']:.4f} -> {history[-1]['cont_loss']:.4f}")

save_head(work / "run" / "head.rwc", params, head)
report = evaluate((head, params), backbone, [work / "test"])
for d in report.datasets:
    print(f"\n{d.name}: n={d.n}  ACC={d.acc:.4f}  AP={d.ap:.4f}")
print(f"run artifacts in {work / 'run'} (config.json, history.csv, checkpoint.rwc)")
