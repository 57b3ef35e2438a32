"""Which encoder blocks does the trained head actually rely on?

The head learns one importance logit per (block, feature) pair.  For each
feature column we find the block with the largest logit; the histogram of
winners shows how much of the decision rests on intermediate blocks
rather than the final one.

Run:  python demos/04_importance_analysis.py
"""

import tempfile
from pathlib import Path

from rine import (
    HeadConfig,
    LossConfig,
    Rng,
    TrainConfig,
    ViTConfig,
    importance_frequency,
    random_backbone,
    synth_toy_dataset,
    train,
)
from rine.metrics import write_importance_csv

work = Path(tempfile.mkdtemp(prefix="rine_demo_"))
synth_toy_dataset(work / "train", 800, 32, 0.5, Rng(11))

vit_config = ViTConfig(width=64, blocks=6, patch=8, heads=4, image_side=32)
backbone = (vit_config, random_backbone(vit_config, Rng(5)))
head = HeadConfig(blocks=6, backbone_width=64, proj_width=128, depth=1)
config = TrainConfig(head=head, loss=LossConfig(xi=0.2), batch_size=128,
                     epochs=3, seed=0, augment=False, cache_features=True)
params, _ = train(work / "train", backbone, config)

freq = importance_frequency(params.importance)
print("frequency of each block winning a feature column:")
for l, f in enumerate(freq, start=1):
    print(f"  block {l}: {f:.3f}  {'#' * int(f * 60)}")
print(f"  (sums to {freq.sum():.6f})")

out = work / "importance.csv"
write_importance_csv(freq, out)
print(f"histogram written to {out}")
