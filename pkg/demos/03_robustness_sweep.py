"""Measure detector robustness under evaluation-time corruptions.

Each perturbation fires with probability 0.5 per image: Gaussian blur,
random cropping, JPEG re-encoding, additive noise, or all four combined.
Blur and the combination hit the high-frequency artifact hardest.

Run:  python demos/03_robustness_sweep.py
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
    perturb,
    random_backbone,
    synth_toy_dataset,
    train,
)
from rine.data import PERTURB_KINDS

work = Path(tempfile.mkdtemp(prefix="rine_demo_"))
# 40px images leave crop headroom over the 32px encoder input;
# a weak artifact (0.1) gives the corruptions something to destroy
synth_toy_dataset(work / "train", 600, 40, 0.1, Rng(300))
synth_toy_dataset(work / "test", 200, 40, 0.1, Rng(400))

vit_config = ViTConfig(width=64, blocks=6, patch=8, heads=4, image_side=32)
backbone = (vit_config, random_backbone(vit_config, Rng(5)))
head = HeadConfig(blocks=6, backbone_width=64, proj_width=128, depth=1)
config = TrainConfig(head=head, loss=LossConfig(xi=0.2), batch_size=128,
                     epochs=2, seed=0, augment=False, cache_features=True)
params, _ = train(work / "train", backbone, config)

clean = evaluate((head, params), backbone, [work / "test"]).datasets[0]
print(f"clean:     ACC={clean.acc:.4f}  AP={clean.ap:.4f}")

rng = Rng(1000)
for kind in PERTURB_KINDS:
    def corrupted(sample, _idx, kind=kind):
        return perturb(sample, kind, rng.derive(kind, sample.id))

    d = evaluate((head, params), backbone, [work / "test"],
                 transform=corrupted).datasets[0]
    print(f"{kind:9s}  ACC={d.acc:.4f}  AP={d.ap:.4f}  "
          f"(ACC drop {clean.acc - d.acc:+.4f})")
