"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line (written straight to the terminal, bypassing capture).

The end-to-end criteria run on the synthetic toy task: a 6-block width-64
backbone with random frozen weights over 32x32 images, and corpora whose
fake class carries a pixel-rate checkerboard residual.
"""

import itertools
import sys
import time

import numpy as np
import pytest

from rine.backbone import ViTConfig, embed, encode_collect, patchify, random_backbone
from rine.data import PerturbConfig, perturb, synth_toy_dataset
from rine.head import HeadConfig, backward, forward, init_params, param_count
from rine.kernels import Rng
from rine.losses import LossConfig, bce_with_logits, combined, supcontrast
from rine.metrics import average_precision, evaluate, importance_frequency
from rine.trainer import TrainConfig, train
from tests.test_losses import brute_force_supcontrast
from tests.test_metrics import threshold_sweep_ap


def _verdict(name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def toy_backbone():
    config = ViTConfig(width=64, blocks=6, patch=8, heads=4, image_side=32)
    return config, random_backbone(config, Rng(5))


@pytest.fixture(scope="module")
def e2e_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_e2e")
    synth_toy_dataset(root / "train", 2000, 32, 0.5, Rng(11))
    synth_toy_dataset(root / "test", 500, 32, 0.5, Rng(22))
    synth_toy_dataset(root / "train0", 2000, 32, 0.0, Rng(11))
    synth_toy_dataset(root / "test0", 500, 32, 0.0, Rng(22))
    return root


def _toy_train_config(epochs=3, seed=0):
    head = HeadConfig(blocks=6, backbone_width=64, proj_width=128, depth=1)
    return TrainConfig(
        head=head, loss=LossConfig(xi=0.2), batch_size=128, lr=1e-3,
        epochs=epochs, seed=seed, augment=False, cache_features=True,
    )


def test_parameter_counts():
    """Exact closed-form counts for the three reference head shapes."""
    cases = {
        (4, 1024): 10_521_601,
        (4, 128): 283_009,
        (2, 1024): 6_323_201,
    }
    got = {
        (q, dp): param_count(
            HeadConfig(blocks=24, backbone_width=1024, proj_width=dp, depth=q)
        )
        for (q, dp) in cases
    }
    _verdict("parameter-counts", got == cases, f"{got}")


def test_gradient_correctness():
    """Every head gradient matches central finite differences (float64,
    h=1e-5, relative error <= 1e-5) on the stated toy configuration."""
    cfg = HeadConfig(blocks=4, backbone_width=16, proj_width=8, depth=2, dropout=0.5)
    params = init_params(cfg, Rng(123)).astype(np.float64)
    named = params.named()
    noise = Rng(321)
    for name, arr in named.items():        # generic point: biases off zero
        if name.endswith(".bias"):
            arr += noise.derive(name).normal(0.0, 0.1, arr.shape)
    k = Rng(7).normal(0, 1.0, (6, 4, 16)).astype(np.float64)
    labels = np.array([0, 1, 0, 1, 1, 0])
    xi, h = 0.2, 1e-5

    def loss_fn(p):
        logits, feats, trace = forward(k, p, cfg, mode="train", rng=Rng(99))
        ce, g_ce = bce_with_logits(logits, labels)
        cont, g_cont = supcontrast(feats, labels, tau=0.1)
        total, g_logits, g_feats = combined(ce, g_ce, cont, g_cont, xi)
        return total, trace, g_logits, g_feats

    # precondition: no ReLU kink within finite-difference reach (an h-sized
    # parameter step moves any pre-activation by at most h * max|input|)
    _, _, trace = forward(k, params, cfg, mode="train", rng=Rng(99))
    margins = [
        np.abs(tr.x @ lay.weight + lay.bias).min()
        for tr, lay in zip(trace.proj_in + trace.proj_out,
                           params.proj_in + params.proj_out)
    ]
    assert min(margins) > 20 * h, "degenerate check point; pick another seed"

    total, trace, g_logits, g_feats = loss_fn(params)
    grads = backward(trace, params, g_logits, g_feats)
    worst, worst_name = 0.0, ""
    for name, arr in params.named().items():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up, *_ = loss_fn(params)
            arr[idx] = orig - h
            down, *_ = loss_fn(params)
            arr[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        rel = float(np.max(np.abs(grads[name] - fd) / np.maximum(np.abs(fd), 1e-6)))
        if rel > worst:
            worst, worst_name = rel, name
    _verdict("gradient-correctness", worst <= 1e-5,
             f"max rel err {worst:.2e} at {worst_name}")


def test_importance_collapse_equivalence():
    """A +40-saturated importance column reproduces the single-block
    forward within 1e-5 max-abs on logits."""
    cfg = HeadConfig(blocks=4, backbone_width=16, proj_width=8, depth=2, dropout=0.0)
    params = init_params(cfg, Rng(17))
    k = Rng(18).normal(0, 1.0, (5, 4, 16)).astype(np.float32)
    target = 1
    saturated = params.copy()
    saturated.importance[:] = 0.0
    saturated.importance[target, :] = 40.0
    full, _, _ = forward(k, saturated, cfg, mode="eval")

    solo_cfg = HeadConfig(blocks=1, backbone_width=16, proj_width=8, depth=2, dropout=0.0)
    solo = params.replace(
        {
            **{n: a for n, a in params.named().items() if n != "importance.logits"},
            "importance.logits": np.zeros((1, 8), np.float32),
        }
    )
    single, _, _ = forward(k[:, target : target + 1, :], solo, solo_cfg, mode="eval")
    gap = float(np.max(np.abs(full - single)))
    _verdict("importance-collapse", gap <= 1e-5, f"max |delta logit| {gap:.2e}")


def test_loss_oracles():
    """Contrastive loss vs brute-force enumeration (<=1e-6), cross-entropy
    vs closed form, and xi=0 combination equal to CE bit-for-bit."""
    rng = np.random.default_rng(0)
    ok, worst = True, 0.0
    for b in range(4, 9):
        f = rng.normal(size=(b, 6))
        labels = rng.integers(0, 2, size=b)
        if len(set(labels.tolist())) < 2:
            labels[0] = 1 - labels[0]
        loss, _ = supcontrast(f, labels, tau=0.1)
        ref = brute_force_supcontrast(f, labels, 0.1)
        worst = max(worst, abs(loss - ref))
    ok &= worst <= 1e-6

    ce, grad = bce_with_logits(np.array([0.0]), np.array([1]))
    ok &= abs(ce - np.log(2.0)) <= 1e-12 and grad[0] == -0.5
    z = np.array([1.0, -2.0])
    ce2, _ = bce_with_logits(z, np.array([1, 0]))
    ref2 = float(np.mean(np.logaddexp(0.0, np.array([-1.0, -2.0]))))
    ok &= abs(ce2 - ref2) <= 1e-12

    g_ce = np.array([0.25, -0.5], np.float32)
    total, g_logits, _ = combined(0.625, g_ce, 123.0, np.ones((2, 4)), 0.0)
    ok &= total == 0.625 and g_logits is g_ce
    _verdict("loss-oracles", ok, f"max supcontrast gap {worst:.2e}")


def test_metric_oracles():
    """AP equals the threshold-sweep oracle on every label pattern of
    size <= 8; importance frequencies equal the per-column scan exactly."""
    rng = np.random.default_rng(1)
    ap_ok = True
    for n in range(2, 9):
        scores = rng.permutation(np.linspace(0.05, 0.95, n))
        for pattern in itertools.product([0, 1], repeat=n):
            if sum(pattern) in (0, n):
                continue
            got = average_precision(scores, np.array(pattern))
            if abs(got - threshold_sweep_ap(list(scores), list(pattern))) > 1e-12:
                ap_ok = False

    a = rng.normal(size=(24, 1024))
    freq = importance_frequency(a)
    counts = np.zeros(24)
    for col in range(1024):
        counts[int(np.argmax(a[:, col]))] += 1
    imp_ok = np.array_equal(freq, counts / 1024) and freq.sum() == 1.0
    _verdict("metric-oracles", ap_ok and imp_ok,
             f"AP exhaustive {'ok' if ap_ok else 'mismatch'}, "
             f"importance {'ok' if imp_ok else 'mismatch'}")


def test_residual_property(toy_backbone):
    """Zeroed attention/MLP output projections leave every collected CLS
    row exactly equal to the embedded CLS token."""
    config, _ = toy_backbone
    weights = random_backbone(config, Rng(77))
    for blk in weights.blocks:
        blk.out_w = np.zeros_like(blk.out_w)
        blk.out_b = np.zeros_like(blk.out_b)
        blk.proj_w = np.zeros_like(blk.proj_w)
        blk.proj_b = np.zeros_like(blk.proj_b)
    images = Rng(78).uniform(0, 1, (3, 3, 32, 32)).astype(np.float32)
    k = encode_collect(images, weights, config)
    x = (images - weights.norm_mean.reshape(1, 3, 1, 1)) / weights.norm_std.reshape(1, 3, 1, 1)
    cls0 = embed(patchify(x.astype(np.float32), config.patch), weights)[:, 0, :]
    exact = all(np.array_equal(k[:, l, :], cls0) for l in range(config.blocks))
    _verdict("residual-property", exact)


def test_toy_end_to_end(toy_backbone, e2e_corpora):
    """Trained toy detector: ACC >= 0.90 and AP >= 0.95 on held-out data;
    the amplitude-0 control stays at chance (AP <= 0.55); < 10 min CPU."""
    start = time.time()
    config = _toy_train_config(epochs=3)
    params, history = train(e2e_corpora / "train", toy_backbone, config)
    report = evaluate((config.head, params), toy_backbone, [e2e_corpora / "test"])
    acc, ap = report.datasets[0].acc, report.datasets[0].ap

    params0, _ = train(e2e_corpora / "train0", toy_backbone, config)
    report0 = evaluate((config.head, params0), toy_backbone, [e2e_corpora / "test0"])
    ap0 = report0.datasets[0].ap
    elapsed = time.time() - start
    ok = acc >= 0.90 and ap >= 0.95 and ap0 <= 0.55 and elapsed < 600
    _verdict(
        "toy-end-to-end", ok,
        f"ACC {acc:.4f} AP {ap:.4f} control-AP {ap0:.4f} in {elapsed:.0f}s",
    )


def test_determinism(toy_backbone, e2e_corpora, tmp_path):
    """The full toy train+eval pipeline repeated with one seed produces a
    byte-identical history CSV and evaluation report JSON."""
    artifacts = []
    for run in ("a", "b"):
        out = tmp_path / run
        config = _toy_train_config(epochs=1, seed=13)
        params, _ = train(e2e_corpora / "train", toy_backbone, config, out_dir=out)
        report = evaluate((config.head, params), toy_backbone, [e2e_corpora / "test"])
        artifacts.append(
            ((out / "history.csv").read_bytes(), report.to_json().encode())
        )
    ok = artifacts[0] == artifacts[1]
    _verdict("determinism", ok)


def test_robustness_harness(toy_backbone, tmp_path_factory):
    """Noise at max sigma degrades accuracy by a finite amount, and the
    combined perturbation degrades at least as much as any single kind on
    average over 5 seeds.

    Runs on a 40px-sided toy corpus (weak 0.1 artifact): the random-crop
    perturbation keeps 87.5% of the side, which must stay >= the encoder's
    32px input, and the weaker artifact leaves perturbations something to
    destroy.
    """
    root = tmp_path_factory.mktemp("acceptance_robust")
    synth_toy_dataset(root / "train", 800, 40, 0.1, Rng(300))
    synth_toy_dataset(root / "test", 250, 40, 0.1, Rng(400))
    config = _toy_train_config(epochs=2)
    params, _ = train(root / "train", toy_backbone, config)
    head = (config.head, params)
    clean = evaluate(head, toy_backbone, [root / "test"]).datasets[0].acc

    kinds = ("blur", "crop", "compress", "noise", "combined")
    deg = {kind: [] for kind in kinds}
    deg_noise_max = []
    max_noise = PerturbConfig(noise_sigma=(0.05, 0.05))
    for seed in range(5):
        rng = Rng(1000 + seed)
        for kind in kinds:
            def tf(sample, _i, kind=kind, rng=rng):
                return perturb(sample, kind, rng.derive(kind, sample.id))
            acc = evaluate(head, toy_backbone, [root / "test"], transform=tf)
            deg[kind].append(clean - acc.datasets[0].acc)

        def tf_max(sample, _i, rng=rng):
            return perturb(sample, "noise", rng.derive("noisemax", sample.id), max_noise)
        acc = evaluate(head, toy_backbone, [root / "test"], transform=tf_max)
        deg_noise_max.append(clean - acc.datasets[0].acc)

    means = {kind: float(np.mean(deg[kind])) for kind in kinds}
    noise_max_mean = float(np.mean(deg_noise_max))
    noise_finite = 0.0 <= noise_max_mean < 0.5
    combined_dominates = all(
        means["combined"] >= means[kind] for kind in ("blur", "crop", "compress", "noise")
    )
    detail = ", ".join(f"{kind} {means[kind]:+.4f}" for kind in kinds)
    _verdict(
        "robustness-harness", noise_finite and combined_dominates,
        f"noise@max {noise_max_mean:+.4f}; {detail}",
    )
