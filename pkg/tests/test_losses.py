"""Loss values against closed forms and brute-force oracles; gradient
checks; invariance properties."""

import math

import numpy as np
import pytest

from rine.head import HeadConfig, backward, forward, init_params
from rine.kernels import Rng
from rine.losses import LossConfig, bce_with_logits, combined, supcontrast


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def brute_force_supcontrast(features, labels, tau, normalize=True):
    """Independent oracle: enumerate every (anchor, positive, other) term."""
    f = np.asarray(features, dtype=np.float64)
    if normalize:
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
    b = len(labels)
    total, anchors = 0.0, 0
    for i in range(b):
        positives = [p for p in range(b) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        anchors += 1
        inner = 0.0
        for p in positives:
            den = sum(math.exp(f[i] @ f[a] / tau) for a in range(b) if a != i)
            inner += math.log(math.exp(f[i] @ f[p] / tau) / den)
        total += -inner / len(positives)
    return total / anchors if anchors else 0.0


class TestBce:
    def test_zero_logit_positive_label(self):
        loss, grad = bce_with_logits(np.array([0.0]), np.array([1]))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)
        assert grad[0] == pytest.approx(-0.5, abs=1e-12)

    def test_saturated_logit_no_overflow(self):
        loss, grad = bce_with_logits(np.array([50.0]), np.array([1]))
        assert 0.0 <= loss < 1e-20
        assert np.all(np.isfinite(grad))

    def test_closed_form_oracle(self):
        loss, _ = bce_with_logits(np.array([1.0, -2.0]), np.array([1, 0]))
        expected = (softplus(-1.0) + softplus(-2.0)) / 2.0
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.2201, abs=1e-4)

    def test_gradient_is_sigmoid_minus_label_over_batch(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=12)
        y = rng.integers(0, 2, size=12)
        _, grad = bce_with_logits(z, y)
        h = 1e-6
        for i in range(12):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd = (bce_with_logits(zp, y)[0] - bce_with_logits(zm, y)[0]) / (2 * h)
            assert grad[i] == pytest.approx(fd, abs=1e-8)

    def test_convex_in_logits(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, size=10)
        for _ in range(20):
            z1 = rng.normal(scale=3, size=10)
            z2 = rng.normal(scale=3, size=10)
            mid, _ = bce_with_logits((z1 + z2) / 2, y)
            l1, _ = bce_with_logits(z1, y)
            l2, _ = bce_with_logits(z2, y)
            assert mid <= (l1 + l2) / 2 + 1e-7

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            bce_with_logits(np.array([]), np.array([]))

    def test_non_binary_labels_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            bce_with_logits(np.array([0.0]), np.array([2]))


class TestSupcontrast:
    def test_single_pair_same_label_zero_loss(self):
        f = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss, grad = supcontrast(f, np.array([1, 1]), tau=1.0)
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_two_different_labels_degenerate(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, grad = supcontrast(f, np.array([0, 1]))
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(f))

    @pytest.mark.parametrize("b", [4, 5, 6, 8])
    def test_matches_brute_force_oracle(self, b):
        rng = np.random.default_rng(b)
        f = rng.normal(size=(b, 5))
        labels = np.array([0, 1] * (b // 2) + [0] * (b % 2))
        loss, _ = supcontrast(f, labels, tau=0.1)
        assert loss == pytest.approx(brute_force_supcontrast(f, labels, 0.1), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(4, 3))
        labels = np.array([0, 0, 1, 1])
        _, grad = supcontrast(f, labels, tau=0.1)
        h = 1e-6
        for i in range(4):
            for j in range(3):
                fp, fm = f.copy(), f.copy()
                fp[i, j] += h
                fm[i, j] -= h
                fd = (
                    brute_force_supcontrast(fp, labels, 0.1)
                    - brute_force_supcontrast(fm, labels, 0.1)
                ) / (2 * h)
                assert abs(grad[i, j] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_scale_invariance_when_normalized(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(6, 4))
        labels = np.array([0, 1, 0, 1, 1, 0])
        base, _ = supcontrast(f, labels, tau=0.2)
        scaled, _ = supcontrast(3.7 * f, labels, tau=0.2)
        assert abs(base - scaled) <= 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        f = rng.normal(size=(6, 4))
        labels = np.array([0, 1, 0, 1, 1, 0])
        loss, grad = supcontrast(f, labels, tau=0.1)
        perm = np.array([3, 1, 5, 0, 2, 4])
        loss_p, grad_p = supcontrast(f[perm], labels[perm], tau=0.1)
        assert loss == pytest.approx(loss_p, abs=1e-12)
        assert np.allclose(grad[perm], grad_p, atol=1e-12)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="two"):
            supcontrast(np.ones((1, 3)), np.array([0]))


class TestCombined:
    def test_xi_zero_is_ce_bit_for_bit(self):
        ce, g_ce = 0.37, np.array([0.1, -0.2], np.float32)
        loss, g_logits, g_feats = combined(ce, g_ce, 5.0, np.ones((2, 3)), 0.0)
        assert loss == ce
        assert g_logits is g_ce
        assert np.array_equal(g_feats, np.zeros((2, 3)))

    def test_weighted_sum(self):
        loss, _, g_feats = combined(0.5, np.zeros(1), 1.0, np.full((1, 2), 2.0), 0.2)
        assert loss == pytest.approx(0.7, abs=1e-12)
        assert np.allclose(g_feats, 0.4)

    def test_xi_zero_junction_gradient_matches_pure_classifier_backprop(self):
        cfg = HeadConfig(blocks=2, backbone_width=6, proj_width=4, depth=1, dropout=0.0)
        params = init_params(cfg, Rng(40))
        k = Rng(41).normal(0, 1, (4, 2, 6)).astype(np.float32)
        labels = np.array([0, 1, 0, 1])
        logits, feats, trace = forward(k, params, cfg, mode="eval")
        _, g_ce = bce_with_logits(logits, labels)
        _, g_cont = supcontrast(feats, labels)
        _, g_logits, g_feats = combined(0.1, g_ce, 0.2, g_cont, 0.0)
        with_zero = backward(trace, params, g_logits, g_feats)
        without = backward(trace, params, g_logits, None)
        for name in with_zero:
            assert np.allclose(with_zero[name], without[name], atol=0.0), name

    def test_end_to_end_finite_difference(self):
        # gradient of the combined scalar through the whole head
        cfg = HeadConfig(blocks=2, backbone_width=5, proj_width=3, depth=1, dropout=0.0)
        params = init_params(cfg, Rng(42)).astype(np.float64)
        k = Rng(43).normal(0, 1, (4, 2, 5)).astype(np.float64)
        labels = np.array([0, 1, 1, 0])
        xi = 0.4

        def value(p):
            logits, feats, trace = forward(k, p, cfg, mode="eval")
            ce, g_ce = bce_with_logits(logits, labels)
            cont, g_cont = supcontrast(feats, labels, tau=0.1)
            total, g_logits, g_feats = combined(ce, g_ce, cont, g_cont, xi)
            return total, trace, g_logits, g_feats

        total, trace, g_logits, g_feats = value(params)
        grads = backward(trace, params, g_logits, g_feats)
        h = 1e-6
        for name, arr in params.named().items():
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up, *_ = value(params)
                arr[idx] = orig - h
                down, *_ = value(params)
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                assert grads[name][idx] == pytest.approx(fd, abs=2e-6), name


def test_loss_config_validation():
    with pytest.raises(ValueError, match="xi"):
        LossConfig(xi=-0.1)
    with pytest.raises(ValueError, match="tau"):
        LossConfig(tau=0.0)
