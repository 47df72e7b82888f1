import math

import numpy as np
import pytest
import torch

from tbnet.core import NumericError, TrainConfig
from tbnet.data import ClassWeights
from tbnet.losses import EPS, LossReport, boundary_bce, dual_task_loss, weighted_cross_entropy
from tbnet.network import NetworkOutput


def make_weights(normalized):
    normalized = np.asarray(normalized, dtype=np.float64)
    return ClassWeights(raw=normalized.copy(), normalized=normalized)


def brute_force_image_weighted_ce(probs, labels, weights):
    """Literal triple-sum oracle over images, classes, and pixels."""
    total = 0.0
    for p_img, l_img in zip(probs, labels):
        c = p_img.shape[-1]
        w_n = 0.0
        ce_n = 0.0
        for y in range(p_img.shape[0]):
            for x in range(p_img.shape[1]):
                for cls in range(c):
                    indicator = 1.0 if l_img[y, x] == cls else 0.0
                    w_n += weights[cls] * indicator
                    ce_n += indicator * -math.log(max(p_img[y, x, cls], EPS))
        total += w_n * ce_n
    return total


def random_probs(rng, shape_hw, c):
    raw = rng.random((*shape_hw, c)) + 0.05
    return raw / raw.sum(axis=-1, keepdims=True)


class TestWeightedCrossEntropy:
    def test_single_pixel_hand_example(self):
        probs = torch.tensor([[[0.5]], [[0.5]]], dtype=torch.float64).unsqueeze(0)
        labels = torch.tensor([[[1]]])
        loss = weighted_cross_entropy(
            probs, labels, make_weights([0.25, 0.75]), mode="per_pixel"
        )
        assert float(loss) == pytest.approx(0.75 * math.log(2.0), rel=1e-12)

    def test_perfect_prediction_is_zero_for_all_modes(self):
        labels = torch.tensor([[0, 1], [2, 1]])
        probs = torch.zeros(3, 2, 2, dtype=torch.float64)
        for y in range(2):
            for x in range(2):
                probs[labels[y, x], y, x] = 1.0
        w = make_weights([0.2, 0.3, 0.5])
        for mode in ("per_pixel", "per_image", "none"):
            loss = weighted_cross_entropy(probs, labels, w, mode=mode)
            assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_weights_scale_plain_ce(self):
        rng = np.random.default_rng(0)
        c = 4
        probs = torch.from_numpy(random_probs(rng, (5, 6), c).transpose(2, 0, 1))
        labels = torch.from_numpy(rng.integers(0, c, (5, 6)))
        plain = weighted_cross_entropy(probs, labels, mode="none")
        uniform = weighted_cross_entropy(
            probs, labels, make_weights([1.0 / c] * c), mode="per_pixel"
        )
        assert float(uniform) == pytest.approx(float(plain) / c, rel=1e-9)

    def test_per_image_matches_brute_force_sum(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            b = int(rng.integers(1, 4))
            probs_np = np.stack([random_probs(rng, (4, 4), 3) for _ in range(b)])
            labels_np = rng.integers(0, 3, (b, 4, 4))
            weights = rng.random(3) + 0.1
            weights /= weights.sum()
            expected = brute_force_image_weighted_ce(probs_np, labels_np, weights)
            got = weighted_cross_entropy(
                torch.from_numpy(probs_np.transpose(0, 3, 1, 2)),
                torch.from_numpy(labels_np),
                make_weights(weights),
                mode="per_image",
                reduction="sum",
            )
            assert float(got) == pytest.approx(expected, rel=1e-9)

    def test_mean_reduction_divides_by_pixels(self):
        rng = np.random.default_rng(3)
        probs = torch.from_numpy(random_probs(rng, (4, 4), 3).transpose(2, 0, 1))
        labels = torch.from_numpy(rng.integers(0, 3, (4, 4)))
        w = make_weights([0.5, 0.3, 0.2])
        total = weighted_cross_entropy(probs, labels, w, mode="per_pixel", reduction="sum")
        mean = weighted_cross_entropy(probs, labels, w, mode="per_pixel", reduction="mean")
        assert float(mean) == pytest.approx(float(total) / 16, rel=1e-12)

    def test_weight_scaling_is_homogeneous(self):
        rng = np.random.default_rng(5)
        probs = torch.from_numpy(random_probs(rng, (3, 3), 3).transpose(2, 0, 1))
        labels = torch.from_numpy(rng.integers(0, 3, (3, 3)))
        w = np.array([0.2, 0.5, 0.3])
        base = weighted_cross_entropy(probs, labels, make_weights(w), mode="per_pixel")
        scaled = weighted_cross_entropy(probs, labels, make_weights(3.0 * w), mode="per_pixel")
        assert float(scaled) == pytest.approx(3.0 * float(base), rel=1e-12)

    def test_batch_order_invariance_per_pixel(self):
        rng = np.random.default_rng(11)
        probs_np = np.stack([random_probs(rng, (4, 4), 3) for _ in range(3)])
        labels_np = rng.integers(0, 3, (3, 4, 4))
        w = make_weights([0.1, 0.6, 0.3])
        fwd = weighted_cross_entropy(
            torch.from_numpy(probs_np.transpose(0, 3, 1, 2)), torch.from_numpy(labels_np), w
        )
        perm = [2, 0, 1]
        rev = weighted_cross_entropy(
            torch.from_numpy(probs_np[perm].transpose(0, 3, 1, 2)),
            torch.from_numpy(labels_np[perm]),
            w,
        )
        assert float(fwd) == pytest.approx(float(rev), rel=1e-12)

    def test_nan_probs_fail_fast(self):
        probs = torch.full((2, 1, 1), float("nan"))
        with pytest.raises(NumericError):
            weighted_cross_entropy(probs, torch.zeros(1, 1, dtype=torch.long), mode="none")

    def test_nonnegative_and_zero_only_at_perfect(self):
        rng = np.random.default_rng(13)
        probs = torch.from_numpy(random_probs(rng, (4, 4), 3).transpose(2, 0, 1))
        labels = torch.from_numpy(rng.integers(0, 3, (4, 4)))
        w = make_weights([0.3, 0.4, 0.3])
        for mode in ("per_pixel", "per_image", "none"):
            assert float(weighted_cross_entropy(probs, labels, w, mode=mode)) > 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        logits = torch.from_numpy(rng.normal(size=(1, 3, 3, 3))).requires_grad_(True)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 3, 3)))
        w = make_weights([0.2, 0.5, 0.3])

        def f(lg):
            return weighted_cross_entropy(torch.softmax(lg, 1), labels, w, mode="per_pixel")

        loss = f(logits)
        loss.backward()
        analytic = logits.grad.clone()
        h = 1e-4
        for _ in range(12):
            idx = tuple(rng.integers(0, s) for s in logits.shape)
            plus = logits.detach().clone()
            plus[idx] += h
            minus = logits.detach().clone()
            minus[idx] -= h
            fd = (float(f(plus)) - float(f(minus))) / (2 * h)
            ref = float(analytic[idx])
            assert fd == pytest.approx(ref, rel=1e-3, abs=1e-8)


class TestBoundaryBCE:
    def test_exact_prediction_is_zero(self):
        target = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert float(boundary_bce(target.clone(), target)) == pytest.approx(0.0, abs=1e-9)

    def test_half_prediction_equals_log_two(self):
        pred = torch.full((5, 5), 0.5, dtype=torch.float64)
        target = (torch.arange(25).reshape(5, 5) % 2).to(torch.float64)
        assert float(boundary_bce(pred, target)) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_single_pixel_hand_value(self):
        pred = torch.tensor([[0.9]], dtype=torch.float64)
        target = torch.tensor([[1.0]], dtype=torch.float64)
        assert float(boundary_bce(pred, target)) == pytest.approx(-math.log(0.9), rel=1e-12)

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            boundary_bce(torch.rand(2, 2), torch.full((2, 2), 0.5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            boundary_bce(torch.rand(2, 2), torch.zeros(2, 3))

    def test_sum_reduction(self):
        pred = torch.full((2, 2), 0.5, dtype=torch.float64)
        target = torch.zeros(2, 2, dtype=torch.float64)
        assert float(boundary_bce(pred, target, reduction="sum")) == pytest.approx(
            4 * math.log(2.0), rel=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        raw = torch.from_numpy(rng.normal(size=(4, 4))).requires_grad_(True)
        target = torch.from_numpy((rng.random((4, 4)) < 0.3).astype(np.float64))

        def f(r):
            return boundary_bce(torch.sigmoid(r), target)

        loss = f(raw)
        loss.backward()
        h = 1e-4
        for _ in range(8):
            idx = tuple(rng.integers(0, 4, 2))
            plus = raw.detach().clone()
            plus[idx] += h
            minus = raw.detach().clone()
            minus[idx] -= h
            fd = (float(f(plus)) - float(f(minus))) / (2 * h)
            assert fd == pytest.approx(float(raw.grad[idx]), rel=1e-3, abs=1e-8)


class TestDualTaskLoss:
    def _output(self, rng, c=3, hw=(4, 4), with_boundary=True):
        probs_np = random_probs(rng, hw, c).transpose(2, 0, 1)[None]
        probs = torch.from_numpy(probs_np)
        boundary = torch.from_numpy(rng.random((1, *hw))) if with_boundary else None
        return NetworkOutput(
            seg_logits=torch.log(probs), seg_probs=probs, boundary_prob=boundary
        )

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(29)
        out = self._output(rng)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        target = torch.from_numpy((rng.random((1, 4, 4)) < 0.5).astype(np.float64))
        w = make_weights([0.2, 0.5, 0.3])
        cfg = TrainConfig(lambda_seg=1.0, lambda_boundary=1.0, weighting_mode="per_pixel")
        report = dual_task_loss(out, labels, target, w, cfg)
        assert float(report.total) == pytest.approx(
            float(report.seg) + float(report.boundary), rel=1e-12
        )

    def test_zero_boundary_lambda_degenerates_to_seg(self):
        rng = np.random.default_rng(31)
        out = self._output(rng)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        target = torch.from_numpy((rng.random((1, 4, 4)) < 0.5).astype(np.float64))
        w = make_weights([0.2, 0.5, 0.3])
        cfg = TrainConfig(lambda_boundary=0.0)
        report = dual_task_loss(out, labels, target, w, cfg)
        assert float(report.total) == pytest.approx(float(report.seg), rel=1e-12)

    def test_doubling_lambdas_doubles_total(self):
        rng = np.random.default_rng(37)
        out = self._output(rng)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        target = torch.from_numpy((rng.random((1, 4, 4)) < 0.5).astype(np.float64))
        w = make_weights([0.2, 0.5, 0.3])
        one = dual_task_loss(out, labels, target, w, TrainConfig())
        two = dual_task_loss(
            out, labels, target, w, TrainConfig(lambda_seg=2.0, lambda_boundary=2.0)
        )
        assert float(two.total) == pytest.approx(2 * float(one.total), rel=1e-12)

    def test_missing_boundary_target_rejected(self):
        rng = np.random.default_rng(41)
        out = self._output(rng)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        with pytest.raises(ValueError, match="boundary target"):
            dual_task_loss(out, labels, None, make_weights([0.2, 0.5, 0.3]), TrainConfig())

    def test_ablated_boundary_stream_gives_zero_component(self):
        rng = np.random.default_rng(43)
        out = self._output(rng, with_boundary=False)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        report = dual_task_loss(out, labels, None, make_weights([0.2, 0.5, 0.3]), TrainConfig())
        assert float(report.boundary) == 0.0
        assert float(report.total) == pytest.approx(float(report.seg), rel=1e-12)

    def test_report_is_loss_report(self):
        rng = np.random.default_rng(47)
        out = self._output(rng)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        target = torch.from_numpy((rng.random((1, 4, 4)) < 0.5).astype(np.float64))
        report = dual_task_loss(out, labels, target, make_weights([0.2, 0.5, 0.3]), TrainConfig())
        assert isinstance(report, LossReport)
        total, seg, boundary = report.as_floats()
        assert math.isfinite(total) and math.isfinite(seg) and math.isfinite(boundary)
