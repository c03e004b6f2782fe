import numpy as np
import pytest
import torch

from leakseg.discriminator import LeakConfig, SegLogits, UNetDiscriminator, renormalized_posterior
from leakseg.errors import ConfigError, DataError
from leakseg.evaluation import (
    ConfusionCounts,
    confusion_counts,
    difference_map,
    emit_report,
    format_metric_row,
    metrics,
    predict_full_image,
    read_report,
    save_probability_map,
)


def brute_force_counts(pred, gt, fov=None):
    tp = fp = tn = fn = 0
    h, w = pred.shape
    for r in range(h):
        for c in range(w):
            if fov is not None and not fov[r, c]:
                continue
            p, g = bool(pred[r, c]), bool(gt[r, c])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


class TestConfusionCounts:
    def test_matches_brute_force(self, rng):
        for _ in range(20):
            pred = rng.random((10, 10)) > 0.5
            gt = rng.random((10, 10)) > 0.5
            assert confusion_counts(pred, gt) == brute_force_counts(pred, gt)

    def test_perfect_prediction(self, rng):
        gt = np.zeros((10, 10), dtype=bool)
        gt.flat[rng.choice(100, size=30, replace=False)] = True
        c = confusion_counts(gt, gt)
        assert (c.tp, c.fp, c.tn, c.fn) == (30, 0, 70, 0)

    def test_inverted_prediction(self, rng):
        gt = rng.random((10, 10)) > 0.5
        c = confusion_counts(~gt, gt)
        assert c.tp == 0 and c.tn == 0

    def test_fov_restriction(self, rng):
        pred = rng.random((12, 12)) > 0.5
        gt = rng.random((12, 12)) > 0.5
        fov = np.zeros((12, 12), dtype=bool)
        fov[3:9, 3:9] = True
        c = confusion_counts(pred, gt, fov)
        assert c.total == 36
        assert c == brute_force_counts(pred, gt, fov)

    def test_shape_mismatch_fatal(self):
        with pytest.raises(ValueError):
            confusion_counts(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


class TestMetrics:
    def test_hand_arithmetic(self):
        m = metrics(ConfusionCounts(tp=8, fp=5, tn=85, fn=2))
        assert m.se == pytest.approx(0.800, abs=1e-12)
        assert m.sp == pytest.approx(85.0 / 90.0, abs=1e-12)
        assert m.acc == pytest.approx(0.930, abs=1e-12)

    def test_perfect(self):
        m = metrics(ConfusionCounts(tp=40, fp=0, tn=60, fn=0))
        assert (m.acc, m.sp, m.se) == (1.0, 1.0, 1.0)

    def test_degenerate_sensitivity_is_none(self):
        m = metrics(ConfusionCounts(tp=0, fp=3, tn=97, fn=0))
        assert m.se is None
        assert m.sp == pytest.approx(0.97)
        assert m.acc == pytest.approx(0.97)

    def test_all_zero_fatal(self):
        with pytest.raises(ValueError):
            metrics(ConfusionCounts(0, 0, 0, 0))

    def test_accuracy_is_prevalence_weighted_mix(self, rng):
        for _ in range(50):
            tp, fp, tn, fn = (int(v) for v in rng.integers(1, 50, size=4))
            m = metrics(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
            prevalence = (tp + fn) / (tp + fp + tn + fn)
            assert m.acc == pytest.approx(prevalence * m.se + (1 - prevalence) * m.sp, abs=1e-12)
            assert 0.0 <= m.acc <= 1.0


class TestDifferenceMap:
    def test_no_errors_no_color(self, rng):
        gt = rng.random((8, 8)) > 0.5
        diff = difference_map(gt, gt)
        blue = (diff == (0, 0, 255)).all(axis=-1)
        yellow = (diff == (255, 255, 0)).all(axis=-1)
        assert not blue.any() and not yellow.any()

    def test_all_false_positive_is_blue(self):
        pred = np.ones((4, 4), dtype=bool)
        gt = np.zeros((4, 4), dtype=bool)
        diff = difference_map(pred, gt)
        assert ((diff == (0, 0, 255)).all(axis=-1)).all()

    def test_tallies_match_confusion(self, rng):
        for _ in range(10):
            pred = rng.random((16, 16)) > 0.5
            gt = rng.random((16, 16)) > 0.5
            c = confusion_counts(pred, gt)
            diff = difference_map(pred, gt)
            assert int(((diff == (0, 0, 255)).all(axis=-1)).sum()) == c.fp
            assert int(((diff == (255, 255, 0)).all(axis=-1)).sum()) == c.fn
            assert int(((diff == (255, 255, 255)).all(axis=-1)).sum()) == c.tp
            assert int(((diff == (0, 0, 0)).all(axis=-1)).sum()) == c.tn


class TestReport:
    def test_table_row_formatting(self):
        row = format_metric_row(0.9574, 0.8672, 0.9750)
        assert row == "95.74 / 86.72 / 97.50"
        assert row.replace(" ", "") == "95.74/86.72/97.50"

    def test_report_round_trip(self, tmp_path):
        entries = [
            {"name": "a.png", "counts": ConfusionCounts(tp=8, fp=5, tn=85, fn=2)},
            {"name": "b.png", "counts": ConfusionCounts(tp=10, fp=0, tn=88, fn=2)},
        ]
        path = emit_report(entries, {"dataset": "synthetic"}, tmp_path)
        report = read_report(path)
        assert report["schema_version"] == 1
        assert len(report["per_image"]) == 2
        assert report["per_image"][0]["acc"] == pytest.approx(0.93)
        # pooled counts: tp=18, fp=5, tn=173, fn=4 -> acc = 191/200
        pooled = report["aggregate"]["pixel_pooled"]
        assert pooled["acc"] == pytest.approx(191.0 / 200.0)
        text = (tmp_path / "report.txt").read_text()
        assert "93.00" in text
        # second read parses to identical numbers
        assert read_report(path) == report

    def test_empty_entries_fatal(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], {}, tmp_path)


class _ConstantLogitsNet(torch.nn.Module):
    """Stand-in model yielding a fixed vessel posterior everywhere."""

    def __init__(self, vessel_logit):
        super().__init__()
        self.vessel_logit = vessel_logit
        self.param = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x, use_leak=None):
        logits = torch.zeros(x.shape[0], 2, 64, 64)
        logits[:, 1] = self.vessel_logit
        return SegLogits(logits=logits), None


class TestPredictFullImage:
    def _net(self, seed=0):
        d = UNetDiscriminator(in_channels=1, base_width=8, leak=LeakConfig())
        d.init_weights(torch.Generator().manual_seed(seed))
        return d

    def test_single_window_equals_direct_posterior(self, rng):
        net = self._net()
        image = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
        prob, mask = predict_full_image(net, image, stride=64, threshold=0.5)
        x = torch.from_numpy((image[None, None].astype(np.float32) - 127.5) / 127.5)
        with torch.no_grad():
            s, _ = net(x, use_leak=False)
            direct = renormalized_posterior(s)[0, 1].numpy()
        assert np.allclose(prob, direct, atol=1e-7)

    def test_constant_posterior_average_is_constant(self, rng):
        net = _ConstantLogitsNet(vessel_logit=1.5)
        image = rng.integers(0, 256, size=(96, 128), dtype=np.uint8)
        prob, _ = predict_full_image(net, image, stride=32, threshold=0.5)
        expected = float(torch.sigmoid(torch.tensor(1.5)))
        assert np.allclose(prob, expected, atol=1e-6)

    def test_chunking_order_invariance(self, rng):
        net = self._net(seed=3)
        image = rng.integers(0, 256, size=(100, 90), dtype=np.uint8)
        prob_a, _ = predict_full_image(net, image, stride=32, window_batch=1)
        prob_b, _ = predict_full_image(net, image, stride=32, window_batch=64)
        assert np.allclose(prob_a, prob_b, atol=1e-6)
        assert prob_a.min() >= 0.0 and prob_a.max() <= 1.0

    def test_edge_windows_cover_borders(self, rng):
        net = self._net(seed=4)
        image = rng.integers(0, 256, size=(65, 70), dtype=np.uint8)
        prob, mask = predict_full_image(net, image, stride=64)
        assert prob.shape == (65, 70) and np.isfinite(prob).all()

    def test_too_small_image_fatal(self, rng):
        net = self._net()
        with pytest.raises(DataError):
            predict_full_image(net, np.zeros((32, 80), dtype=np.uint8))

    def test_stride_and_threshold_validated(self, rng):
        net = self._net()
        image = np.zeros((64, 64), dtype=np.uint8)
        with pytest.raises(ConfigError):
            predict_full_image(net, image, stride=0)
        with pytest.raises(ConfigError):
            predict_full_image(net, image, stride=65)
        with pytest.raises(ConfigError):
            predict_full_image(net, image, threshold=1.0)


def test_probability_map_16bit_round_trip(tmp_path, rng):
    from PIL import Image

    prob = rng.random((20, 20))
    path = tmp_path / "prob.png"
    save_probability_map(prob, path)
    loaded = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    assert np.abs(loaded - prob).max() <= 0.5 / 65535.0 + 1e-9
