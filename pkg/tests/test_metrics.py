import numpy as np
import pytest
from hypothesis import given, strategies as st

from protoseg.errors import ContractError, ShapeError
from protoseg.metrics import (
    ConfusionCounts,
    MetricsReport,
    accumulate,
    fbiou,
    iou_from_counts,
    miou,
    per_class_iou,
)

from oracles import confusion_loops


def random_pair(rng, h=6, w=6):
    return (rng.random((h, w)) < 0.5).astype(np.uint8), (rng.random((h, w)) < 0.5).astype(np.uint8)


class TestAccumulate:
    def test_perfect_prediction(self):
        gt = np.zeros((5, 5), dtype=np.uint8)
        gt[1:3, :] = 1
        assert gt.sum() == 10
        counts = accumulate(ConfusionCounts(), gt, gt, 0)
        assert counts.counts[0].tolist() == [10, 0, 0]

    def test_disjoint_prediction(self):
        pred = np.zeros((4, 4), dtype=np.uint8)
        pred[0, :3] = 1
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[3, :] = 1
        counts = accumulate(ConfusionCounts(), pred, gt, 2)
        assert counts.counts[2].tolist() == [0, 3, 4]

    def test_partial_overlap_iou(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[0, :4] = 1
        pred = np.zeros((4, 4), dtype=np.uint8)
        pred[0, :2] = 1
        pred[1, 0] = 1
        counts = accumulate(ConfusionCounts(), pred, gt, 1)
        assert counts.counts[1].tolist() == [2, 1, 2]
        assert iou_from_counts(counts.counts[1]) == pytest.approx(0.4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate(ConfusionCounts(), np.zeros((2, 2), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8), 0)

    @given(st.integers(0, 10**6))
    def test_matches_pixel_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = random_pair(rng)
        counts = accumulate(ConfusionCounts(), pred, gt, 0)
        assert tuple(counts.counts[0]) == confusion_loops(pred, gt)

    def test_additive_and_permutation_invariant(self):
        rng = np.random.default_rng(0)
        pairs = [random_pair(rng) for _ in range(6)]
        forward = ConfusionCounts()
        backward = ConfusionCounts()
        for pred, gt in pairs:
            accumulate(forward, pred, gt, 0)
        for pred, gt in reversed(pairs):
            accumulate(backward, pred, gt, 0)
        assert np.array_equal(forward.counts[0], backward.counts[0])

    def test_merge_is_associative_monoid(self):
        rng = np.random.default_rng(1)
        parts = []
        for _ in range(3):
            c = ConfusionCounts()
            pred, gt = random_pair(rng)
            accumulate(c, pred, gt, 0)
            accumulate(c, *random_pair(rng), 1)
            parts.append(c)
        left = parts[0].merge(parts[1]).merge(parts[2])
        right = parts[0].merge(parts[1].merge(parts[2]))
        for cid in (0, 1):
            assert np.array_equal(left.counts[cid], right.counts[cid])


class TestMiou:
    def test_all_perfect(self):
        counts = ConfusionCounts({0: np.array([5, 0, 0]), 1: np.array([9, 0, 0])})
        assert miou(counts, [0, 1]) == 1.0

    def test_two_class_mean(self):
        counts = ConfusionCounts({0: np.array([4, 3, 3]), 1: np.array([6, 2, 2])})
        assert miou(counts, [0, 1]) == pytest.approx(0.5)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(2)
        counts = ConfusionCounts()
        ids = list(range(5))
        vals = {}
        for cid in ids:
            tp, fp, fn = (int(rng.integers(1, 20)) for _ in range(3))
            counts.counts[cid] = np.array([tp, fp, fn], dtype=np.int64)
            vals[cid] = tp / (tp + fp + fn)
        assert miou(counts, ids) == pytest.approx(np.mean(list(vals.values())))
        assert per_class_iou(counts) == pytest.approx(vals)

    def test_unevaluated_class_named(self):
        counts = ConfusionCounts({0: np.array([1, 0, 0])})
        with pytest.raises(ContractError, match="class 3"):
            miou(counts, [0, 3])

    def test_iou_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred, gt = random_pair(rng)
            if not (pred | gt).any():
                continue
            a = accumulate(ConfusionCounts(), pred, gt, 0).counts[0]
            b = accumulate(ConfusionCounts(), gt, pred, 0).counts[0]
            assert iou_from_counts(a) == iou_from_counts(b)
            assert 0.0 <= iou_from_counts(a) <= 1.0
            if gt.any():
                assert (iou_from_counts(a) == 1.0) == np.array_equal(pred, gt)


class TestFbiou:
    def test_perfect(self):
        rng = np.random.default_rng(4)
        gts = [random_pair(rng)[1] for _ in range(4)]
        assert fbiou(gts, gts) == 1.0

    def test_background_bias_case(self):
        # tiny objects: an all-background predictor keeps FB-IoU high while
        # per-class mIoU is zero
        gts, preds = [], []
        for _ in range(10):
            gt = np.zeros((20, 20), dtype=np.uint8)
            gt[:2, :10] = 1  # 5% foreground
            gts.append(gt)
            preds.append(np.zeros_like(gt))
        score = fbiou(preds, gts)
        assert score == pytest.approx((0.0 + 0.95) / 2)
        counts = ConfusionCounts()
        for pred, gt in zip(preds, gts):
            accumulate(counts, pred, gt, 0)
        assert miou(counts, [0]) < 0.05
        assert score > 0.45

    def test_complement_prediction_is_zero(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[:2] = 1
        assert fbiou([1 - gt], [gt]) == 0.0

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            fbiou([], [])
        with pytest.raises(ShapeError):
            fbiou([np.zeros((2, 2), dtype=np.uint8)], [np.zeros((3, 3), dtype=np.uint8)])


class TestReport:
    def test_roundtrip_and_schema(self, tmp_path):
        report = MetricsReport(
            per_class={0: 0.5, 1: 0.25}, miou=0.375, fbiou=0.6, fold=2, n_episodes=40, fingerprint="abc123"
        )
        path = report.save(tmp_path / "metrics.2.json")
        import json

        record = json.loads(path.read_text())
        assert set(record) == {"fold", "miou", "fbiou", "per_class_iou", "n_episodes", "fingerprint"}
        assert record["per_class_iou"] == {"0": 0.5, "1": 0.25}
        again = MetricsReport.from_dict(record)
        assert again == report
