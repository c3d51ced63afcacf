import numpy as np
import pytest

from deeplf import metrics
from deeplf.metrics import (
    ConfusionCounts,
    aggregate,
    boundary_f1,
    boundary_mask,
    confusion_counts,
    default_boundary_tolerance,
    region_metrics,
)

from oracles import boundary_f1_brute, boundary_pixels_loops


def random_mask(rng, h=16, w=16, p=0.5):
    return (rng.random((h, w)) < p).astype(np.uint8)


class TestConfusionCounts:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(1)
        m = random_mask(rng)
        c = confusion_counts(m, m)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == m.sum()
        assert c.total == m.size

    def test_complement(self):
        rng = np.random.default_rng(2)
        m = random_mask(rng)
        c = confusion_counts(1 - m, m)
        assert c.tp == 0 and c.tn == 0

    def test_matches_tally_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            pred, gt = random_mask(rng), random_mask(rng)
            c = confusion_counts(pred, gt)
            tp = fp = fn = tn = 0
            for i in range(16):
                for j in range(16):
                    if pred[i, j] and gt[i, j]:
                        tp += 1
                    elif pred[i, j]:
                        fp += 1
                    elif gt[i, j]:
                        fn += 1
                    else:
                        tn += 1
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)

    def test_rejects_mismatched_dims(self):
        with pytest.raises(ValueError, match="dimensions"):
            confusion_counts(np.zeros((3, 3)), np.zeros((3, 4)))


class TestRegionMetrics:
    def test_worked_example(self):
        # tp=50 tn=30 fp=10 fn=10, evaluated directly from the formulas
        m = region_metrics(ConfusionCounts(tp=50, fp=10, fn=10, tn=30))
        assert m["accuracy"] == pytest.approx(0.8)
        assert m["sensitivity"] == pytest.approx(50 / 60)
        assert m["specificity"] == pytest.approx(0.75)
        assert m["jaccard"] == pytest.approx(50 / 70)
        assert m["dice_region"] == pytest.approx(100 / 120)

    def test_perfect(self):
        m = region_metrics(ConfusionCounts(tp=5, fp=0, fn=0, tn=11))
        assert all(v == 1.0 for v in m.values())

    def test_dice_jaccard_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            tp, fp, fn, tn = rng.integers(0, 50, size=4)
            if tp + fp + fn == 0:
                continue
            m = region_metrics(ConfusionCounts(int(tp), int(fp), int(fn), int(tn) + 1))
            j = m["jaccard"]
            assert m["dice_region"] == pytest.approx(2 * j / (1 + j), abs=1e-12)
            assert j <= m["dice_region"] + 1e-15
            assert all(0.0 <= v <= 1.0 for v in m.values())

    def test_empty_everything_is_vacuously_perfect(self):
        m = region_metrics(ConfusionCounts(tp=0, fp=0, fn=0, tn=9))
        assert m["sensitivity"] == 1.0
        assert m["jaccard"] == 1.0
        assert m["dice_region"] == 1.0

    def test_empty_gt_with_false_positives(self):
        m = region_metrics(ConfusionCounts(tp=0, fp=3, fn=0, tn=6))
        assert m["sensitivity"] == 0.0
        assert m["jaccard"] == 0.0

    def test_rejects_empty_total(self):
        with pytest.raises(ValueError, match="total"):
            region_metrics(ConfusionCounts(0, 0, 0, 0))


class TestBoundaryMask:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            m = random_mask(rng, 12, 12, 0.5)
            assert np.array_equal(boundary_mask(m), boundary_pixels_loops(m))

    def test_edge_pixels_count(self):
        m = np.ones((4, 4), dtype=np.uint8)
        b = boundary_mask(m)
        expect = np.ones((4, 4), dtype=bool)
        expect[1:3, 1:3] = False
        assert np.array_equal(b, expect)


class TestBoundaryF1:
    def test_identical_masks(self):
        rng = np.random.default_rng(6)
        m = np.zeros((16, 16), dtype=np.uint8)
        m[4:10, 5:12] = 1
        assert boundary_f1(m, m, 0) == 1.0

    def test_shifted_square_within_tolerance(self):
        a = np.zeros((16, 16), dtype=np.uint8)
        b = np.zeros((16, 16), dtype=np.uint8)
        a[4:8, 4:8] = 1
        b[5:9, 4:8] = 1  # shifted one pixel down
        assert boundary_f1(a, b, 1) == 1.0
        assert boundary_f1_brute(a, b, 1) == 1.0

    def test_far_blobs_score_zero(self):
        a = np.zeros((32, 32), dtype=np.uint8)
        b = np.zeros((32, 32), dtype=np.uint8)
        a[2:5, 2:5] = 1
        b[27:30, 27:30] = 1
        assert boundary_f1(a, b, 3) == 0.0

    def test_both_empty(self):
        z = np.zeros((8, 8), dtype=np.uint8)
        assert boundary_f1(z, z, 2) == 1.0

    def test_one_empty(self):
        z = np.zeros((8, 8), dtype=np.uint8)
        m = z.copy()
        m[3:5, 3:5] = 1
        assert boundary_f1(m, z, 2) == 0.0
        assert boundary_f1(z, m, 2) == 0.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            pred = random_mask(rng, 14, 14, 0.4)
            gt = random_mask(rng, 14, 14, 0.4)
            tol = int(rng.integers(0, 4))
            got = boundary_f1(pred, gt, tol)
            assert got == pytest.approx(boundary_f1_brute(pred, gt, tol), abs=1e-12)

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            pred = random_mask(rng, 16, 16, 0.45)
            gt = random_mask(rng, 16, 16, 0.45)
            scores = [boundary_f1(pred, gt, t) for t in range(0, 6)]
            assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:]))

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        pred, gt = random_mask(rng), random_mask(rng)
        assert boundary_f1(pred, gt, 2) == pytest.approx(boundary_f1(gt, pred, 2))

    def test_default_tolerance_rule(self):
        assert default_boundary_tolerance(256, 256) == 3  # 0.75% of the diagonal
        assert default_boundary_tolerance(128, 128) == 1


class TestSwapIdentities:
    def test_swapping_pred_and_gt(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            pred, gt = random_mask(rng), random_mask(rng)
            a = region_metrics(confusion_counts(pred, gt))
            b = region_metrics(confusion_counts(gt, pred))
            assert a["jaccard"] == pytest.approx(b["jaccard"])
            assert a["dice_region"] == pytest.approx(b["dice_region"])
            # swapping turns sensitivity into precision tp/(tp+fp)
            c = confusion_counts(pred, gt)
            if c.tp + c.fp > 0:
                assert b["sensitivity"] == pytest.approx(c.tp / (c.tp + c.fp))


class TestAggregate:
    def _record(self, rng, sample_id):
        rec = {"id": sample_id}
        for name in metrics.METRIC_NAMES:
            rec[name] = float(rng.random())
        return rec

    def test_single_image(self):
        rng = np.random.default_rng(11)
        rec = self._record(rng, "a")
        report = aggregate([rec], tolerance_px=2)
        for name in metrics.METRIC_NAMES:
            assert report.mean[name] == rec[name]

    def test_two_image_mean(self):
        rng = np.random.default_rng(12)
        r1, r2 = self._record(rng, "a"), self._record(rng, "b")
        r1["jaccard"], r2["jaccard"] = 0.4, 0.8
        report = aggregate([r1, r2], tolerance_px=2)
        assert report.mean["jaccard"] == pytest.approx(0.6)

    def test_many_records_match_summation_oracle(self):
        rng = np.random.default_rng(13)
        recs = [self._record(rng, f"s{i}") for i in range(50)]
        report = aggregate(recs, tolerance_px=3)
        for name in metrics.METRIC_NAMES:
            total = 0.0
            for rec in recs:
                total += rec[name]
            assert abs(report.mean[name] - total / 50) < 1e-12

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="empty"):
            aggregate([], tolerance_px=2)

    def test_report_serialization_shape(self, tmp_path):
        rng = np.random.default_rng(14)
        report = aggregate([self._record(rng, "x")], tolerance_px=2)
        out = tmp_path / "report.json"
        report.write_json(out)
        import json

        data = json.loads(out.read_text())
        assert set(data) == {"per_image", "mean", "tolerance_px"}
        assert data["per_image"][0]["id"] == "x"
