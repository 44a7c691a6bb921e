import numpy as np
import pytest

from cetal.evaluation import EvalReport, EvaluationError, average_precision, confusion_matrix, evaluate, tiou
from cetal.heads import Segment
from cetal.model import DEFAULT_THRESHOLDS

import oracles


def S(s, e, c=0, p=None):
    return Segment(s, e, c, p)


def _random_instance(rng, num_classes=2, num_seq=2, max_preds=6, max_gt=4):
    """Coarse time grid so tIoU and start ties actually occur."""
    preds, gts = [], []
    for _ in range(num_seq):
        g = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            s = float(rng.integers(0, 8)) * 0.5
            g.append(S(s, s + float(rng.integers(1, 5)) * 0.5, int(rng.integers(num_classes))))
        p = []
        for _ in range(int(rng.integers(0, max_preds + 1))):
            s = float(rng.integers(0, 8)) * 0.5
            score = float(rng.choice([0.2, 0.5, 0.9])) if rng.uniform() < 0.3 else float(rng.uniform(0.01, 1))
            p.append(S(s, s + float(rng.integers(1, 5)) * 0.5, int(rng.integers(num_classes)), score))
        preds.append(p)
        gts.append(g)
    if not any(gts):
        gts[0].append(S(0.0, 1.0, 0))
    return preds, gts


def _tuples(preds, gts):
    return ([[(s.start, s.end, s.label, s.score) for s in seq] for seq in preds],
            [[(s.start, s.end, s.label) for s in seq] for seq in gts])


class TestTiou:
    def test_examples(self):
        assert tiou(S(0, 2), S(1, 3)) == 1 / 3
        assert tiou(S(1, 2), S(1, 2)) == 1.0
        assert tiou(S(0, 1), S(2, 3)) == 0.0
        assert tiou(S(0, 1), S(1, 2)) == 0.0

    def test_symmetric_and_bounded(self, rng):
        for _ in range(100):
            a0, b0 = rng.uniform(0, 5, 2)
            a, b = S(a0, a0 + rng.uniform(0.1, 3)), S(b0, b0 + rng.uniform(0.1, 3))
            v = tiou(a, b)
            assert v == tiou(b, a) and 0.0 <= v < 1.0


class TestAp:
    def test_single_exact(self):
        assert average_precision([S(1, 2, 0, 0.7)], [S(1, 2)], 0.5) == 1.0

    def test_hand_walked_curve(self):
        preds = [S(0, 1, 0, 0.9), S(5, 6, 0, 0.95)]
        assert average_precision(preds, [S(0, 1)], 0.5) == 0.5

    def test_no_predictions(self):
        assert average_precision([], [S(0, 1)], 0.5) == 0.0

    def test_duplicate_counts_once(self):
        assert average_precision([S(0, 1, 0, 0.9), S(0, 1, 0, 0.8)], [S(0, 1)], 0.5) == 1.0
        assert average_precision([S(0, 1, 0, 0.8), S(0, 1, 0, 0.9), S(2, 3, 0, 0.85)], [S(0, 1), S(2, 3)], 0.5) == 1.0

    def test_oracle_200_instances(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            preds, gts = _random_instance(rng)
            p, g = _tuples(preds, gts)
            report = evaluate(preds, gts, num_classes=2)
            ref = oracles.brute_map(p, g, 2, report.thresholds)
            worst = max(worst, max(abs(a - b) for a, b in zip(report.map_per_threshold, ref)))
        assert worst < 1e-9

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        thresholds = np.linspace(0.05, 0.95, 10)
        for _ in range(50):
            preds, gts = _random_instance(rng)
            r = evaluate(preds, gts, thresholds=thresholds, num_classes=2)
            assert all(a >= b - 1e-15 for a, b in zip(r.map_per_threshold, r.map_per_threshold[1:]))


class TestEvaluate:
    def test_default_thresholds(self):
        assert list(DEFAULT_THRESHOLDS) == pytest.approx([0.3, 0.4, 0.5, 0.6, 0.7])
        r = evaluate([[S(0, 1, 0, 0.5)]], [[S(0, 1)]])
        assert r.thresholds == pytest.approx([0.3, 0.4, 0.5, 0.6, 0.7])

    def test_perfect(self):
        gts = [[S(0, 1, 0), S(2, 4, 1)], [S(1, 3, 2)]]
        preds = [[Segment(s.start, s.end, s.label, 0.8) for s in seq] for seq in gts]
        r = evaluate(preds, gts, num_classes=3)
        assert r.avg_map == 1.0 and all(v == 1.0 for v in r.map_per_threshold)

    def test_empty_predictions(self):
        assert evaluate([[], []], [[S(0, 1)], [S(1, 2, 1)]], num_classes=2).avg_map == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(EvaluationError):
            evaluate([[S(0, 1, 0, 0.9)]], [[]], num_classes=2)

    def test_mismatched_lists(self):
        with pytest.raises(EvaluationError):
            evaluate([[], []], [[S(0, 1)]])

    def test_class_without_gt_excluded(self):
        r = evaluate([[S(0, 1, 0, 0.9), S(3, 4, 1, 0.9)]], [[S(0, 1, 0)]], num_classes=2)
        assert r.ap[1] == [None] * 5 and r.avg_map == 1.0
        assert r.gt_counts == [1, 0] and r.pred_counts == [1, 1]

    def test_order_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            preds, gts = _random_instance(rng)
            shuffled = [list(np.array(seq, dtype=object)[rng.permutation(len(seq))]) if seq else [] for seq in preds]
            a = evaluate(preds, gts, num_classes=2)
            b = evaluate(shuffled, gts, num_classes=2)
            assert a.map_per_threshold == b.map_per_threshold and a.confusion == b.confusion

    def test_avg_is_mean_and_ap_bounded(self):
        rng = np.random.default_rng(5)
        preds, gts = _random_instance(rng, num_classes=3, num_seq=4)
        r = evaluate(preds, gts, num_classes=3)
        assert r.avg_map == pytest.approx(np.mean(r.map_per_threshold), abs=1e-15)
        assert all(0 <= v <= 1 for row in r.ap for v in row if v is not None)

    def test_report_round_trip(self):
        r = evaluate([[S(0, 1, 0, 0.9)]], [[S(0, 1, 0), S(2, 3, 1)]], num_classes=2, labels=["a", "b"])
        again = EvalReport.from_dict(r.to_dict())
        assert again.to_json() == r.to_json()
        assert r.confusion_csv().splitlines()[0] == "gt\\pred,a,b,background"


class TestConfusion:
    def test_cross_label_cell(self):
        C = 19
        m = confusion_matrix([[S(2.0, 4.0, 9, 0.8)]], [[S(2.0, 4.1, 8)]], C)
        assert m[8, 9] == 1 and m.sum() == 1

    def test_perfect_is_diagonal(self):
        gts = [[S(0, 1, 0), S(2, 3, 1), S(4, 5, 2)]]
        preds = [[Segment(s.start, s.end, s.label, 0.9) for s in gts[0]]]
        m = confusion_matrix(preds, gts, 3)
        np.testing.assert_array_equal(m[:3, :3], np.eye(3))
        assert m[3].sum() == 0 and m[:, 3].sum() == 0

    def test_no_predictions_background(self):
        m = confusion_matrix([[]], [[S(0, 1, 0), S(2, 3, 1)]], 2)
        assert m[0, 2] == 1 and m[1, 2] == 1 and m[:, :2].sum() == 0

    def test_rows_sum_to_gt_counts(self):
        rng = np.random.default_rng(3)
        preds, gts = _random_instance(rng, num_classes=3, num_seq=5)
        m = confusion_matrix(preds, gts, 3, min_score=0.0)
        counts = np.bincount([s.label for seq in gts for s in seq], minlength=3)
        np.testing.assert_array_equal(m[:3].sum(axis=1), counts)

    def test_low_scores_ignored(self):
        m = confusion_matrix([[S(0, 1, 1, 0.1)]], [[S(0, 1, 0)]], 2, min_score=0.3)
        assert m[0, 2] == 1

    def test_normalized_rows(self):
        m = confusion_matrix([[S(0, 1, 0, 0.9), S(2, 3, 1, 0.9)]], [[S(0, 1, 0), S(2, 3, 0)]], 2, normalize=True)
        assert m[0].sum() == pytest.approx(1.0) and m[0, 0] == 0.5

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            confusion_matrix([[]], [[S(0, 1)]], 1, tiou_threshold=1.2)
