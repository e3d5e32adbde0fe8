"""
Tests for ConfProbe calibration metrics
"""

import numpy as np
import pytest
from pathlib import Path
from unittest.mock import patch
from scipy import stats

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.metrics import (
    ScoredPrediction, accuracy, ece, brier, auroc, pearson_r, reliability_bins,
    score_predictions, metrics_summary,
)
from app.prob_core import spread_residual
from app.errors import UndefinedMetricError, DomainError


def preds_from(confidences, correct, num_classes=10):
    """Predicted class 0, truth 0 when correct else 1"""
    return [ScoredPrediction(float(c), 0, 0 if ok else 1, num_classes) for c, ok in zip(confidences, correct)]


def naive_preds(n_correct, n_total, num_classes=10):
    return preds_from([1.0] * n_total, [i < n_correct for i in range(n_total)], num_classes)


def brute_force_brier(preds):
    total = 0.0
    for p in preds:
        probs = spread_residual(p.confidence, p.num_classes, p.predicted)
        onehot = np.zeros(p.num_classes)
        onehot[p.truth] = 1.0
        total += float(np.sum((probs - onehot) ** 2))
    return total / len(preds)


def brute_force_auroc(conf, correct):
    pos = [c for c, ok in zip(conf, correct) if ok]
    neg = [c for c, ok in zip(conf, correct) if not ok]
    score = 0.0
    for p in pos:
        for q in neg:
            score += 1.0 if p > q else 0.5 if p == q else 0.0
    return score / (len(pos) * len(neg))


class TestScoredPrediction:
    """Tests for ScoredPrediction validation"""

    def test_invalid(self):
        """Test out-of-range confidence and labels"""
        with pytest.raises(DomainError):
            ScoredPrediction(1.2, 0, 0, 2)
        with pytest.raises(DomainError):
            ScoredPrediction(0.5, 2, 0, 2)


class TestAccuracy:
    """Tests for accuracy"""

    def test_values(self):
        """Test all, some and none correct"""
        assert accuracy(naive_preds(5, 5)) == 1.0
        assert accuracy(naive_preds(94, 100)) == pytest.approx(0.94)
        assert accuracy(naive_preds(0, 5)) == 0.0

    def test_empty(self):
        """Test empty input is an error"""
        with pytest.raises(UndefinedMetricError):
            accuracy([])


class TestEce:
    """Tests for expected calibration error"""

    def test_naive_identity(self):
        """Test confidence 1 everywhere gives ECE = 1 - accuracy"""
        assert ece(naive_preds(94, 100)) == pytest.approx(0.06, abs=1e-12)

    def test_perfectly_calibrated(self):
        """Test 0.8 with 80% correct and 0.2 with 20% correct"""
        conf = [0.8] * 10 + [0.2] * 10
        correct = [True] * 8 + [False] * 2 + [True] * 2 + [False] * 8
        assert ece(preds_from(conf, correct)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_fixture(self):
        """Test ten points against manual bin arithmetic

        Bins are 1/15 wide. 0.05 -> bin 0; 0.3 and 0.32 -> bin 4 (0.2667, 0.3333];
        0.55 -> bin 8 (0.5333, 0.6]; 0.9, 0.91, 0.92 -> bin 13 (0.8667, 0.9333];
        0.95, 0.99, 1.0 -> bin 14.
        """
        conf = [0.05, 0.3, 0.32, 0.55, 0.9, 0.91, 0.92, 0.95, 0.99, 1.0]
        correct = [False, True, False, True, True, True, False, True, True, True]
        expected = (
            1 * abs(0.0 - 0.05)
            + 2 * abs(0.5 - 0.31)
            + 1 * abs(1.0 - 0.55)
            + 3 * abs(2 / 3 - 0.91)
            + 3 * abs(1.0 - (0.95 + 0.99 + 1.0) / 3)
        ) / 10
        assert ece(preds_from(conf, correct)) == pytest.approx(expected, abs=1e-12)

    def test_bin_edges_right_closed(self):
        """Test an edge value belongs to the lower bin and 0 to the first"""
        bins = reliability_bins(preds_from([1 / 15, 0.0, 0.5], [True, True, True]))
        assert bins.counts[0] == 2
        assert bins.counts.sum() == 3
        assert len(bins.bin_edges) == 16

    def test_permutation_invariant(self):
        """Test shuffling samples does not change ECE or Brier"""
        rng = np.random.default_rng(1)
        preds = preds_from(rng.uniform(size=60), rng.uniform(size=60) < 0.6)
        shuffled = [preds[i] for i in rng.permutation(60)]
        assert ece(shuffled) == pytest.approx(ece(preds), abs=1e-12)
        assert brier(shuffled) == pytest.approx(brier(preds), abs=1e-12)


class TestBrier:
    """Tests for the Brier score"""

    def test_naive_identity(self):
        """Test confidence 1 gives Brier = 2 (1 - accuracy)"""
        assert brier(naive_preds(94, 100)) == pytest.approx(0.12, abs=1e-12)
        assert brier(naive_preds(94, 100, num_classes=2)) == pytest.approx(0.12, abs=1e-12)

    def test_single_sample(self):
        """Test a correct binary prediction at 0.7"""
        assert brier([ScoredPrediction(0.7, 0, 0, 2)]) == pytest.approx(0.18, abs=1e-12)

    def test_matches_brute_force(self):
        """Test against the spread-residual loop on random data"""
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = int(rng.integers(2, 12))
            n = int(rng.integers(1, 40))
            preds = [ScoredPrediction(float(rng.uniform()), int(rng.integers(k)), int(rng.integers(k)), k)
                     for _ in range(n)]
            assert brier(preds) == pytest.approx(brute_force_brier(preds), abs=1e-12)

    def test_lowering_wrong_confidence_helps(self):
        """Test lowering a wrong high-confidence prediction lowers Brier"""
        preds = preds_from([0.9, 0.8, 0.95], [True, False, True])
        better = preds_from([0.9, 0.5, 0.95], [True, False, True])
        assert brier(better) < brier(preds)

    def test_builds_vectors_with_spread_residual(self):
        """Test every prediction is scored through spread_residual"""
        preds = preds_from([0.9, 0.4, 0.6], [True, False, True], num_classes=4)
        with patch("app.metrics.spread_residual", wraps=spread_residual) as mock_spread:
            brier(preds)
        assert mock_spread.call_count == 3
        assert mock_spread.call_args_list[1][0] == (0.4, 4, 0)


class TestAuroc:
    """Tests for AUROC"""

    def test_all_tied(self):
        """Test equal confidences give 0.5"""
        assert auroc(preds_from([0.7] * 6, [True, False] * 3)) == 0.5

    def test_naive_is_half(self):
        """Test naive confidences give 0.5"""
        assert auroc(naive_preds(94, 100)) == 0.5

    def test_perfect_separation(self):
        """Test correct at 0.9, incorrect at 0.1"""
        assert auroc(preds_from([0.9, 0.9, 0.1, 0.1], [True, True, False, False])) == 1.0

    def test_degenerate(self):
        """Test all-correct input is undefined"""
        with pytest.raises(UndefinedMetricError):
            auroc(preds_from([0.2, 0.9], [True, True]))

    def test_matches_all_pairs(self):
        """Test against the O(n²) pair count on 50 random instances"""
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 201))
            # Coarse values force ties
            conf = np.round(rng.uniform(size=n), 1)
            correct = rng.uniform(size=n) < 0.6
            correct[0], correct[1] = True, False
            assert auroc(preds_from(conf, correct)) == brute_force_auroc(conf, correct)

    def test_monotone_invariance(self):
        """Test a strictly increasing map of confidences keeps AUROC"""
        rng = np.random.default_rng(4)
        conf = rng.uniform(size=80)
        correct = rng.uniform(size=80) < 0.5
        assert auroc(preds_from(conf ** 3, correct)) == pytest.approx(auroc(preds_from(conf, correct)))


class TestPearson:
    """Tests for Pearson correlation"""

    def test_perfect_lines(self):
        """Test r = ±1 for exact lines"""
        xs = [1.0, 2.0, 3.0, 5.0]
        r, p = pearson_r(xs, [2 * x + 1 for x in xs])
        assert r == pytest.approx(1.0)
        assert pearson_r(xs, [-x for x in xs])[0] == pytest.approx(-1.0)

    def test_against_scipy(self):
        """Test r and p match the t-distribution reference"""
        rng = np.random.default_rng(5)
        for r_target in (0.3, 0.6, 0.85):
            x = rng.standard_normal(12)
            y = r_target * x + np.sqrt(1 - r_target ** 2) * rng.standard_normal(12)
            r, p = pearson_r(x, y)
            ref = stats.pearsonr(x, y)
            assert r == pytest.approx(ref[0], abs=1e-12)
            assert p == pytest.approx(ref[1], rel=0.1)

    def test_zero_variance(self):
        """Test constant input is undefined"""
        with pytest.raises(UndefinedMetricError):
            pearson_r([1, 1, 1], [1, 2, 3])

    def test_too_short(self):
        """Test fewer than 3 points"""
        with pytest.raises(UndefinedMetricError):
            pearson_r([1, 2], [1, 2])


class TestSummary:
    """Tests for metrics_summary"""

    def test_degenerate_auroc_is_none(self):
        """Test all-correct input reports auroc None"""
        preds = score_predictions([0.9, 0.8], [1, 2], [1, 2], 3)
        summary = metrics_summary(preds)
        assert summary["auroc"] is None
        assert summary["acc"] == 1.0

    def test_reliability_csv(self):
        """Test the reliability export has one row per bin"""
        csv_text = reliability_bins(naive_preds(3, 4)).to_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "bin_center,count,mean_conf,acc"
        assert len(lines) == 16
        assert lines[-1].split(",")[1] == "4"
