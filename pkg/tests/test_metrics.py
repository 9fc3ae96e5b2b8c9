import numpy as np
import pytest

from osckit.metrics import (DEFAULT_ZETAS, auroc, ccr_at_fpr, ccr_fpr_at,
                            closed_set_accuracy, oscr_curve, read_curve_csv,
                            score_histogram, write_curve_csv)
from osckit.numerics import SeededRng


def brute_force_ccr_fpr(scores, labels, theta):
    n_known = scores.shape[1]
    cc = fp = nk = nu = 0
    for row, tau in zip(scores, labels):
        if tau <= n_known:
            nk += 1
            if int(np.argmax(row)) + 1 == tau and row[tau - 1] >= theta:
                cc += 1
        else:
            nu += 1
            if row.max() >= theta:
                fp += 1
    return cc / nk, fp / nu


def brute_force_mann_whitney(known_max, unk_max):
    wins = 0.0
    for k in known_max:
        for u in unk_max:
            if k > u:
                wins += 1.0
            elif k == u:
                wins += 0.5
    return wins / (len(known_max) * len(unk_max))


def random_instance(rng, n_known_classes=3, n_known=12, n_unknown=8, binary=False):
    scores = rng.uniform(0.0, 1.0, (n_known + n_unknown, n_known_classes))
    if binary:
        scores = np.round(scores * 4) / 4  # force plenty of ties
    labels = np.concatenate([
        rng.integers(1, n_known_classes + 1, size=n_known),
        np.full(n_unknown, n_known_classes + 1),
    ])
    return scores, labels


class TestCcrFprAt:
    def test_low_threshold_gives_closed_set_accuracy(self):
        rng = SeededRng(1)
        scores, labels = random_instance(rng)
        ccr, fpr = ccr_fpr_at(scores, labels, -np.inf)
        assert fpr == 1.0
        assert ccr == closed_set_accuracy(scores, labels)

    def test_high_threshold_gives_zero(self):
        rng = SeededRng(2)
        scores, labels = random_instance(rng)
        assert ccr_fpr_at(scores, labels, 2.0) == (0.0, 0.0)

    def test_hand_example_matches_brute_force(self):
        # 4 knowns, 2 unknowns
        scores = np.array([
            [0.9, 0.1],   # known, label 1, correct, score .9
            [0.2, 0.8],   # known, label 2, correct, score .8
            [0.6, 0.4],   # known, label 2, wrong argmax
            [0.55, 0.45],  # known, label 1, correct, score .55
            [0.7, 0.3],   # unknown, max .7
            [0.3, 0.35],  # unknown, max .35
        ])
        labels = np.array([1, 2, 2, 1, 3, 3])
        for theta in (0.0, 0.35, 0.55, 0.7, 0.8, 0.9, 1.0):
            assert ccr_fpr_at(scores, labels, theta) == brute_force_ccr_fpr(scores, labels, theta)

    def test_requires_both_populations(self):
        with pytest.raises(ValueError):
            ccr_fpr_at(np.array([[0.5, 0.5]]), np.array([1]), 0.5)
        with pytest.raises(ValueError):
            ccr_fpr_at(np.array([[0.5, 0.5]]), np.array([3]), 0.5)


class TestOscrCurve:
    def test_perfect_separation_contains_fpr0_accuracy(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.8], [0.3, 0.2], [0.25, 0.3]])
        labels = np.array([1, 2, 3, 3])
        curve = oscr_curve(scores, labels)
        i = int(np.argmin(curve.fpr))
        assert curve.fpr[i] == 0.0
        assert curve.ccr[i] == 1.0  # both knowns correct above all unknown maxima
        assert curve.min_finite_fpr == 0.0

    def test_identical_scores_two_extreme_points(self):
        scores = np.full((5, 2), 0.5)
        labels = np.array([1, 1, 2, 3, 3])
        curve = oscr_curve(scores, labels)
        assert len(curve) == 2
        assert curve.fpr.tolist() == [0.0, 1.0]
        # ties in argmax resolve to class 1, so only label-1 knowns count
        assert curve.ccr.tolist() == [0.0, 2.0 / 3.0]
        assert curve.min_finite_fpr == 1.0

    def test_every_point_matches_pointwise_recomputation(self):
        rng = SeededRng(3)
        for _ in range(20):
            scores, labels = random_instance(rng, n_known=12, n_unknown=8)
            curve = oscr_curve(scores, labels)
            for theta, fpr, ccr in zip(curve.thresholds, curve.fpr, curve.ccr):
                c, f = ccr_fpr_at(scores, labels, theta)
                assert (c, f) == (ccr, fpr)

    def test_monotone_and_sorted(self):
        rng = SeededRng(4)
        for _ in range(50):
            scores, labels = random_instance(rng, binary=bool(rng.integers(0, 2)))
            curve = oscr_curve(scores, labels)
            assert np.all(np.diff(curve.fpr) > 0)       # distinct, ascending
            assert np.all(np.diff(curve.ccr) >= 0)      # CCR non-decreasing in FPR

    def test_intermediate_thresholds_are_dominated(self):
        rng = SeededRng(5)
        scores, labels = random_instance(rng)
        curve = oscr_curve(scores, labels)
        finite = curve.thresholds[np.isfinite(curve.thresholds)]
        mids = (finite[1:] + finite[:-1]) / 2.0
        for theta in mids:
            c, f = ccr_fpr_at(scores, labels, theta)
            dominated = np.any((curve.fpr <= f) & (curve.ccr >= c))
            assert dominated

    def test_metadata_carried(self):
        rng = SeededRng(6)
        scores, labels = random_instance(rng)
        curve = oscr_curve(scores, labels, metadata={"method": "mss"})
        assert curve.metadata == {"method": "mss"}


class TestCcrAtFpr:
    def test_zeta_one_is_closed_set_accuracy(self):
        rng = SeededRng(7)
        for _ in range(30):
            scores, labels = random_instance(rng, binary=bool(rng.integers(0, 2)))
            curve = oscr_curve(scores, labels)
            values, _ = ccr_at_fpr(curve, (1.0,))
            assert values[0] == closed_set_accuracy(scores, labels)

    def test_saturated_scores_unreachable_below_one(self):
        # every unknown max-score sits at the global maximum
        scores = np.array([
            [1.0, 0.0], [0.6, 0.4],      # knowns (labels 1, 1)
            [1.0, 0.0], [0.0, 1.0],      # unknowns at the global max
        ])
        labels = np.array([1, 1, 3, 3])
        curve = oscr_curve(scores, labels)
        values, total = ccr_at_fpr(curve, DEFAULT_ZETAS)
        assert values[:3] == [None, None, None]
        assert values[3] == closed_set_accuracy(scores, labels)
        assert total == values[3]

    def test_selects_infimum_achievable_at_or_above_zeta(self):
        # achievable FPRs: 0.002, 0.04, 0.5, 1.0 (plus 0 from a clean top)
        rng = SeededRng(8)
        unk = np.concatenate([[0.9], np.full(19, 0.8), np.full(230, 0.5), np.full(250, 0.2)])
        known_correct = np.array([0.95, 0.85, 0.6, 0.3])
        scores_known = np.stack([known_correct, 1.0 - known_correct], axis=1)
        scores_unk = np.stack([unk, np.zeros_like(unk)], axis=1)
        scores = np.vstack([scores_known, scores_unk])
        labels = np.concatenate([np.ones(4, dtype=int), np.full(500, 3)])
        curve = oscr_curve(scores, labels)
        values, total = ccr_at_fpr(curve, (1e-2,))
        # smallest achievable FPR >= 0.01 is 0.04; both theta=0.8 and
        # theta=0.6 attain it, and the tie keeps the higher CCR (theta=0.6
        # passes the three correctly classified knowns scoring >= 0.6)
        idx = np.searchsorted(curve.fpr, 0.04)
        assert curve.fpr[idx] == pytest.approx(0.04)
        assert values[0] == pytest.approx(0.75)
        assert total == values[0]

    def test_unreachable_when_curve_stops_right_of_zeta(self):
        # min finite-threshold FPR is 0.25: zeta=0.1 unreachable, 0.5 fine
        scores = np.array([
            [0.9, 0.1], [0.7, 0.3],
            [0.9, 0.05], [0.4, 0.2], [0.3, 0.1], [0.2, 0.15],
        ])
        labels = np.array([1, 1, 3, 3, 3, 3])
        curve = oscr_curve(scores, labels)
        assert curve.min_finite_fpr == 0.25
        values, _ = ccr_at_fpr(curve, (0.1, 0.5, 1.0))
        assert values[0] is None
        assert values[1] is not None

    def test_invalid_zeta_rejected(self):
        rng = SeededRng(9)
        scores, labels = random_instance(rng)
        curve = oscr_curve(scores, labels)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                ccr_at_fpr(curve, (bad,))


class TestAuroc:
    def test_perfect_separation(self):
        scores = np.array([[0.9], [0.8], [0.1], [0.2]])
        labels = np.array([1, 1, 2, 2])
        assert auroc(scores, labels) == 1.0

    def test_identical_multisets(self):
        scores = np.array([[0.5], [0.7], [0.5], [0.7]])
        labels = np.array([1, 1, 2, 2])
        assert auroc(scores, labels) == pytest.approx(0.5, abs=1e-15)

    def test_hand_pair_counting(self):
        scores = np.array([[0.9], [0.4], [0.5], [0.1]])
        labels = np.array([1, 1, 2, 2])
        assert auroc(scores, labels) == pytest.approx(0.75, abs=1e-15)

    def test_matches_mann_whitney_exactly(self):
        rng = SeededRng(10)
        for _ in range(200):
            n_classes = int(rng.integers(1, 5))
            n_known = int(rng.integers(1, 26))
            n_unknown = int(rng.integers(1, 26))
            scores, labels = random_instance(
                rng, n_classes, n_known, n_unknown, binary=bool(rng.integers(0, 2)))
            known_max = scores[labels <= n_classes].max(axis=1)
            unk_max = scores[labels > n_classes].max(axis=1)
            expected = brute_force_mann_whitney(known_max, unk_max)
            assert abs(auroc(scores, labels) - expected) < 1e-12


class TestScoreHistogram:
    def test_single_known_top_bin(self):
        hists = score_histogram(np.array([[1.0, 0.0], [0.5, 0.5]]),
                                np.array([1, 3]),
                                np.array(["known", "negative"]), bins=5)
        assert hists["known"]["counts"].tolist() == [0, 0, 0, 0, 1]

    def test_counts_sum_to_population(self):
        rng = SeededRng(11)
        scores, labels = random_instance(rng, n_known=20, n_unknown=15)
        categories = np.array(["known"] * 20 + ["negative"] * 8 + ["unknown"] * 7)
        hists = score_histogram(scores, labels, categories, bins=7)
        assert hists["known"]["counts"].sum() == 20
        assert hists["negative"]["counts"].sum() == 8
        assert hists["unknown"]["counts"].sum() == 7

    def test_hand_binning(self):
        scores = np.array([[v, 0.0] for v in (0.05, 0.15, 0.25, 0.35, 0.45,
                                              0.55, 0.65, 0.75, 0.85, 0.95)])
        labels = np.array([1] * 10)
        categories = np.array(["known"] * 5 + ["negative"] * 5)
        labels[5:] = 3
        hists = score_histogram(scores, labels, categories, bins=2)
        assert hists["known"]["counts"].tolist() == [5, 0]
        assert hists["negative"]["counts"].tolist() == [0, 5]

    def test_data_range_for_logit_scores(self):
        scores = np.array([[-3.0, 1.0], [2.0, -1.0], [-5.0, 0.5]])
        labels = np.array([2, 1, 3])
        categories = np.array(["known", "known", "unknown"])
        hists = score_histogram(scores, labels, categories, bins=4, value_range=None)
        assert hists["known"]["counts"].sum() == 2
        assert hists["unknown"]["counts"].sum() == 1

    def test_bad_bins_rejected(self):
        with pytest.raises(ValueError):
            score_histogram(np.array([[0.5]]), np.array([1]), np.array(["known"]), bins=1)


class TestClosedSetAccuracy:
    def test_all_correct(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert closed_set_accuracy(scores, np.array([1, 2])) == 1.0

    def test_all_wrong(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert closed_set_accuracy(scores, np.array([2, 1])) == 0.0

    def test_equals_ccr_at_low_sentinel(self):
        rng = SeededRng(12)
        scores, labels = random_instance(rng)
        ccr, _ = ccr_fpr_at(scores, labels, -np.inf)
        assert closed_set_accuracy(scores, labels) == ccr


class TestCurveCsv:
    def test_roundtrip(self, tmp_path):
        rng = SeededRng(13)
        scores, labels = random_instance(rng)
        curve = oscr_curve(scores, labels)
        path = tmp_path / "curve.csv"
        write_curve_csv(curve, path)
        loaded = read_curve_csv(path)
        assert np.array_equal(loaded.thresholds, curve.thresholds)
        assert np.array_equal(loaded.fpr, curve.fpr)
        assert np.array_equal(loaded.ccr, curve.ccr)
        assert loaded.min_finite_fpr == curve.min_finite_fpr
