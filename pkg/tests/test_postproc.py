import numpy as np
import pytest

from osckit.evt import HIGH, LOW, DegenerateTailError, WeibullModel, weibull_survival
from osckit.numerics import SeededRng, cosine_distance, softmax
from osckit.postproc import (EvmModel, MlsModel, MssModel, OpenMaxModel,
                             ScoreMatrix, evm_fit, evm_reduce, evm_scores,
                             load_postproc_model, mixup_pairs, mls_scores,
                             mss_scores, openmax_fit, openmax_scores,
                             save_postproc_model)


def clustered_features(rng, n_per_class, n_classes, dim=5, gap=3.0):
    rows, labels = [], []
    for c in range(n_classes):
        center = np.zeros(dim)
        center[c] = gap
        rows.append(center + 0.4 * rng.normal(0.0, 1.0, (n_per_class, dim)))
        labels.append(np.full(n_per_class, c + 1))
    return np.vstack(rows), np.concatenate(labels)


class TestScoreMatrix:
    def test_eval_view_keeps_populations_separate(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [0.6, 0.4]])
        labels = np.array([1, 2, 3, 3])
        cats = np.array(["known", "known", "negative", "unknown"])
        matrix = ScoreMatrix(scores=scores, labels=labels, categories=cats)
        neg_scores, neg_labels = matrix.eval_view("negative")
        assert neg_scores.shape == (3, 2)
        assert neg_labels.tolist() == [1, 2, 3]
        unk_scores, _ = matrix.eval_view("unknown")
        assert unk_scores.shape == (3, 2)
        with pytest.raises(ValueError):
            matrix.eval_view("known")


class TestMssMls:
    def test_mss_uniform_logits(self):
        assert mss_scores(np.array([[0.0, 0.0]]), 2)[0] == pytest.approx([0.5, 0.5])

    def test_mss_garbage_column_dropped_after_softmax(self):
        out = mss_scores(np.array([[0.0, 0.0, np.log(2.0)]]), 2)
        assert out[0] == pytest.approx([0.25, 0.25], abs=1e-12)

    def test_mss_rows_bounded(self):
        rng = SeededRng(1)
        z = rng.normal(0.0, 3.0, (40, 4))
        out = mss_scores(z, 4)
        assert np.all(out <= 1.0) and np.all(out >= 0.0)

    def test_mls_identity(self):
        z = np.array([[3.2, -1.0]])
        assert mls_scores(z, 2).tolist() == [[3.2, -1.0]]

    def test_mls_drops_garbage_column(self):
        z = np.array([[3.2, -1.0, 9.9]])
        assert mls_scores(z, 2).tolist() == [[3.2, -1.0]]

    def test_argmax_agreement(self):
        rng = SeededRng(2)
        z = rng.normal(0.0, 2.0, (100, 5))
        assert np.array_equal(np.argmax(mss_scores(z, 5), axis=1),
                              np.argmax(mls_scores(z, 5), axis=1))

    def test_column_count_validated(self):
        with pytest.raises(ValueError):
            mss_scores(np.zeros((1, 5)), 2)


class TestOpenMaxFit:
    def test_hand_built_mavs_and_tail(self):
        rng = SeededRng(3)
        phi, labels = clustered_features(rng, 12, 2)
        logits = np.stack([-np.abs(phi[:, 0] - 3.0), -np.abs(phi[:, 1] - 3.0)], axis=1)
        model = openmax_fit(phi, logits, labels, tail_size=5, multiplier=2.0, alpha=1)
        predicted = np.argmax(logits, axis=1) + 1
        for c in (1, 2):
            mask = (labels == c) & (predicted == c)
            assert model.mavs[c - 1] == pytest.approx(phi[mask].mean(axis=0), abs=1e-12)
            dists = np.array([2.0 * cosine_distance(row, model.mavs[c - 1])
                              for row in phi[mask]])
            expected_tail = np.sort(dists)[-5:]
            # the fitted Weibull is reproducible from the brute-force tail
            from osckit.evt import weibull_fit
            expected = weibull_fit(expected_tail, 5, HIGH)
            assert model.weibulls[c - 1].shape == pytest.approx(expected.shape, rel=1e-9)
            assert model.weibulls[c - 1].scale == pytest.approx(expected.scale, rel=1e-9)
            assert model.weibulls[c - 1].tail_size == expected.tail_size

    def test_identical_features_degenerate(self):
        phi = np.tile(np.array([1.0, 2.0]), (6, 1))
        logits = np.tile(np.array([1.0, 0.0]), (6, 1))
        labels = np.ones(6, dtype=int)
        phi2 = np.vstack([phi, np.tile([0.0, 3.0], (6, 1))])
        logits2 = np.vstack([logits, np.tile([0.0, 1.0], (6, 1))])
        labels2 = np.concatenate([labels, np.full(6, 2)])
        with pytest.raises(DegenerateTailError):
            openmax_fit(phi2, logits2, labels2, tail_size=5, multiplier=2.0, alpha=1)

    def test_multiplier_scales_distances_linearly(self):
        rng = SeededRng(4)
        phi, labels = clustered_features(rng, 15, 2)
        logits = np.stack([-np.abs(phi[:, 0] - 3.0), -np.abs(phi[:, 1] - 3.0)], axis=1)
        base = openmax_fit(phi, logits, labels, tail_size=8, multiplier=1.0, alpha=1)
        doubled = openmax_fit(phi, logits, labels, tail_size=8, multiplier=2.0, alpha=1)
        for w1, w2 in zip(base.weibulls, doubled.weibulls):
            assert w2.shape == pytest.approx(w1.shape, rel=1e-9)
            assert w2.scale == pytest.approx(2.0 * w1.scale, rel=1e-9)

    def test_too_few_correct_samples(self):
        phi = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        # class 2 never wins the argmax
        logits = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        labels = np.array([1, 1, 2, 2])
        with pytest.raises(ValueError, match="class 2"):
            openmax_fit(phi, logits, labels, tail_size=2, multiplier=1.0, alpha=1)

    def test_alpha_bounds(self):
        rng = SeededRng(5)
        phi, labels = clustered_features(rng, 10, 2)
        logits = np.stack([-np.abs(phi[:, 0] - 3.0), -np.abs(phi[:, 1] - 3.0)], axis=1)
        with pytest.raises(ValueError):
            openmax_fit(phi, logits, labels, tail_size=5, multiplier=1.0, alpha=3)


class TestOpenMaxScores:
    def _fit_small(self, seed=6, alpha=2):
        rng = SeededRng(seed)
        phi, labels = clustered_features(rng, 15, 3)
        logits = np.stack([-np.abs(phi[:, c] - 3.0) for c in range(3)], axis=1)
        model = openmax_fit(phi, logits, labels, tail_size=8, multiplier=2.0, alpha=alpha)
        return model, phi, logits

    def test_null_revision_equals_mss(self):
        model, phi, logits = self._fit_small()
        # enormous Weibull scales make every CDF weight vanish
        null = OpenMaxModel(
            mavs=model.mavs,
            weibulls=[WeibullModel(shape=5.0, scale=1e9, tail=HIGH, tail_size=8)] * 3,
            multiplier=model.multiplier, alpha=model.alpha, tail_size=8)
        out = openmax_scores(null, phi, logits)
        assert np.max(np.abs(out - mss_scores(logits, 3))) < 1e-12

    def test_query_at_mav_is_unrevised(self):
        model, phi, logits = self._fit_small(alpha=1)
        # distance to the top class MAV is zero, so omega = CDF(0) = 0
        z = np.array([[5.0, 0.0, 0.0]])
        out = openmax_scores(model, model.mavs[0][None, :], z)
        assert out[0] == pytest.approx(mss_scores(z, 3)[0], abs=1e-12)

    def test_hand_revision_example(self):
        # alpha=1, K=2, z=[2,1], omega_1=0.5 -> revised [1,1], unknown=1
        mavs = np.array([[1.0, 0.0], [0.0, 1.0]])
        scale = 0.5 / np.log(2.0)  # CDF(0.5) = 0.5 for shape 1
        weibulls = [WeibullModel(shape=1.0, scale=scale, tail=HIGH, tail_size=5)] * 2
        model = OpenMaxModel(mavs=mavs, weibulls=weibulls, multiplier=1.0,
                             alpha=1, tail_size=5)
        # query orthogonal enough for 1 - cos = 0.5 to the top-class MAV
        phi = np.array([[0.5, np.sqrt(3.0) / 2.0]])
        assert cosine_distance(phi[0], mavs[0]) == pytest.approx(0.5, abs=1e-12)
        out = openmax_scores(model, phi, np.array([[2.0, 1.0]]))
        assert out[0] == pytest.approx([1 / 3, 1 / 3], abs=1e-9)

    def test_known_probabilities_sum_below_one(self):
        model, phi, logits = self._fit_small()
        rng = SeededRng(7)
        queries = rng.normal(0.0, 2.0, (30, 5))
        out = openmax_scores(model, queries, rng.normal(0.0, 1.0, (30, 3)))
        assert np.all(out.sum(axis=1) < 1.0)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_openmax_drops_unknown_column_but_it_lowers_scores(self):
        model, phi, logits = self._fit_small(alpha=3)
        out = openmax_scores(model, phi, logits)
        assert out.shape == (45, 3)


def brute_force_evm(phi, labels, tail_size, multiplier):
    """Independent O(N^2) enumeration of tail sets and per-anchor fits."""
    from osckit.evt import weibull_fit
    weibulls = []
    tails = []
    for n in range(phi.shape[0]):
        dists = sorted(
            multiplier * cosine_distance(phi[n], phi[m])
            for m in range(phi.shape[0]) if labels[m] != labels[n]
        )
        tail = dists[:min(tail_size, len(dists))]
        tails.append(tail)
        weibulls.append(weibull_fit(np.array(tail), len(tail), LOW))
    return tails, weibulls


class TestEvm:
    def test_hand_built_tail_sets(self):
        phi = np.array([[1.0, 0.0], [0.9, 0.3], [0.0, 1.0], [0.3, 0.9]])
        labels = np.array([1, 1, 2, 2])
        model = evm_fit(phi, labels, tail_size=2, multiplier=1.0)
        tails, weibulls = brute_force_evm(phi, labels, 2, 1.0)
        for fitted, expected in zip(model.weibulls, weibulls):
            assert fitted == expected

    def test_matches_brute_force_on_random_instances(self):
        rng = SeededRng(8)
        for _ in range(5):
            phi, labels = clustered_features(rng, 6, 3, dim=4)
            model = evm_fit(phi, labels, tail_size=4, multiplier=0.7)
            _, weibulls = brute_force_evm(phi, labels, 4, 0.7)
            for fitted, expected in zip(model.weibulls, weibulls):
                assert fitted.shape == pytest.approx(expected.shape, abs=1e-9)
                assert fitted.scale == pytest.approx(expected.scale, abs=1e-9)

    def test_multiplier_scales_margins(self):
        rng = SeededRng(9)
        phi, labels = clustered_features(rng, 8, 2)
        base = evm_fit(phi, labels, tail_size=5, multiplier=0.5)
        scaled = evm_fit(phi, labels, tail_size=5, multiplier=1.0)
        for w1, w2 in zip(base.weibulls, scaled.weibulls):
            assert w2.shape == pytest.approx(w1.shape, rel=1e-9)
            assert w2.scale == pytest.approx(2.0 * w1.scale, rel=1e-9)

    def test_anchor_count_equals_training_count(self):
        rng = SeededRng(10)
        phi, labels = clustered_features(rng, 7, 3)
        model = evm_fit(phi, labels, tail_size=4, multiplier=0.5)
        assert model.anchors.shape[0] == phi.shape[0]
        assert model.cover_threshold == 1.0

    def test_single_class_rejected(self):
        rng = SeededRng(11)
        phi = rng.normal(0.0, 1.0, (10, 3))
        with pytest.raises(ValueError):
            evm_fit(phi, np.ones(10, dtype=int), tail_size=4, multiplier=0.5)

    def test_query_at_anchor_scores_one(self):
        rng = SeededRng(12)
        phi, labels = clustered_features(rng, 8, 2)
        model = evm_fit(phi, labels, tail_size=5, multiplier=0.5)
        out = evm_scores(model, phi[:1])
        assert out[0, labels[0] - 1] == 1.0

    def test_far_query_scores_near_zero(self):
        rng = SeededRng(13)
        phi, labels = clustered_features(rng, 8, 2, dim=4)
        model = evm_fit(phi, labels, tail_size=5, multiplier=0.5)
        far = -np.ones((1, 4))
        assert np.all(evm_scores(model, far) < 0.05)

    def test_scores_match_direct_max_over_survivals(self):
        rng = SeededRng(14)
        phi, labels = clustered_features(rng, 5, 3, dim=4)
        model = evm_fit(phi, labels, tail_size=4, multiplier=0.6)
        queries = rng.normal(0.0, 1.5, (10, 4))
        out = evm_scores(model, queries)
        for qi, q in enumerate(queries):
            for c in (1, 2, 3):
                vals = [weibull_survival(w, 0.6 * cosine_distance(q, a))
                        for a, al, w in zip(model.anchors, model.anchor_labels, model.weibulls)
                        if al == c]
                assert out[qi, c - 1] == pytest.approx(max(vals), abs=1e-9)

    def test_monotone_in_distance_for_max_anchor(self):
        rng = SeededRng(15)
        phi, labels = clustered_features(rng, 8, 2, dim=4)
        model = evm_fit(phi, labels, tail_size=5, multiplier=0.5)
        anchor = model.anchors[0]
        other = model.anchors[labels == 2][0]
        # blend from the anchor toward a far point: survival must not rise
        path = [anchor * (1 - t) + other * t for t in np.linspace(0.0, 1.0, 9)]
        scores = evm_scores(model, np.stack(path))[:, 0]
        assert np.all(np.diff(scores) <= 1e-12)


class TestEvmReduce:
    def _model(self, phi, labels, tail_size=3, multiplier=0.5):
        return evm_fit(phi, labels, tail_size=tail_size, multiplier=multiplier)

    def test_self_only_coverage_keeps_everything(self):
        rng = SeededRng(16)
        phi, labels = clustered_features(rng, 6, 2, dim=4, gap=4.0)
        model = self._model(phi, labels)
        # anchors only reach themselves at the strictest threshold
        reduced = evm_reduce(model, 1.0)
        # threshold 1.0 keeps every anchor whose survival at any other
        # sample is < 1; identical anchors would still collapse
        assert reduced.anchors.shape[0] <= model.anchors.shape[0]
        scores_before = evm_scores(model, phi)
        scores_after = evm_scores(reduced, phi)
        assert np.all(scores_after.max(axis=1) >= 1.0 - 1e-12)
        assert scores_before.shape == scores_after.shape

    def test_duplicate_anchors_collapse(self):
        base = np.array([[3.0, 0.2], [3.0, 0.2], [1.5, 2.6],
                         [0.1, 3.0], [0.2, 2.9], [0.0, 2.8]])
        labels = np.array([1, 1, 1, 2, 2, 2])
        model = self._model(base, labels, tail_size=2)
        reduced = evm_reduce(model, 0.999999)
        # the exact duplicate contributes exactly one retained anchor
        dup_kept = np.sum([np.array_equal(a, [3.0, 0.2]) for a in reduced.anchors])
        assert dup_kept == 1
        # every original sample stays covered at the threshold
        scores = evm_scores(reduced, base)
        for i, lab in enumerate(labels):
            assert scores[i, lab - 1] >= 0.999999

    def test_central_anchor_covers_class(self):
        # one central point plus satellites; at omega=0.5 the center covers all
        center = np.array([3.0, 3.0])
        sats = np.array([[3.2, 3.0], [2.8, 3.0], [3.0, 3.2], [3.0, 2.8]])
        phi = np.vstack([[center], sats, [[-3.0, 3.0]], [[-3.0, 2.5]]])
        labels = np.array([1, 1, 1, 1, 1, 2, 2])
        model = self._model(phi, labels, tail_size=2, multiplier=1.0)
        reduced = evm_reduce(model, 0.5)
        kept_class1 = np.flatnonzero(reduced.anchor_labels == 1)
        assert kept_class1.size == 1
        # the survivor is the central anchor (greedy max coverage)
        assert np.array_equal(reduced.anchors[kept_class1[0]], center)

    def test_bad_threshold_rejected(self):
        rng = SeededRng(17)
        phi, labels = clustered_features(rng, 5, 2, dim=4)
        model = self._model(phi, labels)
        for bad in (0.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                evm_reduce(model, bad)


class TestModelSerialization:
    def test_roundtrips_bit_exact(self, tmp_path):
        rng = SeededRng(18)
        phi, labels = clustered_features(rng, 10, 2)
        logits = np.stack([-np.abs(phi[:, 0] - 3.0), -np.abs(phi[:, 1] - 3.0)], axis=1)
        models = {
            "mss": MssModel(n_known=2),
            "mls": MlsModel(n_known=2),
            "openmax": openmax_fit(phi, logits, labels, 5, 2.0, 1),
            "evm": evm_fit(phi, labels, 5, 0.5),
        }
        for name, model in models.items():
            path = tmp_path / f"{name}.ock"
            save_postproc_model(model, path)
            loaded = load_postproc_model(path)
            path2 = tmp_path / f"{name}2.ock"
            save_postproc_model(loaded, path2)
            assert path.read_bytes() == path2.read_bytes(), name
        om = load_postproc_model(tmp_path / "openmax.ock")
        assert om.weibulls == models["openmax"].weibulls
        assert np.array_equal(om.mavs, models["openmax"].mavs)
        ev = load_postproc_model(tmp_path / "evm.ock")
        assert np.array_equal(ev.anchors, models["evm"].anchors)
        assert ev.weibulls == models["evm"].weibulls
