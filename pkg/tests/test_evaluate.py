from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfvitmil import evaluate as ev


def pairwise_auc(scores, labels):
    """O(n^2) concordance probability with ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def random_instance(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    if rng.random() < 0.5:
        scores = rng.integers(0, 5, size=n).astype(float)  # heavy ties
    else:
        scores = rng.normal(size=n)
    return scores, labels


class TestRocAuc:
    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, y = random_instance(rng)
            assert abs(ev.roc_auc(s, y).auc - pairwise_auc(s, y)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=60)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_property_against_oracle(self, pairs):
        s, y = zip(*pairs)
        assert abs(ev.roc_auc(s, y).auc - pairwise_auc(s, y)) <= 1e-12

    def test_perfect_separation(self):
        assert ev.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0

    def test_all_ties(self):
        assert ev.roc_auc([3.0] * 6, [0, 1, 0, 1, 1, 0]).auc == 0.5

    def test_monotone_transform(self):
        rng = np.random.default_rng(1)
        s, y = random_instance(rng)
        assert ev.roc_auc(s, y).auc == ev.roc_auc(np.exp(2 * s) + 7, y).auc

    def test_curve_shape(self):
        s, y = random_instance(np.random.default_rng(2))
        c = ev.roc_auc(s, y)
        assert c.points[0] == (0.0, 0.0) and c.points[-1] == (1.0, 1.0)
        assert (np.diff(c.fpr) >= 0).all() and (np.diff(c.tpr) >= 0).all()
        assert 0.0 <= c.auc <= 1.0

    def test_single_class(self):
        with pytest.raises(ev.UndefinedMetricError):
            ev.roc_auc([0.1, 0.2], [1, 1])


class TestAccuracy:
    def test_all_correct(self):
        assert ev.accuracy([1, 0, 1], [1, 0, 1]) == 1.0

    def test_complement(self):
        pred, lab = [1, 0, 1, 1], [1, 1, 0, 1]
        assert ev.accuracy(pred, [1 - v for v in lab]) == 1 - ev.accuracy(pred, lab)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.accuracy([1, 0], [1])

    def test_threshold_at_zero_score(self):
        assert ev.predicted_labels([-0.1, 0.0, 0.1]).tolist() == [0, 1, 1]


class TestZFilter:
    def test_uniform_gives_zeros(self):
        assert (ev.z_filter(np.full(10, 0.1)) == 0).all()

    def test_affine_invariance(self):
        a = np.random.default_rng(0).dirichlet(np.ones(30))
        np.testing.assert_allclose(ev.z_filter(3.5 * a + 2.0), ev.z_filter(a), atol=1e-12)

    def test_outlier_is_clamped(self):
        rng = np.random.default_rng(1)
        a = 0.01 + 1e-4 * rng.normal(size=100)
        a[17] = 5.0
        out = ev.z_filter(a, z_cap=2.0)
        assert out.argmax() == 17 and out[17] == 1.0
        z = (a - a.mean()) / a.std()
        rest = np.delete(z, 17)
        # clamped: the gap from the runner-up is at most the cap minus the runner-up's z
        expected_runner = (rest.max() - rest.min()) / (2.0 - rest.min())
        assert np.sort(out)[-2] == pytest.approx(expected_runner, abs=1e-12)

    def test_zero_mode_suppresses_outlier(self):
        a = np.r_[np.linspace(0, 1, 50), 100.0]
        out = ev.z_filter(a, mode="zero")
        assert out[-1] == 0.0 and out[:-1].max() == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=64), st.sampled_from(["clamp", "zero"]))
    def test_within_unit_interval(self, a, mode):
        out = ev.z_filter(a, mode=mode)
        assert np.isfinite(out).all() and (out >= 0).all() and (out <= 1).all()

    def test_too_short(self):
        with pytest.raises(ValueError):
            ev.z_filter([1.0])


class TestOverlay:
    def _pixels(self):
        return np.random.default_rng(0).integers(0, 256, size=(64, 96, 3), dtype=np.uint8)

    def test_zero_heatmap_is_identity(self):
        px = self._pixels()
        heat = ev.Heatmap(np.zeros((2, 3)), "s", [])
        np.testing.assert_array_equal(ev.render_overlay(px, heat, 32), px)

    def test_single_tile_locality(self):
        px = self._pixels()
        heat = ev.Heatmap.from_scores([1.0], [(1, 2)], (2, 3))
        out = ev.render_overlay(px, heat, 32)
        changed = np.any(out != px, axis=-1)
        assert changed[32:, 64:].any() and not changed[:32].any() and not changed[:, :64].any()

    def test_annotation_outline(self):
        px = self._pixels()
        ann = np.zeros((2, 3), dtype=bool)
        ann[0, 0] = True
        out = ev.render_overlay(px, ev.Heatmap(np.zeros((2, 3)), "s", []), 32, ann)
        assert tuple(out[0, 5]) == (0, 200, 0) and tuple(out[31, 31]) == (0, 200, 0)
        np.testing.assert_array_equal(out[10, 10], px[10, 10])
        np.testing.assert_array_equal(out[40:], px[40:])

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            ev.render_overlay(self._pixels(), ev.Heatmap(np.zeros((3, 3)), "s", []), 32)


class TestHitRate:
    def test_oracle_attention(self):
        labels = [[0, 1, 0], [1, 0, 0], [0, 0, 0]]
        assert ev.localization_hit_rate([np.array(l, float) for l in labels], labels) == 1.0

    def test_uniform_attention_misses(self):
        assert ev.localization_hit_rate([np.full(4, 0.25)], [[0, 0, 1, 0]]) == 0.0

    def test_no_positive_bags(self):
        with pytest.raises(ev.UndefinedMetricError):
            ev.localization_hit_rate([np.ones(2)], [[0, 0]])


def test_write_roc_dat(tmp_path):
    curve = ev.roc_auc([0.1, 0.9, 0.4], [0, 1, 1])
    ev.write_roc_dat(tmp_path / "roc.dat", curve)
    rows = (tmp_path / "roc.dat").read_text().splitlines()
    assert rows[0] == "fpr tpr" and rows[1] == "0 0" and rows[-1] == "1 1"
    assert len(rows) == len(curve.fpr) + 1
