"""Gini, M20, segmentation and the G-M20 label boundaries."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustmorph.errors import ValidationError
from robustmorph.morphology import (
    BOUNDARIES,
    ELLIPTICAL,
    MERGER,
    SPIRAL,
    DegenerateError,
    classify_gm20,
    gini,
    m20,
    make_segmap,
    measure,
)


def gini_oracle(values):
    """Mean absolute difference form: sum_ij |x_i - x_j| / (2 n (n - 1) mean)."""
    x = np.abs(np.asarray(values, dtype=float))
    n = x.size
    return np.abs(x[:, None] - x[None, :]).sum() / (2 * n * (n - 1) * x.mean())


def blob(size=24, cy=11.3, cx=12.1, sy=2.0, sx=3.5):
    y, x = np.mgrid[:size, :size]
    return np.exp(-0.5 * (((y - cy) / sy) ** 2 + ((x - cx) / sx) ** 2))


class TestSegmap:
    def test_threshold_zero_selects_all_positive(self, rng):
        img = rng.uniform(0.1, 1, size=(3, 6, 6))
        assert make_segmap(img, 0.0).all()

    def test_high_threshold_selects_peak(self):
        img = blob()
        mask = make_segmap(img, 0.999)
        assert mask.sum() == 1 and mask[np.unravel_index(img.argmax(), img.shape)]

    def test_known_image(self):
        img = np.full((4, 4), 0.1)
        img[1, 2] = 1.0
        img[3, 0] = 0.7
        mask = make_segmap(img, 0.5)
        assert sorted(zip(*np.nonzero(mask))) == [(1, 2), (3, 0)]

    def test_bands_are_summed(self):
        img = np.zeros((3, 4, 4))
        img[0, 0, 0] = img[1, 0, 0] = img[2, 0, 0] = 1.0
        img[0, 3, 3] = 2.0
        mask = make_segmap(img, 0.5)
        assert mask[0, 0] and mask[3, 3] and mask.sum() == 2

    @pytest.mark.parametrize("t", [-0.1, 1.0, 1.5])
    def test_bad_threshold(self, t):
        with pytest.raises(ValidationError):
            make_segmap(blob(), t)

    def test_empty_image(self):
        with pytest.raises(ValidationError):
            make_segmap(np.zeros((8, 8)))


class TestGini:
    def test_uniform_is_zero(self):
        assert gini(np.ones((5, 5)), np.ones((5, 5), bool)) == pytest.approx(0.0, abs=1e-15)

    def test_single_nonzero_is_one(self):
        img = np.zeros((4, 4))
        img[2, 1] = 3.0
        assert gini(img, np.ones((4, 4), bool)) == pytest.approx(1.0, abs=1e-12)

    def test_values_1115(self):
        img = np.array([[1.0, 1.0], [1.0, 5.0]])
        assert gini(img, np.ones((2, 2), bool)) == pytest.approx(0.5, abs=1e-12)

    def test_all_zero_segment(self):
        with pytest.raises(ValidationError):
            gini(np.zeros((3, 3)), np.ones((3, 3), bool))

    def test_single_pixel_segment(self):
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        with pytest.raises(ValidationError):
            gini(np.ones((3, 3)), mask)

    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0.01, 100)))
    @settings(max_examples=60, deadline=None)
    def test_matches_pairwise_oracle(self, values):
        img = values.reshape(1, -1)
        g = gini(img, np.ones_like(img, bool))
        assert g == pytest.approx(gini_oracle(values), abs=1e-10)
        assert -1e-12 <= g <= 1 + 1e-12


class TestM20:
    def test_symmetric_pair(self):
        img = np.zeros((5, 5))
        img[2, 0] = img[2, 4] = 1.0
        mask = img > 0
        # centre must sit on a segment pixel: include the midpoint with negligible flux
        mask[2, 2] = True
        img[2, 2] = 1e-300
        assert m20(img, mask) == pytest.approx(np.log10(0.5), abs=1e-9)

    def test_four_corners(self):
        img = np.zeros((5, 5))
        for y, x in [(0, 0), (0, 4), (4, 0), (4, 4)]:
            img[y, x] = 1.0
        mask = img > 0
        mask[2, 2] = True
        img[2, 2] = 1e-300
        assert m20(img, mask) == pytest.approx(np.log10(0.25), abs=1e-9)

    def test_single_pixel_is_degenerate(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        with pytest.raises(DegenerateError):
            m20(img, np.ones((5, 5), bool))

    def test_centre_minimises_total_moment(self):
        img = blob()
        seg = make_segmap(img, 0.05)
        ys, xs = np.nonzero(seg)
        f = img[ys, xs]
        totals = [(f * ((xs - x0) ** 2 + (ys - y0) ** 2)).sum() for y0, x0 in zip(ys, xs)]
        k = int(np.argmin(totals))
        d2 = (xs - xs[k]) ** 2 + (ys - ys[k]) ** 2
        order = np.argsort(-f, kind="stable")
        acc, bright = 0.0, 0.0
        for i in order:
            bright += f[i] * d2[i]
            acc += f[i]
            if acc >= 0.2 * f.sum():
                break
        assert m20(img, seg) == pytest.approx(np.log10(bright / totals[k]), abs=1e-12)

    def test_concentrated_source_more_negative(self):
        compact, extended = blob(sy=1.0, sx=1.0), blob(sy=4.0, sx=4.0)
        # a de Vaucouleurs-like core puts more of its flux close to centre
        core = compact + 0.05 * extended
        assert m20(core, make_segmap(core, 0.01)) < 0


class TestProperties:
    @given(st.floats(1e-3, 1e3))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, k):
        img = blob() + 0.3 * blob(cy=5, cx=18, sy=1.2, sx=1.2)
        seg = make_segmap(img, 0.05)
        assert gini(k * img, seg) == pytest.approx(gini(img, seg), abs=1e-9)
        assert m20(k * img, seg) == pytest.approx(m20(img, seg), abs=1e-9)

    @given(st.integers(-4, 4), st.integers(-4, 4))
    @settings(max_examples=30, deadline=None)
    def test_translation_covariance(self, dy, dx):
        img = np.zeros((40, 40))
        img[8:32, 8:32] = blob() + 0.3 * blob(cy=5, cx=18, sy=1.2, sx=1.2)
        seg = make_segmap(img, 0.05)
        moved, moved_seg = np.roll(img, (dy, dx), (0, 1)), np.roll(seg, (dy, dx), (0, 1))
        assert gini(moved, moved_seg) == pytest.approx(gini(img, seg), abs=1e-6)
        assert m20(moved, moved_seg) == pytest.approx(m20(img, seg), abs=1e-6)

    def test_m20_non_positive_and_gini_in_unit_interval(self, rng):
        for _ in range(20):
            img = rng.gamma(0.5, size=(3, 16, 16)) + blob(16, 7.5, 8.2)
            res = measure(img)
            assert 0 <= res.gini <= 1
            assert res.m20 <= 0


class TestBoundaries:
    def test_line_algebra(self):
        assert BOUNDARIES.es_a / BOUNDARIES.es_c == pytest.approx(0.14, abs=1e-12)
        assert BOUNDARIES.es_b / BOUNDARIES.es_c == pytest.approx(0.8, abs=1e-12)

    def test_lines_meet_at_intersection(self):
        m0, g0 = BOUNDARIES.m20_0, BOUNDARIES.g0
        assert abs(BOUNDARIES.merger_line(m0) - g0) < 1e-3
        assert abs(BOUNDARIES.elliptical_spiral_line(m0) - g0) < 1e-3

    @pytest.mark.parametrize(
        "g,m,label",
        [(0.6, -1.0, MERGER), (0.6, -2.5, ELLIPTICAL), (0.45, -1.5, SPIRAL)],
    )
    def test_examples(self, g, m, label):
        assert classify_gm20(g, m) == label

    def test_exact_intersection_is_spiral(self):
        m = -0.47 / 0.28
        g = BOUNDARIES.elliptical_spiral_line(m)
        assert abs(g - BOUNDARIES.g0) < 1e-3
        assert classify_gm20(min(g, BOUNDARIES.merger_line(m)), m) == SPIRAL

    def test_rounded_intersection_sits_just_above_es_line(self):
        # the rounded (0.565, -1.679) is 6e-5 above the E/S line, so strict inequalities give elliptical
        assert 0 < 0.565 - BOUNDARIES.elliptical_spiral_line(-1.679) < 1e-4
        assert classify_gm20(0.565, -1.679) == ELLIPTICAL

    def test_ties_go_to_non_merger_then_spiral(self):
        m = -2.0
        assert classify_gm20(BOUNDARIES.merger_line(m), m) != MERGER
        m = -2.5
        g = BOUNDARIES.elliptical_spiral_line(m)
        assert g < BOUNDARIES.merger_line(m)
        assert classify_gm20(g, m) == SPIRAL

    @given(st.floats(0, 1), st.floats(-3.5, 0))
    @settings(max_examples=100, deadline=None)
    def test_partition_matches_inequalities(self, g, m):
        label = classify_gm20(g, m)
        if g > -0.14 * m + 0.33:
            assert label == MERGER
        elif g > 0.14 * m + 0.80 + 1e-12:
            assert label == ELLIPTICAL
        elif g < 0.14 * m + 0.80 - 1e-12:
            assert label == SPIRAL
