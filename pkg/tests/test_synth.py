"""Galaxy rendering, survey emulation, preprocessing and augmentation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from robustmorph.errors import ShapeError, ValidationError
from robustmorph.synth import (
    Y1,
    Y10,
    Component,
    FamilyPriors,
    GalaxyParams,
    PreprocessConfig,
    SurveyConfig,
    augment,
    emulate_survey,
    preprocess,
    render_galaxy,
    sample_params,
    sersic_b,
    sersic_total,
)


def sersic_total_quad(n, r_e, q):
    """Numerically integrated flux of a unit-I_e elliptical Sérsic profile."""
    b = 2 * n - 1 / 3
    inner, _ = quad(lambda r: 2 * math.pi * r * math.exp(-b * ((r / r_e) ** (1 / n) - 1)), 0, math.inf, limit=400)
    return q * inner


def comp(n=1.0, r_e=4.0, flux=(50.0, 100.0, 120.0), q=1.0, pa=0.0):
    return Component(n, r_e, flux, q, pa)


class TestRender:
    @pytest.mark.parametrize("n,q", [(1.0, 1.0), (1.0, 0.6), (4.0, 1.0), (0.5, 0.8), (2.5, 0.7)])
    def test_sersic_total_matches_quadrature(self, n, q):
        assert sersic_total(n, 3.0, q) == pytest.approx(sersic_total_quad(n, 3.0, q), rel=1e-6)

    def test_exponential_disk_flux_within_5_percent(self):
        params = GalaxyParams("spheroid", comp(n=1.0, r_e=4.0))
        img = render_galaxy(params, size=64)
        np.testing.assert_allclose(img.sum(axis=(1, 2)), params.primary.flux, rtol=0.05)

    def test_non_negative_and_shape(self, rng):
        for family in ("disk", "spheroid", "merger"):
            img = render_galaxy(sample_params(family, rng), 64)
            assert img.shape == (3, 64, 64) and img.min() >= 0

    def test_zero_arm_amplitude_is_plain_sersic(self):
        c = comp(n=0.8, r_e=6.0, q=0.7, pa=0.4)
        disk = render_galaxy(GalaxyParams("disk", c, arm_amplitude=0.0), 48)
        plain = render_galaxy(GalaxyParams("spheroid", c), 48)
        np.testing.assert_array_equal(disk, plain)

    def test_arms_change_the_image(self):
        c = comp(n=0.8, r_e=6.0)
        disk = render_galaxy(GalaxyParams("disk", c, arm_amplitude=0.5), 48)
        plain = render_galaxy(GalaxyParams("spheroid", c), 48)
        assert np.abs(disk - plain).max() > 1e-3

    def test_merger_superposition(self):
        c = comp(n=2.0, r_e=3.0)
        merged = render_galaxy(GalaxyParams("merger", c, c, separation=0.0), 48)
        doubled = render_galaxy(GalaxyParams("spheroid", comp(n=2.0, r_e=3.0, flux=(100.0, 200.0, 240.0))), 48)
        np.testing.assert_allclose(merged, doubled, rtol=0, atol=1e-9)

    @pytest.mark.parametrize(
        "bad",
        [
            comp(n=0.3),
            comp(n=7.0),
            comp(r_e=0.0),
            comp(r_e=30.0),
            comp(q=0.0),
            comp(q=1.2),
            comp(flux=(1.0, 0.0, 1.0)),
        ],
    )
    def test_invalid_component(self, bad):
        with pytest.raises(ValidationError):
            render_galaxy(GalaxyParams("spheroid", bad), 64)

    def test_small_stamp_rejected(self):
        with pytest.raises(ValidationError):
            render_galaxy(GalaxyParams("spheroid", comp(r_e=2.0)), 12)

    def test_merger_needs_secondary(self):
        with pytest.raises(ValidationError):
            render_galaxy(GalaxyParams("merger", comp()), 64)

    def test_sersic_b_approximation(self):
        assert sersic_b(1.0) == pytest.approx(5 / 3)
        assert sersic_b(4.0) == pytest.approx(23 / 3)


class TestSampling:
    @pytest.mark.parametrize("size", [32, 64, 100])
    def test_samples_valid_at_size(self, rng, size):
        for family in ("disk", "spheroid", "merger"):
            for _ in range(20):
                sample_params(family, rng, FamilyPriors(), size).validate(size)

    def test_unknown_family(self, rng):
        with pytest.raises(ValidationError):
            sample_params("irregular", rng)


class TestSurvey:
    def test_exposure_times(self):
        assert [Y10.exposure_time(b) for b in range(3)] == [2400.0, 5520.0, 5520.0]
        assert [Y1.exposure_time(b) for b in range(3)] == [240.0, 552.0, 552.0]

    def test_empty_sky_noise_statistics(self):
        raw = np.zeros((3, 100, 100))
        cfg = SurveyConfig(years=1, sky=(20.0, 20.0, 20.0))
        out = emulate_survey(raw, cfg, np.random.default_rng(0))
        for b in range(3):
            var_expected = cfg.sky[b] * cfg.exposure_time(b)
            assert abs(out[b].mean()) < 0.05 * math.sqrt(var_expected)
            assert out[b].var() == pytest.approx(var_expected, rel=0.05)

    def test_expectation_linearity(self):
        raw = np.full((3, 4, 4), 0.5)
        rng = np.random.default_rng(1)
        m10 = np.mean([emulate_survey(raw, Y10, rng, subtract_sky=False)[:, 2, 2] for _ in range(1000)], axis=0)
        m1 = np.mean([emulate_survey(raw, Y1, rng, subtract_sky=False)[:, 2, 2] for _ in range(1000)], axis=0)
        np.testing.assert_allclose(m10 / m1, 10.0, rtol=0.03)

    def test_snr_ratio_sqrt10(self):
        # flat source, no PSF so every pixel is an independent realisation
        raw = np.full((3, 10, 100), 0.5)
        rng = np.random.default_rng(2)
        y10 = SurveyConfig(years=10, psf_fwhm=0.0)
        y1 = SurveyConfig(years=1, psf_fwhm=0.0)
        snr = []
        for cfg in (y10, y1):
            r = emulate_survey(raw, cfg, rng)[1].ravel()
            snr.append(r.mean() / r.std())
        assert snr[0] / snr[1] == pytest.approx(math.sqrt(10), rel=0.10)

    def test_seeded_reproducible(self):
        raw = np.full((3, 8, 8), 1.0)
        a = emulate_survey(raw, Y1, np.random.default_rng(5))
        b = emulate_survey(raw, Y1, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_negative_raw_rejected(self):
        raw = np.zeros((3, 4, 4))
        raw[0, 0, 0] = -1
        with pytest.raises(ValidationError):
            emulate_survey(raw, Y1)

    def test_overflow_guard(self):
        with pytest.raises(ValidationError):
            emulate_survey(np.full((3, 4, 4), 1e15), Y10)

    def test_wrong_band_count(self):
        with pytest.raises(ShapeError):
            emulate_survey(np.zeros((2, 4, 4)), Y10)

    def test_psf_preserves_flux(self):
        raw = np.zeros((3, 64, 64))
        raw[:, 32, 32] = 1.0
        from robustmorph.synth import blur

        np.testing.assert_allclose(blur(raw, 3.0).sum(axis=(1, 2)), 1.0, atol=1e-9)


class TestPreprocess:
    def test_range_and_max(self, rng):
        obs = rng.normal(size=(3, 32, 32)) * 50
        out = preprocess(obs)
        assert out.min() >= 0 and out.max() == pytest.approx(1.0, abs=1e-15)
        hi = np.percentile(obs, 99.9)
        assert np.all(out[obs >= hi] == out.max())

    def test_constant_image(self):
        np.testing.assert_array_equal(preprocess(np.full((3, 32, 32), 7.0)), 0.0)

    def test_needs_1000_pixels(self):
        with pytest.raises(ValidationError):
            preprocess(np.zeros((3, 10, 10)))

    def test_closed_form(self, rng):
        obs = rng.normal(size=(3, 20, 20))
        lo, hi = np.percentile(obs, [0.1, 99.9])
        x = (np.clip(obs, lo, hi) - lo) / (hi - lo)
        np.testing.assert_allclose(preprocess(obs), np.arcsinh(0.85 * x) / np.arcsinh(0.85), atol=1e-15)

    @pytest.mark.parametrize("cfg", [PreprocessConfig(low=50, high=10), PreprocessConfig(c=0.0)])
    def test_invalid_config(self, cfg, rng):
        with pytest.raises(ValidationError):
            preprocess(rng.normal(size=(3, 20, 20)), cfg)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotone(self, seed):
        obs = np.random.default_rng(seed).standard_cauchy(size=(3, 20, 20))
        out = preprocess(obs)
        order = np.argsort(obs, axis=None, kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= 0)
        assert 0 <= out.min() and out.max() <= 1


class TestAugment:
    def test_five_outputs_in_order(self, rng):
        img = rng.normal(size=(3, 8, 8))
        o, h, v, r90, r180 = augment(img)
        np.testing.assert_array_equal(o, img)
        np.testing.assert_array_equal(h, img[:, :, ::-1])
        np.testing.assert_array_equal(v, img[:, ::-1, :])
        np.testing.assert_array_equal(r90, np.rot90(img, 1, axes=(1, 2)))
        np.testing.assert_array_equal(r180, img[:, ::-1, ::-1])

    def test_hflip_involution_and_rot180(self, rng):
        img = rng.normal(size=(3, 8, 8))
        h = augment(img)[1]
        np.testing.assert_array_equal(augment(h)[1], img)
        np.testing.assert_array_equal(augment(img)[4], augment(augment(img)[1])[2])

    def test_symmetric_image(self):
        y, x = np.mgrid[:9, :9]
        img = np.stack([np.hypot(y - 4, x - 4)] * 3)
        outs = augment(img)
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_non_square(self):
        with pytest.raises(ShapeError):
            augment(np.zeros((3, 4, 5)))
