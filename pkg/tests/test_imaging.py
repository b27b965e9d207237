import numpy as np
import pytest

from icetrack import imaging
from icetrack.imaging import (
    LikelihoodSurface,
    SizeError,
    SubImage,
    band_histograms,
    evaluate_likelihood,
    extract_window,
    match,
    match_histograms,
    preprocess,
    subpixel_peak,
    whitened_intensity,
)

from conftest import brute_force_ssd, parabola_surface


def _sub(arr, anchor=(0, 0)):
    return SubImage(np.asarray(arr, dtype=float), anchor)


class TestMatch:
    def test_zero_padded_embedding_recovers_offset(self):
        rng = np.random.default_rng(0)
        ref = rng.uniform(1, 2, (7, 7))
        test = np.zeros((15, 15))
        test[4:11, 6:13] = ref
        surf = match(_sub(ref), _sub(test), sigma_ell=0.25, sigma_m=0.0)
        i, j = np.unravel_index(np.argmin(surf.log_ssd), surf.shape)
        assert (i, j) == (4, 6)
        assert surf.log_ssd[i, j] == 0.0

    def test_window_geometry_15_in_25(self):
        ref = _sub(np.zeros((15, 15)))
        test = _sub(np.ones((25, 25)))
        surf = match(ref, test, 0.25, 0.0)
        assert surf.shape == (11, 11)
        assert np.array_equal(surf.offset_origin, [-5.0, -5.0])
        du, dv = surf.offsets()
        assert du[0] == -5 and du[-1] == 5 and dv[0] == -5 and dv[-1] == 5

    def test_random_embedding_matches_brute_force(self):
        rng = np.random.default_rng(1)
        ref = rng.normal(size=(15, 15))
        test = rng.normal(size=(25, 25))
        # plant the reference at centered offset (du, dv) = (3, -2)
        test[3:18, 8:23] = ref
        surf = match(_sub(ref), _sub(test), 0.25, 0.0)
        lik = surf.likelihood()
        i, j = np.unravel_index(np.argmax(lik), lik.shape)
        assert (surf.offset_origin + [j, i]).tolist() == [3.0, -2.0]
        assert np.allclose(surf.log_ssd, brute_force_ssd(ref.copy(), test), rtol=1e-12, atol=0)

    def test_integer_inputs_match_brute_force_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            mr, nr = rng.integers(2, 20, 2)
            mt = mr + rng.integers(1, 12)
            nt = nr + rng.integers(1, 12)
            ref = rng.integers(0, 256, (mr, nr)).astype(float)
            test = rng.integers(0, 256, (mt, nt)).astype(float)
            surf = match(_sub(ref), _sub(test), 0.25, 0.0)
            assert np.array_equal(surf.log_ssd, brute_force_ssd(ref, test))

    def test_reference_must_fit_strictly(self):
        with pytest.raises(SizeError):
            match(_sub(np.zeros((5, 5))), _sub(np.zeros((5, 9))), 0.25, 0)
        with pytest.raises(SizeError):
            match(_sub(np.zeros((5, 5))), _sub(np.zeros((4, 9))), 0.25, 0)

    def test_multiple_minima_are_preserved(self):
        ref = np.ones((3, 3))
        test = np.zeros((9, 9))
        test[0:3, 0:3] = 1.0
        test[6:9, 6:9] = 1.0
        surf = match(_sub(ref), _sub(test), 0.25, 0)
        zeros = np.argwhere(surf.log_ssd == 0.0)
        assert len(zeros) == 2  # both hypotheses survive; no peak selection here

    def test_sigma_m_flattens_likelihood_ratios(self):
        surf_lo = parabola_surface((1.0, 0.5), sigma_ell=0.25, sigma_m=0.0)
        ratios = []
        for sigma_m in (0.0, 1.0, 2.0, 5.0):
            s = LikelihoodSurface(surf_lo.log_ssd, surf_lo.offset_origin, 0.25, sigma_m)
            la = evaluate_likelihood(s, np.array([1.0, 0.5]))
            lb = evaluate_likelihood(s, np.array([-3.0, 2.0]))
            ratios.append(la / lb)
        assert all(r >= 1 for r in ratios)
        assert ratios == sorted(ratios, reverse=True)  # monotonically toward 1


class TestSubpixelPeak:
    def test_node_centered_symmetric_peak(self):
        surf = parabola_surface((2.0, -1.0))
        offset, on_boundary = subpixel_peak(surf)
        assert not on_boundary
        assert np.allclose(offset, [2.0, -1.0], atol=1e-12)

    def test_exact_for_quadratics(self):
        du = np.arange(-5, 6, dtype=float)
        gu, gv = np.meshgrid(du, du)
        ssd = 2.0 * (gu - 1.25) ** 2 + 1.5 * (gv + 0.5) ** 2 + 0.7 * (gu - 1.25) * (gv + 0.5) + 3.0
        ssd -= ssd.min() - 1e-9
        surf = LikelihoodSurface(ssd, [-5, -5], 0.25, 0.0)
        offset, on_boundary = subpixel_peak(surf)
        assert not on_boundary
        assert np.allclose(offset, [1.25, -0.5], atol=1e-9)

    def test_gaussian_peak_within_tenth_pixel(self):
        du = np.arange(-5, 6, dtype=float)
        gu, gv = np.meshgrid(du, du)
        lik = np.exp(-((gu - 0.3) ** 2 + (gv - 0.4) ** 2) / (2 * 1.5 ** 2))
        ssd = -0.0625 * np.log(lik)  # invert the likelihood map at sigma_ell=0.25
        surf = LikelihoodSurface(ssd - ssd.min(), [-5, -5], 0.25, 0.0)
        offset, on_boundary = subpixel_peak(surf)
        # dense-grid oracle: argmax of the analytic Gaussian
        fine = np.linspace(-5, 5, 2001)
        fu, fv = np.meshgrid(fine, fine)
        dense = np.exp(-((fu - 0.3) ** 2 + (fv - 0.4) ** 2) / (2 * 1.5 ** 2))
        k = np.unravel_index(np.argmax(dense), dense.shape)
        oracle = np.array([fu[k], fv[k]])
        assert not on_boundary
        assert np.linalg.norm(offset - oracle) < 0.1

    def test_boundary_peak_flagged(self):
        surf = parabola_surface((5.0, 0.0))  # discrete minimum on the edge
        offset, on_boundary = subpixel_peak(surf)
        assert on_boundary
        assert np.allclose(offset, [5.0, 0.0])


class TestEvaluateLikelihood:
    def test_node_values_exact(self):
        surf = parabola_surface((1.0, -2.0))
        lik = surf.likelihood()
        assert evaluate_likelihood(surf, np.array([1.0, -2.0])) == pytest.approx(lik[3, 6], rel=0, abs=0)
        assert evaluate_likelihood(surf, np.array([-5.0, -5.0])) == lik[0, 0]

    def test_outside_window_returns_boundary_floor(self):
        surf = parabola_surface((0.0, 0.0))
        floor = surf.boundary_floor()
        assert evaluate_likelihood(surf, np.array([7.0, 0.0])) == floor
        assert evaluate_likelihood(surf, np.array([0.0, -5.001])) == floor
        assert evaluate_likelihood(surf, np.array([np.nan, 0.0])) == floor

    def test_midpoint_is_arithmetic_mean(self):
        surf = parabola_surface((0.0, 0.0))
        lik = surf.likelihood()
        mid = evaluate_likelihood(surf, np.array([0.5, 0.0]))
        assert mid == pytest.approx(0.5 * (lik[5, 5] + lik[5, 6]), rel=1e-14)

    def test_vectorized_shapes(self):
        surf = parabola_surface((0.0, 0.0))
        offs = np.zeros((4, 3, 2))
        out = evaluate_likelihood(surf, offs)
        assert out.shape == (4, 3)
        assert np.allclose(out, surf.likelihood()[5, 5])


class TestPreprocess:
    def test_histogram_self_match_is_identity(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (30, 30, 3)).astype(float)
        hist = band_histograms(img)
        out = match_histograms(img, hist)
        assert np.allclose(out, img, atol=1e-9)

    def test_histogram_matching_brings_cdfs_together(self):
        rng = np.random.default_rng(4)
        ref = rng.integers(50, 200, (40, 40, 3)).astype(float)
        # test image: gain/bias distorted version
        test = np.clip(ref * 1.3 - 20 + rng.normal(0, 2, ref.shape), 0, 255)
        matched = match_histograms(test, band_histograms(ref))
        for b in range(3):
            assert abs(matched[..., b].mean() - ref[..., b].mean()) < 3.0

    def test_constant_patch_flagged_degenerate(self):
        img = np.full((21, 21, 3), 128.0)
        sub = preprocess(img, anchor=(10, 10))
        assert sub.low_information
        assert np.all(sub.pixels == 0.0)

    def test_whitened_intensity_normalization_contract(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 255, (25, 25, 3))
        z, degenerate = whitened_intensity(img)
        assert not degenerate
        assert abs(z.mean()) < 1e-6
        assert z.var() == pytest.approx(1.0, abs=1e-6)

    def test_brightness_shift_barely_changes_ssd(self):
        rng = np.random.default_rng(6)
        base = rng.uniform(60, 190, (25, 25, 3))
        ref_patch = base[5:20, 5:20]
        ref = preprocess(ref_patch, anchor=(12, 12))
        test_a = preprocess(base, anchor=(12, 12))
        test_b = preprocess(base + 20.0, anchor=(12, 12))  # global brightness shift
        sa = match(ref, test_a, 0.25, 0)
        sb = match(ref, test_b, 0.25, 0)
        scale = max(sa.log_ssd.max(), 1e-12)
        assert np.max(np.abs(sa.log_ssd - sb.log_ssd)) / scale < 0.01

    def test_preprocess_pipeline_output_shape_and_anchor(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 255, (25, 25, 3))
        sub = preprocess(img, anchor=(100, 200))
        assert sub.size == (25, 25)
        assert sub.anchor.tolist() == [100, 200]
        assert not sub.low_information


class TestExtractWindow:
    def test_inside_and_outside(self):
        img = np.arange(100).reshape(10, 10)
        win = extract_window(img, (5, 5), 5)
        assert win.shape == (5, 5)
        assert win[2, 2] == img[5, 5]  # (u, v) = (col, row)
        assert extract_window(img, (1, 5), 5) is None
        assert extract_window(img, (5, 9), 5) is None

    def test_window_is_copy(self):
        img = np.zeros((10, 10))
        win = extract_window(img, (5, 5), 3)
        win[:] = 1.0
        assert img.sum() == 0.0
