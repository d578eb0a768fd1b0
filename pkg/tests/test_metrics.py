"""Tests for error counting, LLRs, rate measurement, and calibration."""

import math

import numpy as np
import pytest

from skirtlink import link
from skirtlink import metrics as mt
from skirtlink import spectral as sp


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def brute_force_llrs(r, constellation, sigma2):
    """Two-sum LLR over the full constellation, stabilized by max-shift."""
    d2 = -np.abs(r - constellation.points) ** 2 / sigma2
    m = constellation.bits_per_symbol
    out = np.empty(m)
    for i in range(m):
        one = d2[constellation.labels[:, i] == 1]
        zero = d2[constellation.labels[:, i] == 0]

        def lse(v):
            mx = np.max(v)
            return mx + math.log(np.sum(np.exp(v - mx)))

        out[i] = lse(one) - lse(zero)
    return out


def histogram_mi(r, bits, extent, n_bins=50):
    """Plug-in estimate of the summed per-bit mutual information.

    Bins the received samples on a 2-D grid and accumulates
    H(b_i) - H(b_i | bin) from empirical frequencies.
    """
    edges = np.linspace(-extent, extent, n_bins + 1)
    ix = np.clip(np.digitize(r.real, edges) - 1, 0, n_bins - 1)
    iy = np.clip(np.digitize(r.imag, edges) - 1, 0, n_bins - 1)
    cell = ix * n_bins + iy
    n, m = bits.shape
    total = 0.0

    def h2(p):
        if p <= 0.0 or p >= 1.0:
            return 0.0
        return -p * math.log2(p) - (1 - p) * math.log2(1 - p)

    order = np.argsort(cell, kind="stable")
    sorted_cells = cell[order]
    boundaries = np.flatnonzero(np.diff(sorted_cells)) + 1
    groups = np.split(order, boundaries)
    for i in range(m):
        p_marg = float(np.mean(bits[:, i]))
        cond = 0.0
        for g in groups:
            p = float(np.mean(bits[g, i]))
            cond += (g.size / n) * h2(p)
        total += h2(p_marg) - cond
    return total


# ---------------------------------------------------------------------------
# ser
# ---------------------------------------------------------------------------

class TestSer:
    def test_identical(self):
        assert mt.ser(np.arange(100), np.arange(100)) == 0.0

    def test_single_error(self):
        truth = np.arange(100)
        dec = truth.copy()
        dec[17] += 1
        assert mt.ser(dec, truth) == pytest.approx(0.01)

    def test_scrambled_near_uniform(self):
        rng = np.random.default_rng(0)
        M = 16
        truth = rng.integers(0, M, 10 ** 5)
        dec = rng.integers(0, M, 10 ** 5)
        assert mt.ser(dec, truth) == pytest.approx(1 - 1 / M, abs=0.01)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mt.ser(np.arange(5), np.arange(6))
        with pytest.raises(ValueError):
            mt.ser(np.array([]), np.array([]))


# ---------------------------------------------------------------------------
# bit_llrs
# ---------------------------------------------------------------------------

class TestBitLlrs:
    def test_matches_brute_force_16qam(self):
        c = link.make_constellation(16)
        rng = np.random.default_rng(1)
        r = rng.normal(size=200) * 0.7 + 1j * rng.normal(size=200) * 0.7
        fast = mt.bit_llrs(r, c, 0.05)
        for k in range(200):
            ref = np.clip(brute_force_llrs(r[k], c, 0.05), -50, 50)
            assert np.max(np.abs(fast[k] - ref)) < 1e-10

    def test_matches_brute_force_64qam(self):
        c = link.make_constellation(64)
        rng = np.random.default_rng(2)
        r = rng.normal(size=50) + 1j * rng.normal(size=50)
        fast = mt.bit_llrs(r, c, 0.2)
        for k in range(50):
            ref = np.clip(brute_force_llrs(r[k], c, 0.2), -50, 50)
            assert np.max(np.abs(fast[k] - ref)) < 1e-10

    def test_all_zero_point_saturates_negative(self):
        c = link.make_constellation(16)
        idx_zero = int(np.flatnonzero((c.labels == 0).all(axis=1))[0])
        llr = mt.bit_llrs(c.points[idx_zero], c, 1e-9)[0]
        assert np.all(llr == -50.0)

    def test_equidistant_bit_is_zero(self):
        c = link.make_constellation(16)
        llr = mt.bit_llrs(0.0 + 0.37j, c, 0.04)[0]
        # the leading in-phase bit splits the constellation left/right
        assert llr[0] == pytest.approx(0.0, abs=1e-12)

    def test_sign_flips_with_nearest_label(self):
        c = link.make_constellation(64)
        rng = np.random.default_rng(3)
        for idx in rng.integers(0, 64, size=10):
            llr = mt.bit_llrs(c.points[idx], c, 1e-8)[0]
            expect = np.where(c.labels[idx] == 1, 50.0, -50.0)
            assert np.array_equal(llr, expect)

    def test_rejects_bad_sigma(self):
        c = link.make_constellation(16)
        with pytest.raises(ValueError):
            mt.bit_llrs(0j, c, 0.0)


# ---------------------------------------------------------------------------
# air
# ---------------------------------------------------------------------------

class TestAir:
    def test_zero_llrs_zero_rate(self):
        llrs = np.zeros((1000, 8))
        bits = np.random.default_rng(4).integers(0, 2, (1000, 8))
        assert mt.air(llrs, bits) == 0.0

    def test_perfect_confidence_reaches_m(self):
        rng = np.random.default_rng(5)
        bits = rng.integers(0, 2, (500, 6))
        llrs = np.where(bits == 1, 50.0, -50.0)
        assert mt.air(llrs, bits) == pytest.approx(6.0, abs=1e-10)

    def test_raw_rate_bounded_by_m(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            llrs = rng.normal(scale=10, size=(200, 4)).clip(-50, 50)
            bits = rng.integers(0, 2, (200, 4))
            assert mt.air(llrs, bits) <= 4.0 + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mt.air(np.zeros((10, 4)), np.zeros((10, 5)))

    def test_matches_histogram_mi(self):
        """AWGN link: the LLR-based rate agrees with a binning MI estimate."""
        c = link.make_constellation(256)
        rng = np.random.default_rng(7)
        n = 10 ** 5
        idx = rng.integers(0, 256, n)
        sigma2 = 10.0 ** (-35 / 10.0)
        noise = rng.normal(0, math.sqrt(sigma2 / 2), (n, 2))
        r = c.points[idx] + noise[:, 0] + 1j * noise[:, 1]
        bits = c.labels[idx]
        rate = mt.air(mt.bit_llrs(r, c, sigma2), bits)
        ref = histogram_mi(r, bits, extent=1.4, n_bins=50)
        assert rate == pytest.approx(ref, abs=0.1)


# ---------------------------------------------------------------------------
# snr calibration
# ---------------------------------------------------------------------------

class TestSnrCalibrate:
    def test_zero_db_unit_variance(self):
        assert mt.snr_calibrate("rrc", 0.0) == 1.0

    def test_ten_db_scales_exactly(self):
        assert mt.snr_calibrate("ssf", 10.0) == pytest.approx(
            mt.snr_calibrate("ssf", 0.0) / 10.0, rel=1e-15)

    def test_rejects_unknown_scheme(self):
        with pytest.raises(ValueError, match="scheme"):
            mt.snr_calibrate("ofdm", 30.0)

    def test_wideband_fills_more_power(self):
        """At a shared noise floor the mask-filled pulse carries more power,
        measured by integrating the scaled responses over frequency."""
        mask = sp.seven_segment_mask()
        ssf = sp.design_ssf(mask, num_taps=257)
        rrc = sp.rrc_taps(0.15, 32, 4)
        a_ssf = sp.mask_fill_scale(ssf, mask, 2)
        a_rrc = sp.mask_fill_scale(rrc, mask, 4)
        f = np.linspace(-0.5, 0.5, 8192, endpoint=False)

        def band_power(taps, alpha, sps):
            h = taps.coeffs
            ks = np.arange(h.size)
            resp = np.array([np.sum(h * np.exp(-2j * np.pi * fi * ks))
                             for fi in f])
            return alpha ** 2 * np.trapezoid(np.abs(resp) ** 2, f) / sps

        p_ssf = band_power(ssf, a_ssf, 2)
        p_rrc = band_power(rrc, a_rrc, 4)
        assert p_ssf > p_rrc
        assert p_ssf / p_rrc == pytest.approx(1.1, abs=0.05)

    def test_symbol_rates(self):
        assert mt.scheme_symbol_rate("rrc") == pytest.approx(25.6e6)
        assert mt.scheme_symbol_rate("ssf") == pytest.approx(51.2e6)
        assert mt.scheme_symbol_rate("rrc-wide") == pytest.approx(51.2e6)


# ---------------------------------------------------------------------------
# intervals, residuals, row formatting
# ---------------------------------------------------------------------------

class TestWilson:
    def test_hand_computed_case(self):
        z = 1.959963984540054
        n, k = 100, 10
        p = 0.1
        denom = 1 + z * z / n
        center = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        lo, hi = mt.wilson_interval(k, n)
        assert lo == pytest.approx(center - half, abs=1e-12)
        assert hi == pytest.approx(center + half, abs=1e-12)
        assert lo < 0.1 < hi

    def test_boundary_counts(self):
        lo, hi = mt.wilson_interval(0, 50)
        assert lo == 0.0
        assert hi > 0
        lo, hi = mt.wilson_interval(50, 50)
        assert hi == 1.0
        assert lo < 1.0

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            mt.wilson_interval(5, 0)
        with pytest.raises(ValueError):
            mt.wilson_interval(-1, 10)


class TestResidualVariance:
    def test_recovers_known_noise(self):
        c = link.make_constellation(64)
        rng = np.random.default_rng(8)
        idx = rng.integers(0, 64, 10 ** 5)
        sigma2 = 1e-4
        noise = rng.normal(0, math.sqrt(sigma2 / 2), (10 ** 5, 2))
        z = c.points[idx] + noise[:, 0] + 1j * noise[:, 1]
        est = mt.residual_variance(z, c)
        assert est == pytest.approx(sigma2, rel=0.05)

    def test_empty_rejected(self):
        c = link.make_constellation(16)
        with pytest.raises(ValueError):
            mt.residual_variance(np.array([]), c)


class TestTrialResult:
    def test_row_shape_matches_header(self):
        t = mt.TrialResult("ssf", 1024, 50.0, 1e-3, 9.5, 9.5 * 51.2, 10 ** 5,
                           42, 8e-4, 1.3e-3)
        assert len(t.to_row()) == len(mt.CSV_HEADER)

    def test_validates_ranges(self):
        with pytest.raises(ValueError):
            mt.TrialResult("ssf", 1024, 50.0, 1.5, 9.5, 486.4, 10, 0)
        with pytest.raises(ValueError):
            mt.TrialResult("ssf", 1024, 50.0, 0.5, 11.0, 563.2, 10, 0)
