"""Tests for mask handling, pulse generation, and the constrained filter design."""

import itertools

import numpy as np
import pytest
from scipy.optimize import nnls

from skirtlink import spectral as sp


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def dft_response(coeffs, freqs):
    """Direct DFT evaluation of an FIR response, no vectorization tricks."""
    coeffs = np.asarray(coeffs)
    out = np.empty(len(freqs), dtype=complex)
    for i, f in enumerate(freqs):
        acc = 0.0 + 0.0j
        for n, h in enumerate(coeffs):
            acc += h * np.exp(-2j * np.pi * f * n)
        out[i] = acc
    return out


def qp_objective(P, q, x):
    return 0.5 * x @ P @ x + q @ x


def enumerate_qp(P, q, G, g):
    """Active-set enumeration oracle for min 0.5x'Px+q'x s.t. Gx <= g.

    Tries every subset of constraints as equalities, solves the KKT system,
    keeps candidates that are primal feasible with non-negative multipliers,
    and returns the best.  Exponential, therefore only for small instances.
    """
    n = q.size
    m = G.shape[0]
    best_x, best_obj = None, np.inf
    for r in range(0, min(m, n) + 1):
        for subset in itertools.combinations(range(m), r):
            idx = list(subset)
            Ga = G[idx]
            kkt = np.block([[P, Ga.T], [Ga, np.zeros((r, r))]])
            rhs = np.concatenate([-q, g[idx]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if r and lam.min() < -1e-9:
                continue
            if m and (G @ x - g).max() > 1e-9:
                continue
            obj = qp_objective(P, q, x)
            if obj < best_obj - 1e-12:
                best_obj, best_x = obj, x
    return best_x, best_obj


def random_qp_instance(rng, n, m):
    """Random strictly feasible convex QP with one-sided constraints."""
    B = rng.standard_normal((n, n))
    P = B @ B.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    G = rng.standard_normal((m, n))
    x0 = rng.standard_normal(n) * 0.3
    g = G @ x0 + rng.uniform(0.1, 1.0, size=m)  # x0 strictly feasible
    return P, q, G, g


def design_objective(mask, weights, V, h_half):
    d = mask.level_linear(mask.grid_freqs())
    return float(np.sum(weights.weights * (d - V @ h_half) ** 2))


def design_constraint_rows(mask, m_half):
    """Constraint matrix and envelope used by the design: grid plus corners."""
    K = mask.grid_size
    V = sp.cosine_basis(2 * (K - 1), m_half)[:K]
    fc = mask.corner_freqs
    Vc = np.hstack([np.ones((fc.size, 1)),
                    2.0 * np.cos(2.0 * np.pi * fc[:, None]
                                 * np.arange(1, m_half + 1)[None, :])])
    A = np.vstack([V, Vc])
    b = np.concatenate([mask.level_linear(mask.grid_freqs()),
                        mask.level_linear(fc)])
    return V, A, b


def brute_force_small_design(mask, weights, num_taps, span=0.8, step=0.04):
    """Grid search over the free half-taps refined by projected gradient."""
    m_half = (num_taps - 1) // 2
    V, A, b = design_constraint_rows(mask, m_half)
    d = mask.level_linear(mask.grid_freqs())
    w = weights.weights

    def feasible(h):
        return np.all(np.abs(A @ h) <= b + 1e-12)

    def obj(h):
        return np.sum(w * (d - V @ h) ** 2)

    grid = np.arange(-span, span + step / 2, step)
    best, best_val = None, np.inf
    for h in itertools.product(grid, repeat=m_half + 1):
        h = np.array(h)
        if not feasible(h):
            continue
        v = obj(h)
        if v < best_val:
            best_val, best = v, h

    # projected gradient refinement from the best grid point
    h = best.copy()
    P = 2 * V.T @ (w[:, None] * V)
    qv = -2 * V.T @ (w * d)
    lip = np.linalg.eigvalsh(P)[-1]
    for _ in range(20000):
        h = h - (1.0 / lip) * (P @ h + qv)
        for _ in range(50):  # cyclic projection onto the violated slabs
            resp = A @ h
            over = np.abs(resp) - b
            j = np.argmax(over)
            if over[j] <= 1e-12:
                break
            a = A[j]
            target = np.sign(resp[j]) * b[j]
            h = h - ((resp[j] - target) / (a @ a)) * a
    return h, obj(h)


# ---------------------------------------------------------------------------
# SpectralMask / seven_segment_mask
# ---------------------------------------------------------------------------

class TestSevenSegmentMask:
    def test_default_mask_valid(self):
        mask = sp.seven_segment_mask()
        assert mask.grid_size == 1000
        assert mask.corner_freqs[0] == 0.11
        assert mask.corner_freqs[-1] == 0.5
        assert len(mask.corner_freqs) == 7

    def test_level_at_carrier_is_zero(self):
        mask = sp.seven_segment_mask()
        assert mask.level_db(0.0)[0] == 0.0

    def test_skirt_spans_minus32_to_minus60(self):
        """The skirt region runs from -32 dB at its inner edge to -60 dB at 0.5."""
        mask = sp.seven_segment_mask()
        skirt = np.linspace(0.15, 0.5, 400)
        levels = mask.level_db(skirt)
        assert levels.max() == pytest.approx(-32.0)
        assert levels.min() == pytest.approx(-60.0)
        assert mask.level_db(0.5)[0] == pytest.approx(-60.0)

    def test_monotone_non_increasing(self):
        mask = sp.seven_segment_mask()
        lv = mask.level_db(np.linspace(0, 0.5, 2000))
        assert np.all(np.diff(lv) <= 1e-12)

    def test_rejects_non_monotone_corners(self):
        with pytest.raises(ValueError, match="increasing"):
            sp.seven_segment_mask([0.2, 0.1], [0.0, -10.0], 100)

    def test_rejects_corner_outside_band(self):
        with pytest.raises(ValueError):
            sp.seven_segment_mask([0.2, 0.7], [0.0, -10.0], 100)

    def test_json_round_trip(self, tmp_path):
        mask = sp.seven_segment_mask()
        path = tmp_path / "mask.json"
        import json
        path.write_text(json.dumps(mask.to_dict()))
        loaded = sp.mask_from_json(path)
        assert np.array_equal(loaded.corner_freqs, mask.corner_freqs)
        assert np.array_equal(loaded.levels_db, mask.levels_db)


# ---------------------------------------------------------------------------
# rrc_taps / truncated_rrc_taps
# ---------------------------------------------------------------------------

class TestRrcTaps:
    def test_symmetry_and_unit_energy(self):
        taps = sp.rrc_taps(0.15, 32, 4)
        assert taps.symmetric
        assert len(taps) == 32 * 4 + 1
        assert np.array_equal(taps.coeffs, taps.coeffs[::-1])
        assert taps.energy() == pytest.approx(1.0, abs=1e-12)

    def test_center_tap_is_peak(self):
        taps = sp.rrc_taps(0.15, 32, 4)
        assert np.argmax(taps.coeffs) == (len(taps) - 1) // 2

    def test_nyquist_self_convolution(self):
        """Matched cascade sampled at symbol spacing must be a Kronecker delta.

        Span 64 keeps the truncation tails below the 1e-3 check level; the
        shorter span-32 pulse carries about 2e-3 of residual ISI.
        """
        taps = sp.rrc_taps(0.15, 64, 4)
        cascade = np.convolve(taps.coeffs, taps.coeffs[::-1])
        center = len(cascade) // 2
        sym_spaced = cascade[center % 4::4]
        peak = np.argmax(np.abs(sym_spaced))
        assert sym_spaced[peak] == pytest.approx(1.0, abs=1e-3)
        off = np.delete(sym_spaced, peak)
        assert np.max(np.abs(off)) < 1e-3

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError, match="beta"):
            sp.rrc_taps(0.0, 32, 4)
        with pytest.raises(ValueError, match="beta"):
            sp.rrc_taps(1.5, 32, 4)

    def test_singular_time_points_finite(self):
        # beta=0.25, sps=1 puts samples exactly at t = 1/(4 beta)
        taps = sp.rrc_taps(0.25, 8, 1)
        assert np.all(np.isfinite(taps.coeffs))


class TestTruncatedRrcTaps:
    def test_full_span_matches_rrc(self):
        full = sp.rrc_taps(0.15, 32, 2)
        trunc = sp.truncated_rrc_taps(0.15, len(full), 2)
        assert np.allclose(trunc.coeffs, full.coeffs, atol=1e-15)

    def test_sixteen_tap_reference(self):
        taps = sp.truncated_rrc_taps(0.15, 16, 2)
        assert len(taps) == 16
        assert taps.energy() == pytest.approx(1.0, abs=1e-12)

    def test_truncation_breaks_nyquist(self):
        """Short truncation must leave symbol-spaced ISI above 1e-2."""
        taps = sp.truncated_rrc_taps(0.15, 16, 2)
        cascade = np.convolve(taps.coeffs, taps.coeffs[::-1])
        peak = np.argmax(np.abs(cascade))
        sym_spaced = cascade[peak % 2::2]
        p = np.argmax(np.abs(sym_spaced))
        off = np.delete(sym_spaced, p)
        assert np.max(np.abs(off)) > 1e-2

    def test_rejects_oversized_request(self):
        with pytest.raises(ValueError, match="exceeds"):
            sp.truncated_rrc_taps(0.15, 200, 2)


# ---------------------------------------------------------------------------
# cosine_basis
# ---------------------------------------------------------------------------

class TestCosineBasis:
    def test_first_row_all_twos(self):
        V = sp.cosine_basis(16, 5)
        assert np.allclose(V[0], [1, 2, 2, 2, 2, 2])

    def test_single_column_of_ones(self):
        V = sp.cosine_basis(8, 0)
        assert V.shape == (8, 1)
        assert np.allclose(V, 1.0)

    def test_matches_dft_of_symmetric_expansion(self):
        """V @ h_half equals the zero-phase DFT of the mirrored full filter."""
        rng = np.random.default_rng(7)
        K, m_half = 64, 6
        h_half = rng.standard_normal(m_half + 1)
        full = np.concatenate([h_half[:0:-1], h_half])
        V = sp.cosine_basis(K, m_half)
        freqs = np.arange(K) / K
        # zero phase: undo the linear phase of the causal index convention
        resp = dft_response(full, freqs) * np.exp(2j * np.pi * freqs * m_half)
        assert np.max(np.abs(V @ h_half - resp.real)) < 1e-10
        assert np.max(np.abs(resp.imag)) < 1e-10

    def test_rejects_short_grid(self):
        with pytest.raises(ValueError):
            sp.cosine_basis(3, 5)


# ---------------------------------------------------------------------------
# solve_constrained_qp
# ---------------------------------------------------------------------------

class TestSolveConstrainedQp:
    def test_unconstrained_normal_equations(self):
        x = sp.solve_constrained_qp(np.eye(3), np.array([-2.0, 0, 0]))
        assert np.allclose(x, [2, 0, 0], atol=1e-9)

    def test_scalar_clamp(self):
        # minimize (x-2)^2 subject to x <= 1
        x = sp.solve_constrained_qp(np.array([[2.0]]), np.array([-4.0]),
                                    A=np.array([[1.0]]), upper=np.array([1.0]))
        assert x[0] == pytest.approx(1.0, abs=1e-9)

    def test_matches_enumeration_oracle_4d(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            P, q, G, g = random_qp_instance(rng, 4, 6)
            x = sp.solve_constrained_qp(P, q, A=G, upper=g)
            x_ref, obj_ref = enumerate_qp(P, q, G, g)
            assert obj_ref < np.inf
            assert qp_objective(P, q, x) == pytest.approx(obj_ref, abs=1e-6)

    def test_two_sided_bounds(self):
        rng = np.random.default_rng(3)
        P, q, G, g = random_qp_instance(rng, 3, 4)
        lo = g - rng.uniform(1.0, 3.0, size=4)
        x = sp.solve_constrained_qp(P, q, A=G, lower=lo, upper=g)
        v = G @ x
        assert np.all(v <= g + 1e-9)
        assert np.all(v >= lo - 1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        P, q, G, g = random_qp_instance(rng, 5, 8)
        x1 = sp.solve_constrained_qp(P, q, A=G, upper=g)
        x2 = sp.solve_constrained_qp(P, q, A=G, upper=g)
        assert np.array_equal(x1, x2)

    def test_rejects_indefinite(self):
        P = np.diag([1.0, -1.0])
        with pytest.raises(ValueError, match="semidefinite"):
            sp.solve_constrained_qp(P, np.zeros(2))

    def test_rejects_crossed_bounds(self):
        with pytest.raises(ValueError, match="bound"):
            sp.solve_constrained_qp(np.eye(2), np.zeros(2),
                                    A=np.eye(2), lower=np.ones(2),
                                    upper=np.zeros(2))


# ---------------------------------------------------------------------------
# design_ssf
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_design():
    mask = sp.seven_segment_mask()
    return mask, sp.design_ssf(mask, num_taps=257)


class TestDesignSsf:
    def test_symmetric_odd_output(self, default_design):
        _, taps = default_design
        assert len(taps) == 257
        assert taps.symmetric
        assert np.array_equal(taps.coeffs, taps.coeffs[::-1])

    def test_mask_feasible_on_design_grid(self, default_design):
        mask, taps = default_design
        K = mask.grid_size
        V = sp.cosine_basis(2 * (K - 1), 128)[:K]
        resp = V @ taps.coeffs[128:]
        d = mask.level_linear(mask.grid_freqs())
        assert np.max(np.abs(resp) - d) <= 1e-9

    def test_response_hugs_mask(self, default_design):
        """Main lobe and skirt sit close below the mask.

        Guard bands around the band-edge transition (a response null lives
        there) and around the 0.39 corner are excluded; elsewhere the fit
        stays within 1 dB of the envelope.
        """
        mask, taps = default_design
        f = mask.grid_freqs()
        K = mask.grid_size
        V = sp.cosine_basis(2 * (K - 1), 128)[:K]
        resp_db = 20 * np.log10(np.maximum(np.abs(V @ taps.coeffs[128:]), 1e-15))
        fit = resp_db - mask.level_db(f)
        assert np.all(fit <= 1e-4)
        main = f <= 0.11
        skirt = ((f >= 0.17) & (f <= 0.38)) | (f >= 0.40)
        assert fit[main].min() > -1.0
        assert fit[skirt].min() > -1.0

    def test_flat_mask_degenerate_case(self):
        """Flat 0 dB mask: LS fit clipped at 1 where it would overshoot."""
        mask = sp.SpectralMask(np.array([0.5]), np.array([0.0]), 64)
        w = sp.DesignWeights(np.ones(64))
        taps = sp.design_ssf(mask, w, num_taps=3)
        K = 64
        V = sp.cosine_basis(2 * (K - 1), 1)[:K]
        resp = V @ taps.coeffs[1:]
        assert np.all(np.abs(resp) <= 1.0 + 1e-9)
        # the flat target is exactly reachable by h = [1, 0]: delta filter
        assert np.allclose(taps.coeffs, [0, 1, 0], atol=1e-6)

    def test_matches_brute_force_small_instance(self):
        """5-tap design against grid search + projected-gradient oracle."""
        rng = np.random.default_rng(11)
        corners = np.sort(rng.uniform(0.05, 0.5, size=3))
        levels = -np.sort(rng.uniform(0.5, 12.0, size=3))
        mask = sp.SpectralMask(corners, levels, 16)
        weights = sp.DesignWeights(rng.uniform(0.5, 2.0, size=16))
        taps = sp.design_ssf(mask, weights, num_taps=5)
        K = 16
        V = sp.cosine_basis(2 * (K - 1), 2)[:K]
        h_ref, obj_ref = brute_force_small_design(mask, weights, 5)
        obj_qp = design_objective(mask, weights, V, taps.coeffs[2:])
        assert obj_qp <= obj_ref + 1e-4
        assert obj_qp == pytest.approx(obj_ref, abs=1e-4)

    def test_rejects_even_tap_count(self):
        mask = sp.seven_segment_mask()
        with pytest.raises(ValueError, match="odd"):
            sp.design_ssf(mask, num_taps=256)

    def test_weight_monotonicity(self):
        """Raising a band's weight cannot worsen that band's squared error."""
        mask = sp.seven_segment_mask(K=200)
        f = mask.grid_freqs()
        base = np.ones(200)
        w1 = sp.DesignWeights(base.copy())
        boosted = base.copy()
        band = (f >= 0.2) & (f <= 0.4)
        boosted[band] *= 100.0
        w2 = sp.DesignWeights(boosted)
        d = mask.level_linear(f)
        V = sp.cosine_basis(2 * 199, 16)[:200]
        t1 = sp.design_ssf(mask, w1, num_taps=33)
        t2 = sp.design_ssf(mask, w2, num_taps=33)
        sse1 = np.sum((d - V @ t1.coeffs[16:])[band] ** 2)
        sse2 = np.sum((d - V @ t2.coeffs[16:])[band] ** 2)
        assert sse2 <= sse1 + 1e-12

    def test_kkt_certificate(self, default_design):
        """Gradient at the optimum lies in the cone of active constraint normals."""
        mask, taps = default_design
        V, A, b = design_constraint_rows(mask, 128)
        w = sp.default_design_weights(mask).weights
        d = mask.level_linear(mask.grid_freqs())
        h = taps.coeffs[128:]
        P = 2 * V.T @ (w[:, None] * V)
        qv = -2 * V.T @ (w * d)
        grad = P @ h + qv
        resp = A @ h
        scale = max(np.abs(grad).max(), 1.0)
        act_hi = b - resp < 1e-7 * np.maximum(b, 1e-9)
        act_lo = resp + b < 1e-7 * np.maximum(b, 1e-9)
        normals = np.vstack([A[act_hi], -A[act_lo]])
        if normals.size:
            _, resid = nnls(normals.T, -grad, maxiter=10 * normals.shape[0] + 1000)
            assert resid / scale < 1e-6
        else:
            assert np.abs(grad).max() / scale < 1e-8


# ---------------------------------------------------------------------------
# freq_response_db
# ---------------------------------------------------------------------------

class TestFreqResponseDb:
    def test_delta_filter_flat(self):
        taps = sp.FilterTaps(np.array([1.0]), 1)
        db = sp.freq_response_db(taps, np.linspace(0, 0.5, 16))
        assert np.allclose(db, 0.0, atol=1e-12)

    def test_two_tap_null_hits_floor(self):
        taps = sp.FilterTaps(np.array([0.5, 0.5]), 1)
        db = sp.freq_response_db(taps, [0.5])
        assert db[0] == -300.0

    def test_matches_dft_oracle(self, default_design):
        _, taps = default_design
        freqs = np.linspace(0, 0.5, 101)
        got = sp.freq_response_db(taps, freqs)
        ref_mag = np.abs(dft_response(taps.coeffs, freqs))
        ref0 = np.abs(dft_response(taps.coeffs, [0.0]))[0]
        ref_db = np.maximum(20 * np.log10(ref_mag / ref0), -300.0)
        assert np.max(np.abs(got - ref_db)) < 1e-9

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="empty"):
            sp.freq_response_db(np.array([]), [0.1])


# ---------------------------------------------------------------------------
# tap CSV round trip
# ---------------------------------------------------------------------------

class TestTapsCsv:
    def test_round_trip_exact(self, tmp_path, default_design):
        _, taps = default_design
        path = tmp_path / "taps.csv"
        sp.save_taps_csv(taps, path)
        loaded = sp.load_taps_csv(path, sps=2)
        assert np.array_equal(loaded.coeffs, taps.coeffs)
        assert loaded.symmetric
