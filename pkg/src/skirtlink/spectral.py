"""Spectral masks, RRC pulses, and mask-constrained transmit filter design.

The transmit filter is a long, even-symmetric FIR whose magnitude response is
fitted to a piecewise-linear (in dB) spectral mask by a weighted least-squares
criterion with a hard "stay at or below the mask" constraint.  Because the
filter is symmetric, its frequency response is real and the absolute-value
constraint splits into two linear inequalities, so the whole design is a
convex QP over the half-tap vector.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

DB_FLOOR = -300.0


@dataclass
class SpectralMask:
    """Piecewise-linear (in dB) one-sided PSD envelope on [0, 0.5] cycles/sample.

    Levels are relative to the carrier-frequency level, so level(0) = 0 dB.
    """

    corner_freqs: np.ndarray
    levels_db: np.ndarray
    grid_size: int

    def __post_init__(self):
        self.corner_freqs = np.asarray(self.corner_freqs, dtype=float)
        self.levels_db = np.asarray(self.levels_db, dtype=float)
        if self.corner_freqs.ndim != 1 or self.corner_freqs.size == 0:
            raise ValueError("corner_freqs must be a non-empty 1-D sequence")
        if self.corner_freqs.size != self.levels_db.size:
            raise ValueError("corner_freqs and levels_db lengths differ")
        if np.any(np.diff(self.corner_freqs) <= 0):
            raise ValueError("corner_freqs must be strictly increasing")
        if self.corner_freqs[0] <= 0 or self.corner_freqs[-1] > 0.5 + 1e-15:
            raise ValueError("corners must lie in (0, 0.5]")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")

    def level_db(self, freqs) -> np.ndarray:
        """Interpolated mask level in dB at arbitrary frequencies in [0, 0.5]."""
        f = np.atleast_1d(np.asarray(freqs, dtype=float))
        xp = np.concatenate(([0.0], self.corner_freqs))
        yp = np.concatenate(([0.0], self.levels_db))
        return np.interp(f, xp, yp)

    def level_linear(self, freqs) -> np.ndarray:
        return 10.0 ** (self.level_db(freqs) / 20.0)

    def grid_freqs(self) -> np.ndarray:
        return np.linspace(0.0, 0.5, self.grid_size)

    def grid_levels_db(self) -> np.ndarray:
        return self.level_db(self.grid_freqs())

    def to_dict(self) -> dict:
        return {
            "corners": [float(c) for c in self.corner_freqs],
            "levels_db": [float(v) for v in self.levels_db],
        }


@dataclass
class FilterTaps:
    """FIR coefficients tagged with the oversampling factor they apply at."""

    coeffs: np.ndarray
    samples_per_symbol: float
    symmetric: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.ndim != 1 or self.coeffs.size == 0:
            raise ValueError("coeffs must be a non-empty 1-D sequence")
        if self.samples_per_symbol <= 0:
            raise ValueError("samples_per_symbol must be positive")
        if self.symmetric and not np.array_equal(self.coeffs, self.coeffs[::-1]):
            raise ValueError("taps marked symmetric but coeffs are not mirror-equal")

    def __len__(self) -> int:
        return self.coeffs.size

    def energy(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))


@dataclass
class DesignWeights:
    """Non-negative per-grid-point weights for the design objective."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")


# Default seven-segment mask.  Corner frequencies are the published values for
# the 102.4 MHz design bandwidth; the per-corner levels reproduce the stated
# shape: flat main lobe, a steep roll, and a skirt running from -32 dB down to
# -60 dB at the band edge.  Override via JSON for other regulatory templates.
SEVEN_SEGMENT_CORNERS = (0.11, 0.14, 0.15, 0.16, 0.39, 0.46, 0.5)
SEVEN_SEGMENT_LEVELS_DB = (0.0, -1.0, -32.0, -32.0, -32.0, -50.0, -60.0)

# w^(1/2) per band of the design objective: main lobe / inner skirt / outer skirt.
DESIGN_WEIGHT_SQRT = (1.0, 10.0, 1000.0)
DESIGN_WEIGHT_BAND_EDGES = (0.16, 0.39)


def seven_segment_mask(corner_freqs=SEVEN_SEGMENT_CORNERS,
                       levels_db=SEVEN_SEGMENT_LEVELS_DB,
                       K: int = 1000) -> SpectralMask:
    """Build the seven-segment PSD mask with a K-point evaluation grid."""
    return SpectralMask(np.asarray(corner_freqs), np.asarray(levels_db), K)


def mask_from_json(source) -> SpectralMask:
    """Load a mask from a JSON file path or parsed dict: {"corners", "levels_db"}."""
    if isinstance(source, dict):
        doc = source
    else:
        with open(source) as fh:
            doc = json.load(fh)
    K = int(doc.get("grid_size", 1000))
    return seven_segment_mask(doc["corners"], doc["levels_db"], K)


def default_design_weights(mask: SpectralMask) -> DesignWeights:
    """Piecewise-constant weights on the mask grid: w^(1/2) = 1 / 10 / 1000."""
    f = mask.grid_freqs()
    w_sqrt = np.full(f.size, DESIGN_WEIGHT_SQRT[0])
    w_sqrt[f >= DESIGN_WEIGHT_BAND_EDGES[0]] = DESIGN_WEIGHT_SQRT[1]
    w_sqrt[f >= DESIGN_WEIGHT_BAND_EDGES[1]] = DESIGN_WEIGHT_SQRT[2]
    return DesignWeights(w_sqrt ** 2)


def rrc_taps(beta: float, span_symbols: int, sps: int) -> FilterTaps:
    """Root-raised-cosine pulse, unit energy, odd length span*sps + 1."""
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    if span_symbols % 2 != 0:
        raise ValueError("span_symbols must be even")
    if sps < 1:
        raise ValueError("sps must be >= 1")
    n = span_symbols * sps + 1
    h = np.empty(n)
    for i in range(n):
        t = (i - (n - 1) / 2) / sps
        h[i] = _rrc_point(t, beta)
    # enforce exact mirror symmetry despite accumulated rounding
    h = 0.5 * (h + h[::-1])
    h /= np.linalg.norm(h)
    return FilterTaps(h, sps, symmetric=True)


def _rrc_point(t: float, beta: float) -> float:
    if math.isclose(t, 0.0, abs_tol=1e-12):
        return 1.0 - beta + 4.0 * beta / math.pi
    if math.isclose(abs(t), 1.0 / (4.0 * beta), rel_tol=1e-12):
        return (beta / math.sqrt(2.0)) * (
            (1.0 + 2.0 / math.pi) * math.sin(math.pi / (4.0 * beta))
            + (1.0 - 2.0 / math.pi) * math.cos(math.pi / (4.0 * beta)))
    num = (math.sin(math.pi * t * (1.0 - beta))
           + 4.0 * beta * t * math.cos(math.pi * t * (1.0 + beta)))
    den = math.pi * t * (1.0 - (4.0 * beta * t) ** 2)
    return num / den


def truncated_rrc_taps(beta: float, num_taps: int, sps: int,
                       span_symbols: int = 32) -> FilterTaps:
    """RRC hard-truncated to num_taps around the peak and re-normalized.

    Short truncations deliberately break the Nyquist property: the truncation
    sidelobes put transmit energy into the spectral skirts.
    """
    full = rrc_taps(beta, span_symbols, sps)
    n_full = len(full)
    if num_taps > n_full:
        raise ValueError(f"num_taps {num_taps} exceeds generated span {n_full}")
    if num_taps < 1:
        raise ValueError("num_taps must be positive")
    start = (n_full - num_taps) // 2
    h = full.coeffs[start:start + num_taps].copy()
    h /= np.linalg.norm(h)
    return FilterTaps(h, sps, symmetric=bool(num_taps % 2))


def cosine_basis(K: int, M_half: int) -> np.ndarray:
    """K x (M_half+1) matrix V with row i = [1, 2cos(2*pi*i/K), ..., 2cos(2*pi*i*M_half/K)].

    For an even-symmetric filter with half taps h = [h_0, ..., h_M], V @ h is
    the (real) zero-phase frequency response at frequencies i/K.
    """
    if K < M_half + 1:
        raise ValueError("K must be at least M_half + 1")
    i = np.arange(K)[:, None]
    k = np.arange(M_half + 1)[None, :]
    V = 2.0 * np.cos(2.0 * np.pi * i * k / K)
    V[:, 0] = 1.0
    return V


def solve_constrained_qp(P: np.ndarray, q: np.ndarray, A: np.ndarray = None,
                         lower=None, upper=None, tol: float = 1e-8,
                         max_iter: int = None) -> np.ndarray:
    """Minimize 0.5 x'Px + q'x subject to lower <= Ax <= upper.

    Primal-dual active-set iteration on the one-sided form Gx <= g: solve the
    equality-constrained KKT system for the current working set, drop the
    constraint with the most negative multiplier, else add the most violated
    one.  Deterministic for fixed inputs; tolerances are relative to the
    objective scale.  Raises RuntimeError on non-convergence and ValueError
    for indefinite P.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    if P.shape != (n, n):
        raise ValueError("P/q size mismatch")
    if not np.allclose(P, P.T, atol=1e-10 * max(1.0, np.abs(P).max())):
        raise ValueError("P must be symmetric")
    eigs = np.linalg.eigvalsh(P)
    scale = max(eigs[-1], 1.0)
    if eigs[0] < -1e-8 * scale:
        raise ValueError(f"P is not positive semidefinite (min eig {eigs[0]:.3e})")

    # one-sided constraint list G x <= g
    if A is None:
        G = np.zeros((0, n))
        g = np.zeros(0)
    else:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        lower = np.full(A.shape[0], -np.inf) if lower is None \
            else np.asarray(lower, dtype=float)
        upper = np.full(A.shape[0], np.inf) if upper is None \
            else np.asarray(upper, dtype=float)
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        rows, rhs = [], []
        for Ai, lo, up in zip(A, lower, upper):
            r = np.linalg.norm(Ai)
            if r == 0:
                continue
            if np.isfinite(up):
                rows.append(Ai / r)
                rhs.append(up / r)
            if np.isfinite(lo):
                rows.append(-Ai / r)
                rhs.append(-lo / r)
        G = np.array(rows) if rows else np.zeros((0, n))
        g = np.array(rhs) if rhs else np.zeros(0)

    m = G.shape[0]
    if max_iter is None:
        max_iter = 100 + 10 * m

    # scale the objective so tolerances are meaningful across problem sizes
    obj_scale = max(np.abs(P).max(), np.abs(q).max(), 1.0)
    Ps, qs = P / obj_scale, q / obj_scale
    # tiny Tikhonov term keeps the KKT system solvable for semidefinite P
    reg = 1e-12 * max(1.0, np.abs(Ps).max())
    Ps = Ps + reg * np.eye(n)

    feas_tol = 1e-11
    active: list[int] = []
    x = np.zeros(n)
    for _ in range(max_iter):
        na = len(active)
        kkt = np.zeros((n + na, n + na))
        kkt[:n, :n] = Ps
        rhsv = np.concatenate([-qs, g[active]])
        if na:
            Ga = G[active]
            kkt[:n, n:] = Ga.T
            kkt[n:, :n] = Ga
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fac = lu_factor(kkt)
                sol = lu_solve(fac, rhsv)
                # one refinement step keeps active-constraint residuals tight
                sol += lu_solve(fac, rhsv - kkt @ sol)
        except Exception:
            sol = None
        if sol is None or not np.all(np.isfinite(sol)):
            sol, *_ = np.linalg.lstsq(kkt, rhsv, rcond=None)
        x = sol[:n]
        lam = sol[n:]

        # multiplier sign check far below the refinement noise floor would
        # cycle; 1e-12 keeps dual feasibility tight without instability
        if na and lam.min() < -max(1e-12, 1e-4 * tol):
            active.pop(int(np.argmin(lam)))
            continue
        if m:
            viol = G @ x - g
            worst = int(np.argmax(viol))
            if viol[worst] > feas_tol:
                if worst in active:
                    raise RuntimeError(
                        "QP solver stalled: active constraint still violated "
                        f"(residual {viol[worst]:.3e})")
                active.append(worst)
                continue
        return x

    resid = float(np.max(G @ x - g)) if m else 0.0
    raise RuntimeError(
        f"QP solver exceeded {max_iter} iterations "
        f"(|active|={len(active)}, worst violation {resid:.3e})")


def design_ssf(mask: SpectralMask, weights: DesignWeights = None,
               num_taps: int = 257, sps: int = 2) -> FilterTaps:
    """Design the mask-filling symmetric FIR by the constrained weighted LS QP.

    The target response d is the mask envelope in linear magnitude; the fitted
    response satisfies |H(f_i)| <= d(f_i) on the whole design grid.
    """
    if num_taps % 2 != 1 or num_taps < 3:
        raise ValueError("num_taps must be odd and >= 3")
    if weights is None:
        weights = default_design_weights(mask)
    K = mask.grid_size
    w = weights.weights
    if w.size != K:
        raise ValueError("weights length must equal mask grid size")
    d = mask.level_linear(mask.grid_freqs())
    if np.any(d < 0):
        raise ValueError("mask envelope must be non-negative")
    m_half = (num_taps - 1) // 2
    # rows 0..K-1 of the double-length basis sit exactly on the design grid
    V = cosine_basis(2 * (K - 1), m_half)[:K]
    P = 2.0 * V.T @ (w[:, None] * V)
    qv = -2.0 * V.T @ (w * d)
    # constrain at the mask corners as well: convex kinks of the piecewise
    # envelope fall between grid points and would otherwise admit a small
    # overshoot there
    fc = mask.corner_freqs
    Vc = np.hstack([np.ones((fc.size, 1)),
                    2.0 * np.cos(2.0 * np.pi * fc[:, None]
                                 * np.arange(1, m_half + 1)[None, :])])
    dc = mask.level_linear(fc)
    A_con = np.vstack([V, Vc])
    d_con = np.concatenate([d, dc])
    h_half = solve_constrained_qp(P, qv, A=A_con, lower=-d_con, upper=d_con)
    coeffs = np.concatenate([h_half[:0:-1], h_half])
    return FilterTaps(coeffs, sps, symmetric=True)


def freq_response_db(taps, freqs) -> np.ndarray:
    """Magnitude response in dB, normalized to the f=0 value, floored at -300 dB."""
    h = taps.coeffs if isinstance(taps, FilterTaps) else np.asarray(taps)
    if h.size == 0:
        raise ValueError("empty taps")
    f = np.atleast_1d(np.asarray(freqs, dtype=float))
    mag = np.abs(_dtft(h, f))
    ref = np.abs(_dtft(h, np.array([0.0])))[0]
    if ref <= 0:
        ref = 1.0
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / ref)
    return np.maximum(db, DB_FLOOR)


def _dtft(h: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    n = np.arange(h.size)
    return np.exp(-2j * np.pi * freqs[:, None] * n[None, :]) @ h


def mask_compliance_margin_db(taps, mask: SpectralMask, n_check: int = 4000):
    """Worst-case (response - mask) in dB over a dense check grid.

    Negative margin means compliant.  The taps are taken at mask-absolute
    scale (0 dB corresponds to |H| = 1), matching design_ssf output.
    """
    h = taps.coeffs if isinstance(taps, FilterTaps) else np.asarray(taps)
    f = np.linspace(0.0, 0.5, n_check)
    mag = np.abs(_dtft(h, f))
    with np.errstate(divide="ignore"):
        resp_db = np.maximum(20.0 * np.log10(mag), DB_FLOOR)
    excess = resp_db - mask.level_db(f)
    worst = int(np.argmax(excess))
    return float(excess[worst]), float(f[worst])


def mask_fill_scale(taps, mask: SpectralMask, sps: int,
                    n_grid: int = 4096) -> float:
    """Largest tap scale keeping the transmitted PSD at or below the mask.

    For unit-power i.i.d. symbols the transmit PSD is (scale^2 / sps) |H(f)|^2,
    so the admissible scale is set by the frequency where |H|^2 comes closest
    to sps times the squared mask envelope.
    """
    h = taps.coeffs if isinstance(taps, FilterTaps) else np.asarray(taps)
    f = np.linspace(0.0, 0.5, n_grid)
    mag2 = np.abs(_dtft(h, f)) ** 2
    d2 = mask.level_linear(f) ** 2
    with np.errstate(divide="ignore"):
        ratio = sps * d2 / np.maximum(mag2, 1e-300)
    return float(np.sqrt(ratio.min()))


def save_taps_csv(taps: FilterTaps, path) -> None:
    """One coefficient per line, 17 significant digits."""
    with open(path, "w") as fh:
        for c in np.asarray(taps.coeffs, dtype=float):
            fh.write(f"{c:.17g}\n")


def load_taps_csv(path, sps: float = 2) -> FilterTaps:
    coeffs = np.array([float(line) for line in open(path) if line.strip()])
    sym = bool(np.array_equal(coeffs, coeffs[::-1]))
    return FilterTaps(coeffs, sps, symmetric=sym)
