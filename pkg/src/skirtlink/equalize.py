"""MMSE linear, decision-feedback, and Tomlinson-Harashima equalization.

All filters run at symbol rate on the aggregate response.  The common core is
the ridge-regularized least-squares fit of the equalized cascade to a target
vector; LE, DFE, and THP differ only in what the target is allowed to be.
Decision-directed loops (DFE detection, THP precoding) are sequential and run
as compiled kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve

from .spectral import FilterTaps


# ---------------------------------------------------------------------------
# design core
# ---------------------------------------------------------------------------

def _forward_matrix(h: np.ndarray, num_taps: int) -> np.ndarray:
    """A[j, i] = h[j-i]: maps filter taps w to the cascade (h * w)."""
    h = np.asarray(h, dtype=complex)
    L = num_taps + h.size - 1
    A = np.zeros((L, num_taps), dtype=complex)
    for i in range(num_taps):
        A[i:i + h.size, i] = h
    return A


def _ridge_gram(A: np.ndarray, sigma2: float):
    """Cholesky factor of (A^H A + sigma2 I); raises on a singular system."""
    G = A.conj().T @ A + sigma2 * np.eye(A.shape[1])
    try:
        return cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "equalizer design system is singular (sigma2=0 with a "
            "rank-deficient channel)") from exc


def mmse_le(h, sigma2: float, num_taps: int, delay: int = None,
            target=None):
    """Wiener linear equalizer for channel h under white noise sigma2.

    Fits the cascade h*w to the target vector placed at the given decision
    delay; target defaults to a unit pulse.  delay=None scans all admissible
    delays for the lowest MSE (ties take the smallest delay).  Returns
    (FilterTaps, mse).
    """
    w, mse, _ = _le_design(h, sigma2, num_taps, delay, target)
    return w, mse


def _le_design(h, sigma2: float, num_taps: int, delay: int = None,
               target=None):
    """LE core returning (taps, mse, delay)."""
    if num_taps < 1:
        raise ValueError("num_taps must be >= 1")
    h = np.asarray(h, dtype=complex)
    t = np.array([1.0 + 0.0j]) if target is None else np.asarray(target, dtype=complex)
    A = _forward_matrix(h, num_taps)
    L = A.shape[0]
    max_delay = L - t.size
    if max_delay < 0:
        raise ValueError("target longer than the cascade span")
    fac = _ridge_gram(A, sigma2)
    t_energy = float(np.real(np.vdot(t, t)))

    def solve_at(d):
        c = np.zeros(L, dtype=complex)
        c[d:d + t.size] = t
        q = A.conj().T @ c
        w = cho_solve(fac, q)
        return w, max(t_energy - float(np.real(np.vdot(q, w))), 0.0)

    if delay is not None:
        if not 0 <= delay <= max_delay:
            raise ValueError(f"delay {delay} outside [0, {max_delay}]")
        w, mse = solve_at(delay)
        return FilterTaps(w, 1), mse, delay

    best = None
    for d in range(max_delay + 1):
        w, mse = solve_at(d)
        if best is None or mse < best[1] - 1e-15:
            best = (w, mse, d)
    return FilterTaps(best[0], 1), best[1], best[2]


def mmse_dfe(h, sigma2: float, ff_len: int, fb_len: int):
    """MMSE decision-feedback design assuming correct past decisions.

    Minimizes E|w*y - (x_{k-delta} + sum_i b_i x_{k-delta-i})|^2 over the
    feedforward taps w, the strictly causal feedback taps b, and the decision
    delay.  Returns (fff, fbf, mse).
    """
    fff, fbf, mse, _ = _dfe_design(h, sigma2, ff_len, fb_len)
    return fff, fbf, mse


def _dfe_design(h, sigma2: float, ff_len: int, fb_len: int):
    """DFE core returning the decision delay as well.

    Uses the inverse regularized autocorrelation: with
    N = I - A (A^H A + s2 I)^{-1} A^H, the best feedback taps for a delay are
    the Schur solve on the feedback index block of N.
    """
    if ff_len < 1 or fb_len < 0:
        raise ValueError("filter lengths must be positive")
    h = np.asarray(h, dtype=complex)
    A = _forward_matrix(h, ff_len)
    L = A.shape[0]
    fac = _ridge_gram(A, sigma2)
    M = A @ cho_solve(fac, A.conj().T)
    N = np.eye(L) - M

    best = None
    for d in range(L - fb_len):
        if fb_len:
            S = np.arange(d + 1, d + 1 + fb_len)
            Nss = N[np.ix_(S, S)]
            Nsd = N[S, d]
            try:
                b = -np.linalg.solve(Nss, Nsd)
            except np.linalg.LinAlgError:
                b = -np.linalg.lstsq(Nss, Nsd, rcond=None)[0]
            mse = float(np.real(N[d, d] + np.vdot(Nsd, b)))
        else:
            b = np.zeros(0, dtype=complex)
            mse = float(np.real(N[d, d]))
        mse = max(mse, 0.0)
        if best is None or mse < best[0] - 1e-15:
            best = (mse, d, b)

    mse, d, b = best
    c = np.zeros(L, dtype=complex)
    c[d] = 1.0
    if fb_len:
        c[d + 1:d + 1 + fb_len] = b
    w = cho_solve(fac, A.conj().T @ c)
    fbf = FilterTaps(b, 1) if fb_len else FilterTaps(np.zeros(1, dtype=complex), 1)
    return FilterTaps(w, 1), fbf, mse, d


# ---------------------------------------------------------------------------
# modulo arithmetic
# ---------------------------------------------------------------------------

def modulo(x, delta: float):
    """Component-wise modulo onto the half-open square (-delta/2, delta/2]."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x, dtype=complex)
    re = np.real(x) - delta * np.ceil(np.real(x) / delta - 0.5)
    im = np.imag(x) - delta * np.ceil(np.imag(x) / delta - 0.5)
    out = re + 1j * im
    return complex(out) if out.ndim == 0 else out


@njit(cache=True)
def _thp_loop(a, b, delta):
    n = a.size
    x = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        acc = 0.0 + 0.0j
        lim = min(b.size, k)
        for i in range(lim):
            acc += b[i] * x[k - 1 - i]
        v = a[k] - acc
        re = v.real - delta * math.ceil(v.real / delta - 0.5)
        im = v.imag - delta * math.ceil(v.imag / delta - 0.5)
        x[k] = re + 1j * im
    return x


def thp_precode(frame, fbf, delta: float):
    """Modulo-feedback precoding: x_k = MOD(a_k - sum_i b_i x_{k-i}).

    Returns (x, d) with the lattice displacement d_k = u_k - a_k, where
    u_k = a_k + d_k is the extended-constellation value the receiver sees
    after the monic target response.
    """
    a = frame.symbols if hasattr(frame, "symbols") else np.asarray(frame)
    b = fbf.coeffs if isinstance(fbf, FilterTaps) else np.asarray(fbf)
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = _thp_loop(np.ascontiguousarray(a, dtype=complex),
                  np.ascontiguousarray(b, dtype=complex), float(delta))
    # u = (1, b) * x = a + d; recover d without re-running the loop
    u = x.copy()
    for i in range(b.size):
        u[i + 1:] += b[i] * x[:-(i + 1)]
    return x, u - a


# ---------------------------------------------------------------------------
# equalizer set
# ---------------------------------------------------------------------------

@dataclass
class EqualizerSet:
    """Channel equalizer, pulse equalizer pair, and bookkeeping for one chain.

    w_hc runs first and handles the propagation channel; w_ht (feedforward)
    and b_ht (strictly causal feedback) handle the pulse-shape ISI.  bias is
    the MMSE shrinkage 1 - mse applied before decisions.
    """

    w_hc: FilterTaps
    w_ht: FilterTaps
    b_ht: FilterTaps
    decision_delay: int
    sigma2_used: float
    mse: float

    def __post_init__(self):
        for taps in (self.w_hc, self.w_ht, self.b_ht):
            if not np.all(np.isfinite(taps.coeffs)):
                raise ValueError("equalizer taps must be finite")
        if self.decision_delay < 0:
            raise ValueError("decision delay must be non-negative")

    @property
    def bias(self) -> float:
        return 1.0 - self.mse

    def to_json(self) -> str:
        def pack(taps):
            return [[float(np.real(c)), float(np.imag(c))] for c in taps.coeffs]
        return json.dumps({
            "w_hc": pack(self.w_hc), "w_ht": pack(self.w_ht),
            "b_ht": pack(self.b_ht), "decision_delay": self.decision_delay,
            "sigma2_used": self.sigma2_used, "mse": self.mse})

    @classmethod
    def from_json(cls, doc: str) -> "EqualizerSet":
        d = json.loads(doc)

        def unpack(rows):
            return FilterTaps(np.array([r + 1j * i for r, i in rows]), 1)
        return cls(unpack(d["w_hc"]), unpack(d["w_ht"]), unpack(d["b_ht"]),
                   int(d["decision_delay"]), float(d["sigma2_used"]),
                   float(d["mse"]))


def identity_le() -> FilterTaps:
    return FilterTaps(np.array([1.0 + 0.0j]), 1)


def thp_filters_for(h, sigma2: float, ff_len: int, fb_len: int) -> EqualizerSet:
    """Precoding filter set from the DFE factorization of h.

    The feedback filter moves to the transmitter modulo loop and the
    feedforward filter stays at the receiver, so the decision path has no
    error propagation.  w_hc defaults to a pass-through; chains with a
    separate channel equalizer overwrite it.
    """
    fff, fbf, mse, delay = _dfe_design(h, sigma2, ff_len, fb_len)
    return EqualizerSet(identity_le(), fff, fbf, delay, sigma2, mse)


# ---------------------------------------------------------------------------
# adaptive training
# ---------------------------------------------------------------------------

@njit(cache=True)
def _lms_loop(y, desired, w, step, delay):
    n_taps = w.size
    worst = 0.0
    for k in range(delay, desired.size):
        if k + 1 < n_taps or k >= y.size:
            continue
        acc = 0.0 + 0.0j
        for i in range(n_taps):
            acc += w[i] * y[k - i]
        e = desired[k] - acc
        for i in range(n_taps):
            w[i] += step * e * np.conj(y[k - i])
        mag = abs(e)
        if mag > worst:
            worst = mag
    return worst


def adaptive_le_train(received, training_symbols, num_taps: int,
                      step: float, delay: int = None) -> FilterTaps:
    """LMS adaptation of a symbol-spaced linear equalizer against training data.

    The filter starts as a centered unit pulse.  delay=None aligns the
    training sequence to the received stream by correlation peak.  Raises on
    divergence.
    """
    y = np.ascontiguousarray(received, dtype=complex)
    d = np.ascontiguousarray(training_symbols, dtype=complex)
    if d.size < 10 * num_taps:
        raise ValueError("training sequence shorter than 10x the filter length")
    center = num_taps // 2
    if delay is None:
        # coarse alignment: lag of peak cross-correlation, searched causally
        n = min(y.size, d.size)
        corr = [np.abs(np.vdot(d[:n - lag], y[lag:n]))
                for lag in range(min(64, n // 2))]
        delay = int(np.argmax(corr))
    # desired[k] pairs with received window ending at k: shift by the lag and
    # the filter center so the main tap lands mid-filter
    desired = np.zeros(y.size, dtype=complex)
    start = delay + center
    count = min(d.size, y.size - start)
    if count <= 0:
        raise ValueError("received stream too short for the given delay")
    desired[start:start + count] = d[:count]
    w = np.zeros(num_taps, dtype=complex)
    w[center] = 1.0
    if step:
        _lms_loop(y, desired, w, float(step), start)
    if not np.all(np.isfinite(w)) or np.linalg.norm(w) > 1e6:
        raise RuntimeError("LMS diverged; reduce the step size")
    return FilterTaps(w, 1)


# ---------------------------------------------------------------------------
# decision loops
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dfe_detect_loop(z, b, side, scale):
    n = z.size
    idx = np.zeros(n, dtype=np.int64)
    dec = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        acc = 0.0 + 0.0j
        lim = min(b.size, k)
        for i in range(lim):
            acc += b[i] * dec[k - 1 - i]
        v = z[k] - acc
        i_lvl = int(round((v.real / scale + side - 1) / 2.0))
        q_lvl = int(round((v.imag / scale + side - 1) / 2.0))
        if i_lvl < 0:
            i_lvl = 0
        elif i_lvl > side - 1:
            i_lvl = side - 1
        if q_lvl < 0:
            q_lvl = 0
        elif q_lvl > side - 1:
            q_lvl = side - 1
        idx[k] = i_lvl * side + q_lvl
        dec[k] = ((2 * i_lvl - (side - 1)) + 1j * (2 * q_lvl - (side - 1))) * scale
    return idx, dec


def dfe_detect(z, fbf, constellation):
    """Sequential DFE decisions: slice z_k minus the feedback of past decisions."""
    b = fbf.coeffs if isinstance(fbf, FilterTaps) else np.asarray(fbf)
    idx, _ = _dfe_detect_loop(np.ascontiguousarray(z, dtype=complex),
                              np.ascontiguousarray(b, dtype=complex),
                              constellation.side, constellation.scale)
    return idx


@njit(cache=True)
def _dfe_anchored_loop(z, ref, b, side, scale, period):
    n = z.size
    idx = np.zeros(n, dtype=np.int64)
    dec = np.zeros(n, dtype=np.complex128)
    soft = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        seg = (k // period) * period
        acc = 0.0 + 0.0j
        lim = min(b.size, k)
        for i in range(lim):
            j = k - 1 - i
            if j >= seg:
                acc += b[i] * dec[j]
            else:
                acc += b[i] * ref[j]
        v = z[k] - acc
        soft[k] = v
        i_lvl = int(round((v.real / scale + side - 1) / 2.0))
        q_lvl = int(round((v.imag / scale + side - 1) / 2.0))
        if i_lvl < 0:
            i_lvl = 0
        elif i_lvl > side - 1:
            i_lvl = side - 1
        if q_lvl < 0:
            q_lvl = 0
        elif q_lvl > side - 1:
            q_lvl = side - 1
        idx[k] = i_lvl * side + q_lvl
        dec[k] = ((2 * i_lvl - (side - 1)) + 1j * (2 * q_lvl - (side - 1))) * scale
    return idx, soft


def dfe_detect_anchored(z, fbf, constellation, ref_symbols, period: int):
    """DFE decisions with the feedback register re-anchored on known symbols.

    Feedback for symbols before the most recent period boundary is taken from
    ref_symbols (the transmitted values) instead of past decisions, so a
    decision error can propagate for at most one period.  With the strong
    feedback taps of skirt-filling pulses an unanchored run never recovers
    from the first error, which would measure frame length rather than
    equalizer quality.  Returns (indices, soft) where soft holds the
    feedback-cancelled slicer inputs.
    """
    if period < 1:
        raise ValueError("anchor period must be >= 1")
    b = fbf.coeffs if isinstance(fbf, FilterTaps) else np.asarray(fbf)
    z = np.ascontiguousarray(z, dtype=complex)
    ref = np.ascontiguousarray(ref_symbols, dtype=complex)
    if ref.size != z.size:
        raise ValueError("reference symbol stream must match input length")
    return _dfe_anchored_loop(z, ref, np.ascontiguousarray(b, dtype=complex),
                              constellation.side, constellation.scale, period)
