"""Carrier phase recovery for precoded links.

Two compensators share the extended-constellation machinery: a first-order
decision-directed DPLL, and a pilot-pinned quantized-phase trellis solved by
the forward-backward algorithm. Both operate on the feedforward filter output
before the modulo device, because modulo and rotation do not commute.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import ndtr

from .equalize import modulo, thp_precode
from .link import Constellation, make_constellation, nearest_indices

DPLL_GAIN_DEFAULT = 0.05
TRELLIS_LEVELS_DEFAULT = 101
TRELLIS_SPAN_FACTOR_DEFAULT = 3.5
PILOT_WINDOW_RAD_DEFAULT = 0.1
PRIOR_TRUNCATION = 1e-6

_LOG_ZERO = -1.0e30


@dataclass
class DpllState:
    """First-order loop state: current phase estimate and gain."""

    phi_hat: float
    gain: float = DPLL_GAIN_DEFAULT
    locked: bool = True

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("loop gain must be positive")
        if not np.isfinite(self.phi_hat):
            raise ValueError("phase estimate must be finite")


@dataclass
class PhaseTrellis:
    """Quantized-phase grid between two pilots with a random-walk transition model."""

    phi_max: float
    k_phi: int
    levels: np.ndarray
    increment_pmf: np.ndarray
    block_len: int
    sigma_psi2: float
    max_offset: int

    def __post_init__(self):
        if self.k_phi < 3 or self.k_phi % 2 == 0:
            raise ValueError("number of phase levels must be odd and >= 3")
        row_sums = self.increment_pmf.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")

    @property
    def spacing(self) -> float:
        if self.k_phi < 2:
            return 0.0
        return float(self.levels[1] - self.levels[0])


@dataclass
class EffectivePilotPrior:
    """Distribution of the precoder's pilot representation on the offset lattice."""

    pilot: complex
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if len(self.support) == 0 or len(self.support) != len(self.probs):
            raise ValueError("prior support and probabilities must be non-empty and equal length")
        if abs(float(np.sum(self.probs)) - 1.0) > 1e-9:
            raise ValueError("prior probabilities must sum to 1")


@dataclass
class CompensationResult:
    """Per-symbol phase estimates and symbol decisions from a tracking run."""

    phi_hat: np.ndarray
    decisions: np.ndarray
    locked: bool = True
    fallback_count: int = 0
    error_trace: np.ndarray = field(default=None, repr=False)


def dpll_error(y_or_u: complex, ref: complex, phi_hat: float) -> float:
    """Loop error from the imaginary part of the rotated-reference product."""
    return float(np.imag(y_or_u * np.conj(ref * np.exp(1j * phi_hat))))


def dpll_update(state: DpllState, e: float) -> DpllState:
    return DpllState(state.phi_hat + state.gain * e, state.gain, state.locked)


def thp_dpll_pilot_decide(r: complex, phi_hat: float, pilot: complex,
                          delta: float):
    """Resolve the lattice offset of a received pilot at the current phase.

    Rounds the derotated sample minus the pilot to the nearest lattice point,
    giving the effective pilot estimate in the extended constellation.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    v = r * np.exp(-1j * phi_hat)
    mu = round((v.real - pilot.real) / delta)
    nu = round((v.imag - pilot.imag) / delta)
    d_hat = complex(mu * delta, nu * delta)
    return pilot + d_hat, d_hat


@njit(cache=True)
def _dpll_loop(r, known_mask, known_syms, phi0, gain, delta, scale, side,
               use_mod):
    n = r.size
    phi = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    err = np.empty(n)
    ph = phi0
    for k in range(n):
        v = r[k] * np.exp(-1j * ph)
        if use_mod:
            wr = v.real - delta * math.ceil(v.real / delta - 0.5)
            wi = v.imag - delta * math.ceil(v.imag / delta - 0.5)
        else:
            wr = v.real
            wi = v.imag
        i = int(round((wr / scale + side - 1.0) / 2.0))
        q = int(round((wi / scale + side - 1.0) / 2.0))
        if i < 0:
            i = 0
        elif i > side - 1:
            i = side - 1
        if q < 0:
            q = 0
        elif q > side - 1:
            q = side - 1
        idx[k] = i * side + q
        if known_mask[k]:
            a_ref = known_syms[k]
        else:
            a_ref = complex((2 * i - side + 1) * scale, (2 * q - side + 1) * scale)
        if use_mod:
            mu = round((v.real - a_ref.real) / delta)
            nu = round((v.imag - a_ref.imag) / delta)
            u_ref = a_ref + complex(mu * delta, nu * delta)
        else:
            u_ref = a_ref
        e = (r[k] * np.conj(u_ref * np.exp(1j * ph))).imag
        phi[k] = ph
        err[k] = e
        ph = ph + gain * e
    return phi, idx, err


def run_thp_dpll(r, frame, constellation: Constellation, delta=None,
                 gain: float = DPLL_GAIN_DEFAULT, n_train: int = 0,
                 phi_init: float = 0.0, lock_threshold: float = 0.3,
                 genie_u=None) -> CompensationResult:
    """Track phase through a symbol stream with decision-directed updates.

    Pilot and training positions use the known symbol as the reference; data
    positions use the instantaneous slicer decision. With `delta` set, the
    reference is lifted onto the extended lattice before the error product so
    the loop operates ahead of the modulo device. `genie_u` supplies true
    extended-lattice values for the pilot references.
    """
    r = np.asarray(r, dtype=complex)
    n = r.size
    if frame.symbols.size != n:
        raise ValueError("stream and frame lengths differ")
    known_mask = np.zeros(n, dtype=np.uint8)
    known_syms = np.zeros(n, dtype=complex)
    if n_train > 0:
        known_mask[:n_train] = 1
        known_syms[:n_train] = frame.symbols[:n_train]
    pos = frame.pilot_positions
    if pos.size:
        known_mask[pos] = 1
        known_syms[pos] = frame.symbols[pos]
    if genie_u is not None:
        known_syms[pos] = np.asarray(genie_u, dtype=complex)
    use_mod = delta is not None
    dval = float(delta) if use_mod else 1.0
    phi, idx, err = _dpll_loop(r, known_mask, known_syms, float(phi_init),
                               float(gain), dval, constellation.scale,
                               constellation.side, use_mod)
    window = min(1000, max(1, n // 4))
    tail = np.mean(np.abs(err[-window:]))
    power = np.mean(np.abs(r[-window:]) ** 2)
    locked = bool(tail < lock_threshold * max(power, 1e-30))
    return CompensationResult(phi, idx, locked, 0, err)


def build_phase_trellis(sigma_psi2: float, d_pilot: int,
                        k_phi: int = TRELLIS_LEVELS_DEFAULT,
                        span_factor: float = TRELLIS_SPAN_FACTOR_DEFAULT
                        ) -> PhaseTrellis:
    """Quantize the random-walk phase span between consecutive pilots.

    The grid covers span_factor standard deviations of the accumulated walk;
    per-step increments follow the Gaussian integrated over quantization
    cells, pruned beyond four per-step standard deviations.
    """
    if k_phi < 3 or k_phi % 2 == 0:
        raise ValueError("number of phase levels must be odd and >= 3")
    if sigma_psi2 < 0:
        raise ValueError("phase increment variance must be >= 0")
    if d_pilot < 2:
        raise ValueError("pilot period must be >= 2")
    phi_max = span_factor * math.sqrt(sigma_psi2 * d_pilot)
    levels = np.linspace(-phi_max, phi_max, k_phi)
    if sigma_psi2 == 0.0 or phi_max == 0.0:
        pmf = np.eye(k_phi)
        return PhaseTrellis(phi_max, k_phi, levels, pmf, d_pilot, sigma_psi2, 0)
    spacing = levels[1] - levels[0]
    sigma = math.sqrt(sigma_psi2)
    n_max = max(int(math.floor(4.0 * sigma / spacing)), 0)
    offsets = np.arange(-n_max, n_max + 1)
    hi = (offsets + 0.5) * spacing / sigma
    lo = (offsets - 0.5) * spacing / sigma
    p_off = ndtr(hi) - ndtr(lo)
    pmf = np.zeros((k_phi, k_phi))
    for i in range(k_phi):
        for off, p in zip(offsets, p_off):
            j = i + off
            if 0 <= j < k_phi:
                pmf[i, j] = p
    pmf /= pmf.sum(axis=1, keepdims=True)
    return PhaseTrellis(float(phi_max), k_phi, levels, pmf, d_pilot,
                        float(sigma_psi2), int(n_max))


@njit(cache=True)
def _branch_metrics(r, phases, scale, side, delta, use_mod, inv_sigma2):
    n = r.size
    kphi = phases.size
    out = np.empty((n, kphi))
    for k in range(n):
        for s in range(kphi):
            v = r[k] * np.exp(-1j * phases[s])
            if use_mod:
                wr = v.real - delta * math.ceil(v.real / delta - 0.5)
                wi = v.imag - delta * math.ceil(v.imag / delta - 0.5)
            else:
                wr = v.real
                wi = v.imag
            i = int(round((wr / scale + side - 1.0) / 2.0))
            q = int(round((wi / scale + side - 1.0) / 2.0))
            if i < 0:
                i = 0
            elif i > side - 1:
                i = side - 1
            if q < 0:
                q = 0
            elif q > side - 1:
                q = side - 1
            ar = (2 * i - side + 1) * scale
            ai = (2 * q - side + 1) * scale
            out[k, s] = -((wr - ar) ** 2 + (wi - ai) ** 2) * inv_sigma2
    return out


@njit(cache=True)
def _forward(metric, log_trans, n_max, start_idx):
    n, kphi = metric.shape
    alpha = np.empty((n, kphi))
    ok = True
    for s in range(kphi):
        alpha[0, s] = log_trans[start_idx, s] + metric[0, s]
    for k in range(n):
        if k > 0:
            for s in range(kphi):
                lo = s - n_max
                if lo < 0:
                    lo = 0
                hi = s + n_max + 1
                if hi > kphi:
                    hi = kphi
                m = _LOG_ZERO
                for sp in range(lo, hi):
                    t = alpha[k - 1, sp] + log_trans[sp, s]
                    if t > m:
                        m = t
                if m <= _LOG_ZERO / 2:
                    alpha[k, s] = _LOG_ZERO
                    continue
                acc = 0.0
                for sp in range(lo, hi):
                    t = alpha[k - 1, sp] + log_trans[sp, s]
                    if t > _LOG_ZERO / 2:
                        acc += math.exp(t - m)
                alpha[k, s] = m + math.log(acc) + metric[k, s]
        mx = _LOG_ZERO
        for s in range(kphi):
            if alpha[k, s] > mx:
                mx = alpha[k, s]
        if mx <= _LOG_ZERO / 2:
            ok = False
            break
        for s in range(kphi):
            alpha[k, s] -= mx
            if alpha[k, s] < _LOG_ZERO:
                alpha[k, s] = _LOG_ZERO
    return alpha, ok


@njit(cache=True)
def _backward(metric, log_trans, n_max, end_idx):
    n, kphi = metric.shape
    beta = np.empty((n, kphi))
    ok = True
    for s in range(kphi):
        beta[n - 1, s] = log_trans[s, end_idx]
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            for s in range(kphi):
                lo = s - n_max
                if lo < 0:
                    lo = 0
                hi = s + n_max + 1
                if hi > kphi:
                    hi = kphi
                m = _LOG_ZERO
                for sn in range(lo, hi):
                    t = beta[k + 1, sn] + log_trans[s, sn] + metric[k + 1, sn]
                    if t > m:
                        m = t
                if m <= _LOG_ZERO / 2:
                    beta[k, s] = _LOG_ZERO
                    continue
                acc = 0.0
                for sn in range(lo, hi):
                    t = beta[k + 1, sn] + log_trans[s, sn] + metric[k + 1, sn]
                    if t > _LOG_ZERO / 2:
                        acc += math.exp(t - m)
                beta[k, s] = m + math.log(acc)
        mx = _LOG_ZERO
        for s in range(kphi):
            if beta[k, s] > mx:
                mx = beta[k, s]
        if mx <= _LOG_ZERO / 2:
            ok = False
            break
        for s in range(kphi):
            beta[k, s] -= mx
            if beta[k, s] < _LOG_ZERO:
                beta[k, s] = _LOG_ZERO
    return beta, ok


def _log_transitions(trellis: PhaseTrellis) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lt = np.log(trellis.increment_pmf)
    return np.where(np.isfinite(lt), lt, _LOG_ZERO)


def _level_index(trellis: PhaseTrellis, rel_phase: float) -> int:
    center = trellis.k_phi // 2
    s = trellis.spacing
    if s == 0.0:
        return center
    return int(np.clip(round(rel_phase / s) + center, 0, trellis.k_phi - 1))


def bcjr_block(r_block, constellation: Constellation, trellis: PhaseTrellis,
               start_phase: float, end_phase: float, sigma_n2: float,
               delta=None):
    """MAP phase estimates for the data symbols between two pinned pilots.

    Branch metrics slice the derotated sample on the base constellation,
    folding through the modulo first when `delta` is given; the fold is exact
    because the nearest extended point and the folded nearest base point sit
    at the same distance.

    Returns (absolute phase estimates, posterior matrix).
    """
    r_block = np.asarray(r_block, dtype=complex)
    if r_block.size == 0:
        raise ValueError("empty block")
    if sigma_n2 <= 0:
        raise ValueError("noise variance must be positive")
    phases = start_phase + trellis.levels
    use_mod = delta is not None
    dval = float(delta) if use_mod else 1.0
    metric = _branch_metrics(r_block, phases, constellation.scale,
                             constellation.side, dval, use_mod, 1.0 / sigma_n2)
    log_trans = _log_transitions(trellis)
    center = trellis.k_phi // 2
    end_idx = _level_index(trellis, end_phase - start_phase)
    alpha, ok_f = _forward(metric, log_trans, trellis.max_offset, center)
    beta, ok_b = _backward(metric, log_trans, trellis.max_offset, end_idx)
    if not (ok_f and ok_b):
        raise RuntimeError("phase posterior vanished; pinned states unreachable")
    logp = alpha + beta
    if np.any(logp.max(axis=1) <= _LOG_ZERO / 2):
        raise RuntimeError("phase posterior vanished; pinned states unreachable")
    logp -= logp.max(axis=1, keepdims=True)
    post = np.exp(logp)
    sums = post.sum(axis=1, keepdims=True)
    if np.any(sums <= 0) or not np.all(np.isfinite(sums)):
        raise RuntimeError("phase posterior vanished; pinned states unreachable")
    post /= sums
    phi = phases[np.argmax(post, axis=1)]
    return phi, post


def effective_pilot_prior(pilot: complex, fbf, delta: float,
                          n_mc: int = 100000, rng=None) -> EffectivePilotPrior:
    """Estimate the lattice-offset distribution of a periodically sent pilot.

    Runs the precoder over random data with the pilot inserted every 50
    symbols and histograms the displacement observed at pilot positions.
    """
    if n_mc < 1e5:
        raise ValueError("need at least 1e5 pilot draws")
    if rng is None:
        raise ValueError("rng required for the pilot prior")
    b = fbf.coeffs if hasattr(fbf, "coeffs") else np.asarray(fbf, dtype=complex)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.max(np.abs(b)) == 0.0:
        return EffectivePilotPrior(complex(pilot), np.array([complex(pilot)]),
                                   np.array([1.0]))
    # the modulo period fixes the constellation order: delta^2 = 6M/(M-1)
    d2 = delta * delta
    if d2 <= 6.0:
        raise ValueError("delta inconsistent with a unit-energy square QAM lattice")
    m_order = int(round(d2 / (d2 - 6.0)))
    c = make_constellation(m_order)
    period = 50
    n_sym = (n_mc + 1) * period
    symbols = c.points[rng.integers(0, m_order, size=n_sym)]
    pos = np.arange(period, n_sym, period)[:n_mc]
    symbols[pos] = pilot
    _, d = thp_precode(symbols, b, delta)
    d_pilot_vals = d[pos]
    keys_re = np.round(np.real(d_pilot_vals) / delta).astype(np.int64)
    keys_im = np.round(np.imag(d_pilot_vals) / delta).astype(np.int64)
    packed = keys_re * 1000003 + keys_im
    uniq, counts = np.unique(packed, return_counts=True)
    probs = counts / counts.sum()
    keep = probs >= PRIOR_TRUNCATION
    uniq, probs = uniq[keep], probs[keep]
    probs = probs / probs.sum()
    re = np.round(uniq.astype(np.float64) / 1000003.0).astype(np.int64)
    im = uniq - re * 1000003
    support = pilot + (re + 1j * im) * delta
    order = np.lexsort((im, re))
    return EffectivePilotPrior(complex(pilot), support[order], probs[order])


def _wrap_phase(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


def pilot_phase_estimate(r: complex, prior: EffectivePilotPrior,
                         sigma_n2: float, coarse: float,
                         delta_window=PILOT_WINDOW_RAD_DEFAULT):
    """Joint effective-pilot and phase estimate at a pilot position.

    A positive window restricts candidates to those whose aligning phase
    falls near the coarse estimate and scores them on magnitude alone; a zero
    window scores the full support at the fixed coarse phase. `None` runs the
    unrestricted joint search. Returns (pilot estimate, refined phase,
    fallback flag).
    """
    if sigma_n2 <= 0:
        raise ValueError("noise variance must be positive")
    if delta_window is not None and not 0 <= delta_window < np.pi:
        raise ValueError("window must lie in [0, pi)")
    u = prior.support
    logp = np.log(prior.probs)
    proj = np.angle(r * np.conj(u))
    fallback = False
    if delta_window is None:
        metric = -((np.abs(r) - np.abs(u)) ** 2) / sigma_n2 + logp
        best = int(np.argmax(metric))
    elif delta_window == 0.0:
        metric = -np.abs(r - u * np.exp(1j * coarse)) ** 2 / sigma_n2 + logp
        best = int(np.argmax(metric))
    else:
        inside = np.abs(_wrap_phase(proj - coarse)) <= delta_window
        metric = -((np.abs(r) - np.abs(u)) ** 2) / sigma_n2 + logp
        if not np.any(inside):
            fallback = True
            best = int(np.argmax(metric))
        else:
            masked = np.where(inside, metric, -np.inf)
            best = int(np.argmax(masked))
    u_hat = complex(u[best])
    phi_hat = float(np.angle(r * np.conj(u_hat)))
    return u_hat, phi_hat, fallback


def run_thp_bcjr(r, frame, constellation: Constellation,
                 trellis: PhaseTrellis, prior, sigma_n2: float, delta=None,
                 pilot_window=PILOT_WINDOW_RAD_DEFAULT,
                 genie_u=None) -> CompensationResult:
    """Blockwise trellis phase estimation over a pilot-framed stream.

    Each inter-pilot block is pinned at both ends. The start pin comes from a
    pilot estimate coarse-guided by linear extrapolation of the previous
    block's phases; the end pin from a pilot estimate coarse-guided by the
    tentative phase at the end of a forward-only pass. The first pilot uses
    the unrestricted joint search. `genie_u` supplies true effective pilots
    and bypasses estimation.
    """
    r = np.asarray(r, dtype=complex)
    n = r.size
    pos = frame.pilot_positions
    if pos.size < 2:
        raise ValueError("need at least two pilots")
    if sigma_n2 <= 0:
        raise ValueError("noise variance must be positive")
    use_mod = delta is not None
    if use_mod and prior is None and genie_u is None:
        raise ValueError("precoded mode needs a pilot prior or genie pilots")
    phi_out = np.zeros(n)
    dec_out = np.zeros(n, dtype=np.int64)
    fallbacks = 0
    log_trans = _log_transitions(trellis)
    center = trellis.k_phi // 2

    def estimate_pilot(i_pilot, coarse, window):
        nonlocal fallbacks
        rk = r[pos[i_pilot]]
        if genie_u is not None:
            u_true = genie_u[i_pilot]
            return float(np.angle(rk * np.conj(u_true)))
        if not use_mod:
            return float(np.angle(rk * np.conj(frame.symbols[pos[i_pilot]])))
        u_hat, phi_hat, fb = pilot_phase_estimate(rk, prior, sigma_n2, coarse,
                                                  window)
        if fb:
            fallbacks += 1
        return phi_hat

    phi_start = estimate_pilot(0, 0.0, None)

    def slice_at(v):
        w = modulo(v, delta) if use_mod else v
        return nearest_indices(constellation, np.atleast_1d(w))[0]

    for i in range(pos.size - 1):
        p0, p1 = int(pos[i]), int(pos[i + 1])
        phi_out[p0] = phi_start
        dec_out[p0] = slice_at(r[p0] * np.exp(-1j * phi_start))
        block = r[p0 + 1:p1]
        if block.size == 0:
            phi_start = estimate_pilot(i + 1, phi_start, pilot_window)
            continue
        phases = phi_start + trellis.levels
        metric = _branch_metrics(block, phases, constellation.scale,
                                 constellation.side,
                                 float(delta) if use_mod else 1.0, use_mod,
                                 1.0 / sigma_n2)
        alpha, ok_f = _forward(metric, log_trans, trellis.max_offset, center)
        if not ok_f:
            raise RuntimeError("phase posterior vanished; pinned states unreachable")
        tentative_end = phases[int(np.argmax(alpha[-1]))]
        phi_end = estimate_pilot(i + 1, tentative_end, pilot_window)
        end_idx = _level_index(trellis, phi_end - phi_start)
        beta, ok_b = _backward(metric, log_trans, trellis.max_offset, end_idx)
        if not ok_b:
            raise RuntimeError("phase posterior vanished; pinned states unreachable")
        logp = alpha + beta
        map_idx = np.argmax(logp, axis=1)
        phi_blk = phases[map_idx]
        phi_out[p0 + 1:p1] = phi_blk
        v = block * np.exp(-1j * phi_blk)
        w = modulo(v, delta) if use_mod else v
        dec_out[p0 + 1:p1] = nearest_indices(constellation, w)
        # start pin for the next block: re-estimate its pilot with a coarse
        # phase extrapolated from this block's trailing estimates
        if block.size >= 2:
            coarse_next = 2 * phi_blk[-1] - phi_blk[-2]
        else:
            coarse_next = phi_blk[-1]
        if genie_u is not None or not use_mod:
            phi_start = phi_end
        else:
            phi_start = estimate_pilot(i + 1, coarse_next, pilot_window)

    # trailing symbols after the last pilot: forward-only tentative estimates
    p_last = int(pos[-1])
    phi_out[p_last] = phi_start
    dec_out[p_last] = slice_at(r[p_last] * np.exp(-1j * phi_start))
    tail = r[p_last + 1:]
    if tail.size:
        phases = phi_start + trellis.levels
        metric = _branch_metrics(tail, phases, constellation.scale,
                                 constellation.side,
                                 float(delta) if use_mod else 1.0, use_mod,
                                 1.0 / sigma_n2)
        alpha, ok_f = _forward(metric, log_trans, trellis.max_offset, center)
        if not ok_f:
            raise RuntimeError("phase posterior vanished; pinned states unreachable")
        phi_blk = phases[np.argmax(alpha, axis=1)]
        phi_out[p_last + 1:] = phi_blk
        v = tail * np.exp(-1j * phi_blk)
        w = modulo(v, delta) if use_mod else v
        dec_out[p_last + 1:] = nearest_indices(constellation, w)
    return CompensationResult(phi_out, dec_out, True, fallbacks)


def save_phase_trace(path, phi_hat, phi_true=None):
    """Write per-symbol phase estimates (and truth when known) to CSV."""
    phi_hat = np.asarray(phi_hat)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["symbol", "phi_true", "phi_hat"])
        for k in range(phi_hat.size):
            truth = "" if phi_true is None else repr(float(phi_true[k]))
            writer.writerow([k, truth, repr(float(phi_hat[k]))])
