"""Error-rate and information-rate measurement.

SER counting, exact bit LLRs for square Gray-labeled QAM, the mismatched-
decoding achievable rate from LLR statistics, and the noise calibration
that anchors every sweep to the narrowband baseline's symbol SNR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .link import SCHEME_SPS, SIM_SAMPLE_RATE_HZ, Constellation, nearest_indices

LLR_CLAMP = 50.0

CSV_HEADER = ("scheme", "M", "snr_db", "ser", "air_bpcu", "air_mbps",
              "n_symbols", "seed", "ser_ci_lo", "ser_ci_hi")


@dataclass
class TrialResult:
    """One measured sweep point, ready for CSV emission."""

    scheme: str
    M: int
    snr_db: float
    ser: float
    air_bpcu: float
    air_mbps: float
    n_symbols: int
    seed: int
    ser_ci_lo: float = 0.0
    ser_ci_hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.ser <= 1.0:
            raise ValueError("ser must lie in [0, 1]")
        m = math.log2(self.M)
        if not 0.0 <= self.air_bpcu <= m + 1e-12:
            raise ValueError("reported rate must lie in [0, log2 M]")

    def to_row(self):
        return [self.scheme, self.M, repr(float(self.snr_db)),
                repr(float(self.ser)), repr(float(self.air_bpcu)),
                repr(float(self.air_mbps)), self.n_symbols, self.seed,
                repr(float(self.ser_ci_lo)), repr(float(self.ser_ci_hi))]


def ser(decisions, truth) -> float:
    decisions = np.asarray(decisions)
    truth = np.asarray(truth)
    if decisions.shape != truth.shape or decisions.size == 0:
        raise ValueError("decision and truth streams must have equal nonzero length")
    return float(np.mean(decisions != truth))


def _axis_bit_masks(side: int):
    """Per-axis Gray labels split into one boolean mask pair per bit."""
    n = np.arange(side)
    gray = n ^ (n >> 1)
    n_bits = side.bit_length() - 1
    masks = []
    for t in range(n_bits):
        bit = (gray >> (n_bits - 1 - t)) & 1
        masks.append(bit.astype(bool))
    return masks


def bit_llrs(r, constellation: Constellation, sigma2: float,
             chunk: int = 20000) -> np.ndarray:
    """Exact per-bit LLRs for a Gaussian channel, positive favoring bit 1.

    Square Gray QAM factorizes over I and Q, so each bit needs only a
    one-dimensional sum over the axis points. Output clamped to +-50.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    r = np.atleast_1d(np.asarray(r, dtype=complex))
    side = constellation.side
    m = constellation.bits_per_symbol
    half = m // 2
    pts = (2 * np.arange(side) - side + 1) * constellation.scale
    masks = _axis_bit_masks(side)
    out = np.empty((r.size, m))
    for start in range(0, r.size, chunk):
        seg = r[start:start + chunk]
        for axis, vals in ((0, seg.real), (1, seg.imag)):
            a = -((vals[:, None] - pts[None, :]) ** 2) / sigma2
            for t in range(half):
                num = logsumexp(a, axis=1, b=masks[t].astype(float))
                den = logsumexp(a, axis=1, b=(~masks[t]).astype(float))
                out[start:start + seg.size, axis * half + t] = num - den
    return np.clip(out, -LLR_CLAMP, LLR_CLAMP)


def air(llrs, bits) -> float:
    """Achievable rate of bit-metric decoding from observed LLRs.

    Per-bit penalty log2(1 + exp(+-LLR)) with the sign set by the true bit;
    raw value can be negative under a badly mismatched metric.
    """
    llrs = np.asarray(llrs, dtype=float)
    bits = np.asarray(bits)
    if llrs.shape != bits.shape or llrs.ndim != 2:
        raise ValueError("llrs and bits must be matching N x m matrices")
    if not np.all(np.isfinite(llrs)):
        raise ValueError("llrs must be finite")
    m = llrs.shape[1]
    sign = 1.0 - 2.0 * bits
    penalty = np.logaddexp(0.0, sign * llrs) / math.log(2.0)
    return float(m - penalty.sum() / llrs.shape[0])


def scheme_symbol_rate(scheme: str) -> float:
    if scheme not in SCHEME_SPS:
        raise ValueError(f"unknown scheme {scheme!r}")
    return SIM_SAMPLE_RATE_HZ / SCHEME_SPS[scheme]


def snr_calibrate(scheme: str, target_snr_db: float) -> float:
    """Per-sample complex noise variance hitting the requested baseline SNR.

    The narrowband scheme transmits unit symbol energy through a unit-energy
    filter, so its symbol SNR equals 1/sigma_n2; wideband schemes keep the
    same noise floor and carry whatever power their mask fill allows.
    """
    if scheme not in SCHEME_SPS:
        raise ValueError(f"unknown scheme {scheme!r}")
    return float(10.0 ** (-target_snr_db / 10.0))


def wilson_interval(errors: int, n: int, z: float = 1.959963984540054):
    """95% score interval for an error count out of n trials."""
    if n <= 0 or errors < 0 or errors > n:
        raise ValueError("need 0 <= errors <= n with n > 0")
    p = errors / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if errors == 0 else max(0.0, center - half)
    hi = 1.0 if errors == n else min(1.0, center + half)
    return lo, hi


def residual_variance(z, constellation: Constellation, indices=None) -> float:
    """Decision-directed estimate of the post-equalization noise variance."""
    z = np.asarray(z, dtype=complex)
    if z.size == 0:
        raise ValueError("empty sample stream")
    if indices is None:
        indices = nearest_indices(constellation, z)
    ref = constellation.points[np.asarray(indices)]
    return float(np.mean(np.abs(z - ref) ** 2))
