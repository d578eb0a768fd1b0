"""QAM mapping, pulse shaping, Rummler fading, Wiener phase noise, and AWGN.

Everything here works at two rates: an oversampled simulation rate shared by
all schemes, and the per-scheme symbol rate.  Filters carry their own
samples-per-symbol tag so rate mismatches fail loudly instead of silently
producing a wrong spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import upfirdn

from .spectral import FilterTaps

# common simulation rate; symbol rates follow from the per-scheme oversampling
SIM_SAMPLE_RATE_HZ = 102.4e6
SCHEME_SPS = {"rrc": 4, "ssf": 2, "rrc-wide": 2}


def scheme_symbol_rate_hz(scheme: str) -> float:
    return SIM_SAMPLE_RATE_HZ / SCHEME_SPS[scheme]


RUMMLER_ECHO_DELAY_S = 6.3e-9
# notch statistics used when a realization is drawn at random: depth in dB
# below the flat level follows the exponential fade statistic of the two-ray
# measurement campaigns (deep notches are rare), frequency uniform across the
# complex baseband
RUMMLER_DEPTH_MEAN_DB = 3.8
RUMMLER_DEPTH_MAX_DB = 40.0
RUMMLER_NOTCH_FREQ_RANGE = (-0.5, 0.5)


# ---------------------------------------------------------------------------
# constellations
# ---------------------------------------------------------------------------

def gray_code(n: int) -> int:
    return n ^ (n >> 1)


@dataclass
class Constellation:
    """Unit-energy square Gray-labeled QAM alphabet.

    labels[i] holds the m bits of point i, in-phase bits first.  delta is the
    modulo lattice period sqrt(M) * d_min used by the precoder.
    """

    M: int
    points: np.ndarray
    labels: np.ndarray
    d_min: float
    delta: float

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.M)))

    @property
    def side(self) -> int:
        return int(round(math.sqrt(self.M)))

    @property
    def scale(self) -> float:
        """Spacing from integer lattice to unit-energy points (d_min / 2)."""
        return self.d_min / 2.0


def make_constellation(M: int) -> Constellation:
    """Square M-QAM with per-axis Gray labels, normalized to unit average energy."""
    if M < 4 or M > 2 ** 16:
        raise ValueError(f"M={M} outside supported range 4..65536")
    side = int(round(math.sqrt(M)))
    if side * side != M or side & (side - 1):
        raise ValueError(f"M={M} is not square QAM (need M a power of 4)")
    scale = math.sqrt(3.0 / (2.0 * (M - 1)))
    levels = (2 * np.arange(side) - (side - 1)) * scale
    ii, qq = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ii, qq = ii.ravel(), qq.ravel()
    points = levels[ii] + 1j * levels[qq]
    half = side.bit_length() - 1
    labels = np.zeros((M, 2 * half), dtype=np.uint8)
    for axis, idx in enumerate((ii, qq)):
        g = np.array([gray_code(int(v)) for v in idx])
        for b in range(half):
            labels[:, axis * half + b] = (g >> (half - 1 - b)) & 1
    d_min = 2.0 * scale
    return Constellation(M, points, labels, d_min, side * d_min)


def nearest_indices(constellation: Constellation, r: np.ndarray) -> np.ndarray:
    """Minimum-distance hard decisions, separable per axis for square QAM."""
    side = constellation.side
    s = constellation.scale
    i = np.clip(np.rint((np.real(r) / s + side - 1) / 2.0), 0, side - 1)
    q = np.clip(np.rint((np.imag(r) / s + side - 1) / 2.0), 0, side - 1)
    return (i.astype(np.int64) * side + q.astype(np.int64))


def indices_to_bits(constellation: Constellation, idx: np.ndarray) -> np.ndarray:
    return constellation.labels[np.asarray(idx, dtype=np.int64)]


# ---------------------------------------------------------------------------
# phase noise
# ---------------------------------------------------------------------------

@dataclass
class PnModel:
    """Symbol-rate Wiener phase-noise process parameters."""

    sigma_psi2: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma_psi2 < 0:
            raise ValueError("sigma_psi2 must be non-negative")


def pn_variance_from_dbc(level_dbc_hz: float, f_offset: float,
                         T_symbol: float) -> float:
    """Increment variance of the random-walk phase from an SSB PN level.

    The level is read at f_offset on the 1/f^2 part of the oscillator PSD,
    which pins the white frequency-noise floor and hence the per-symbol
    phase-increment variance.
    """
    if f_offset <= 0 or T_symbol <= 0:
        raise ValueError("f_offset and T_symbol must be positive")
    return 10.0 ** (level_dbc_hz / 10.0) * 4.0 * math.pi ** 2 \
        * f_offset ** 2 * T_symbol


def gen_wiener_pn(model: PnModel, n: int, rng=None) -> np.ndarray:
    """Random-walk phase path of length n starting at exactly zero."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        rng = np.random.default_rng(model.seed)
    phi = np.zeros(n)
    if model.sigma_psi2 > 0 and n > 1:
        inc = rng.normal(0.0, math.sqrt(model.sigma_psi2), size=n - 1)
        phi[1:] = np.cumsum(inc)
    elif n > 1:
        # keep the stream position deterministic regardless of variance
        rng.normal(0.0, 1.0, size=n - 1)
    return phi


# ---------------------------------------------------------------------------
# channel
# ---------------------------------------------------------------------------

@dataclass
class ChannelRealization:
    """Discrete-time channel taps plus the notch parameters that made them."""

    taps: np.ndarray
    notch_depth_db: float
    notch_freq: float
    sigma_n2: float = 0.0

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=complex)
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("channel taps must be finite")
        if self.sigma_n2 < 0:
            raise ValueError("sigma_n2 must be non-negative")


def _fractional_delay(delay: float, length: int = 81, beta: float = 10.0):
    """Windowed-sinc fractional-delay filter centered on the integer midpoint."""
    center = (length - 1) // 2
    n = np.arange(length)
    h = np.sinc(n - center - delay)
    h *= np.kaiser(length, beta)
    return h, center


def gen_rummler_channel(depth_db: float = None, notch_freq: float = None,
                        rng=None) -> ChannelRealization:
    """Two-ray fading realization: flat path plus delayed echo forming a notch.

    The echo lags by a fixed 6.3 ns (a fraction of a sample at the simulation
    rate, realized by a windowed-sinc interpolator) and its strength b is set
    from the requested notch depth 20*log10(1-b).  Parameters left as None are
    drawn from the configured distributions using rng.  Taps are rescaled to
    unit energy.
    """
    if depth_db is None:
        if rng is None:
            raise ValueError("rng required when depth_db is not given")
        depth_db = -min(rng.exponential(RUMMLER_DEPTH_MEAN_DB),
                        RUMMLER_DEPTH_MAX_DB)
    if notch_freq is None:
        if rng is None:
            raise ValueError("rng required when notch_freq is not given")
        notch_freq = rng.uniform(*RUMMLER_NOTCH_FREQ_RANGE)
    if depth_db > 0:
        raise ValueError("notch depth must be <= 0 dB")
    b = 1.0 - 10.0 ** (depth_db / 20.0)
    tau_samples = RUMMLER_ECHO_DELAY_S * SIM_SAMPLE_RATE_HZ
    echo, center = _fractional_delay(tau_samples)
    taps = np.zeros(echo.size, dtype=complex)
    taps[center] = 1.0
    # echo phase puts the cancellation exactly at the requested notch frequency
    taps -= b * np.exp(2j * np.pi * notch_freq * tau_samples) * echo
    taps /= np.linalg.norm(taps)
    return ChannelRealization(taps, depth_db, notch_freq)


def flat_channel() -> ChannelRealization:
    return ChannelRealization(np.array([1.0 + 0.0j]), 0.0, 0.0)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass
class SymbolFrame:
    """Data symbols with periodic pilots already embedded.

    indices are the constellation point indices of every slot (pilots
    included); d_pilot = 0 means no pilots.
    """

    symbols: np.ndarray
    indices: np.ndarray
    d_pilot: int = 0
    pilot_value: complex = 0.0

    def __post_init__(self):
        if self.d_pilot and self.d_pilot < 2:
            raise ValueError("pilot period must be >= 2")

    @property
    def pilot_positions(self) -> np.ndarray:
        if not self.d_pilot:
            return np.zeros(0, dtype=np.int64)
        return np.arange(0, self.symbols.size, self.d_pilot, dtype=np.int64)

    @property
    def data_mask(self) -> np.ndarray:
        mask = np.ones(self.symbols.size, dtype=bool)
        mask[self.pilot_positions] = False
        return mask


def make_frame(constellation: Constellation, n_symbols: int, rng,
               d_pilot: int = 0, pilot_value: complex = None) -> SymbolFrame:
    """Uniform random data frame with an outer-ring pilot every d_pilot slots."""
    idx = rng.integers(0, constellation.M, size=n_symbols)
    if d_pilot:
        if d_pilot < 2:
            raise ValueError("pilot period must be >= 2")
        radii = np.abs(constellation.points)
        rmax = radii.max()
        if pilot_value is None:
            # deterministic choice: the first-quadrant corner point
            corner = np.argmax(np.real(constellation.points)
                               + np.imag(constellation.points))
            pilot_value = constellation.points[corner]
        p_idx = int(np.argmin(np.abs(constellation.points - pilot_value)))
        if abs(constellation.points[p_idx] - pilot_value) > 1e-12:
            raise ValueError("pilot_value is not a constellation point")
        if abs(abs(pilot_value) - rmax) > 1e-9:
            raise ValueError("pilot_value must sit on the outermost ring")
        idx[::d_pilot] = p_idx
    else:
        pilot_value = 0.0
    return SymbolFrame(constellation.points[idx], idx, d_pilot,
                       complex(pilot_value))


# ---------------------------------------------------------------------------
# waveform chain
# ---------------------------------------------------------------------------

def transmit(frame, shaping: FilterTaps, precoder=None) -> np.ndarray:
    """Upsample by the shaping filter's rate and convolve; precode first if given.

    precoder, when present, is a callable mapping the symbol sequence to the
    precoded sequence (run at symbol rate, before upsampling).
    """
    symbols = frame.symbols if isinstance(frame, SymbolFrame) else np.asarray(frame)
    sps = shaping.samples_per_symbol
    if sps != int(sps) or sps < 1:
        raise ValueError(f"shaping filter rate {sps} is not a positive integer")
    if precoder is not None:
        symbols = precoder(symbols)
    return upfirdn(shaping.coeffs, symbols.astype(complex), up=int(sps))


def channel_pass(waveform: np.ndarray, ch: ChannelRealization, pn,
                 sigma_n2: float, rng=None) -> np.ndarray:
    """Apply the linear channel, then the phase rotation, then white noise."""
    x = np.asarray(waveform, dtype=complex)
    y = np.convolve(x, ch.taps)
    if pn is not None:
        phi = np.asarray(pn, dtype=float)
        if phi.size < x.size:
            raise ValueError("phase-noise path shorter than the waveform")
        if phi.size < y.size:
            # hold the final phase across the convolution tail
            phi = np.concatenate([phi, np.full(y.size - phi.size, phi[-1])])
        y = y * np.exp(1j * phi[:y.size])
    if sigma_n2 > 0:
        if rng is None:
            raise ValueError("rng required when sigma_n2 > 0")
        noise = rng.normal(0.0, math.sqrt(sigma_n2 / 2.0), size=(y.size, 2))
        y = y + noise[:, 0] + 1j * noise[:, 1]
    return y


def receive_front_end(waveform: np.ndarray, aaf: FilterTaps, sps: int,
                      timing_offset: int = None) -> np.ndarray:
    """Anti-aliasing filter followed by decimation to symbol rate.

    With timing_offset=None the decimation phase with the most energy is
    used; otherwise the given phase (0 <= offset < sps) is taken as-is.
    """
    y = np.convolve(np.asarray(waveform, dtype=complex), aaf.coeffs)
    sps = int(sps)
    if timing_offset is None:
        energies = [np.sum(np.abs(y[p::sps]) ** 2) for p in range(sps)]
        timing_offset = int(np.argmax(energies))
    elif not 0 <= timing_offset < sps:
        raise ValueError(f"timing offset {timing_offset} out of range 0..{sps - 1}")
    return y[timing_offset::sps]


def aggregate_response(h_t: np.ndarray, h_c: np.ndarray, h_r: np.ndarray,
                       sps: int, phase: int = None, trim: float = 1e-8):
    """Symbol-rate aggregate of shaping, channel, and receive filters.

    Returns (taps, delay_symbols, phase): y_k = sum_m taps[m] * x_{k - delay - m}
    when the receiver decimates at the returned phase.  Leading and trailing
    taps below trim * peak are cut; delay counts the cut leading symbols.
    """
    cascade = np.convolve(np.convolve(np.asarray(h_t, dtype=complex),
                                      np.asarray(h_c, dtype=complex)),
                          np.asarray(h_r, dtype=complex))
    sps = int(sps)
    if phase is None:
        energies = [np.sum(np.abs(cascade[p::sps]) ** 2) for p in range(sps)]
        phase = int(np.argmax(energies))
    h_a = cascade[phase::sps]
    mag = np.abs(h_a)
    keep = mag >= trim * mag.max()
    first, last = np.argmax(keep), len(keep) - 1 - np.argmax(keep[::-1])
    return h_a[first:last + 1], int(first), phase
