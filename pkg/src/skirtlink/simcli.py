"""Monte-Carlo sweep orchestration and the command-line front end.

A scenario fixes one pulse scheme and one equalization chain, then sweeps
constellation sizes and SNR points over random channel draws. Each draw runs
the full sample-rate chain: precode, shape, channel, phase noise, noise,
front end, equalize, compensate, measure. Results land in a CSV plus a JSON
manifest that reproduces the run byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import __version__
from .equalize import (_dfe_design, _le_design, dfe_detect_anchored, modulo,
                       thp_filters_for, thp_precode)
from .link import (RUMMLER_DEPTH_MEAN_DB, SCHEME_SPS, PnModel,
                   aggregate_response, channel_pass, flat_channel,
                   gen_rummler_channel, gen_wiener_pn, make_constellation,
                   make_frame, nearest_indices, pn_variance_from_dbc,
                   receive_front_end, transmit)
from .metrics import (CSV_HEADER, TrialResult, air, bit_llrs,
                      residual_variance, scheme_symbol_rate, ser,
                      snr_calibrate, wilson_interval)
from .phasesync import (build_phase_trellis, effective_pilot_prior,
                        run_thp_bcjr, run_thp_dpll)
from .spectral import (FilterTaps, design_ssf, load_taps_csv,
                       mask_compliance_margin_db, mask_from_json, rrc_taps,
                       save_taps_csv, seven_segment_mask, truncated_rrc_taps,
                       mask_fill_scale)

SCHEMES = ("rrc", "ssf", "rrc-wide")
EQUALIZERS = ("le", "dfe", "thp", "thp-joint")
PN_COMPS = ("none", "dpll", "bcjr")

TAIL_GUARD = 200


@dataclass
class ScenarioConfig:
    """Declarative description of one sweep."""

    scheme: str = "ssf"
    equalizer: str = "thp"
    pn_comp: str = "none"
    M: tuple = (1024,)
    snr_db: tuple = (50.0,)
    n_symbols: int = 100000
    n_channels: int = 100
    d_pilot: int = 50
    pn_level_dbc: float = -90.0
    pn_offset_hz: float = 100e3
    master_seed: int = 12345
    n_train: int = 500
    dpll_gain: float = 0.05
    k_phi: int = 101
    span_factor: float = 3.5
    pilot_window: float = 0.1
    genie_pilots: bool = False
    awgn_only: bool = False
    ff_len: int = 129
    fb_len: int = 64
    channel_le_len: int = 31
    fixed_channels: tuple = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.equalizer not in EQUALIZERS:
            raise ValueError(f"unknown equalizer {self.equalizer!r}")
        if self.pn_comp not in PN_COMPS:
            raise ValueError(f"unknown pn compensator {self.pn_comp!r}")
        if self.equalizer == "dfe" and self.pn_comp != "none":
            raise ValueError("decision-feedback detection does not support phase tracking")
        if self.n_symbols < 10000:
            raise ValueError("n_symbols must be >= 1e4 for stable error counts")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.pn_comp != "none" and self.d_pilot < 2:
            raise ValueError("phase compensation needs a pilot period >= 2")
        self.M = tuple(int(m) for m in self.M)
        self.snr_db = tuple(float(s) for s in self.snr_db)
        if self.fixed_channels is not None:
            self.fixed_channels = tuple(
                (float(d), float(f)) for d, f in self.fixed_channels)
            if len(self.fixed_channels) != self.n_channels:
                raise ValueError("fixed_channels length must equal n_channels")

    @classmethod
    def from_json(cls, source) -> "ScenarioConfig":
        if isinstance(source, dict):
            doc = source
        else:
            with open(source) as fh:
                doc = json.load(fh)
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["M"] = list(self.M)
        d["snr_db"] = list(self.snr_db)
        if self.fixed_channels is not None:
            d["fixed_channels"] = [list(p) for p in self.fixed_channels]
        return d


@dataclass
class _SchemeAssets:
    shaping: FilterTaps
    aaf: FilterTaps
    g_tr: np.ndarray
    g_delay: int
    sps: int
    alpha: float


@lru_cache(maxsize=None)
def _scheme_assets(scheme: str) -> _SchemeAssets:
    """Shaping and receive filters at mask-filling transmit scale."""
    mask = seven_segment_mask()
    sps = SCHEME_SPS[scheme]
    if scheme == "rrc":
        taps = rrc_taps(0.15, 32, 4)
    elif scheme == "ssf":
        taps = design_ssf(mask, num_taps=257)
    else:
        # short truncation spills pulse energy into the skirts; the
        # pre-equalizer absorbs the resulting ISI
        taps = truncated_rrc_taps(0.15, 16, 2)
    alpha = mask_fill_scale(taps, mask, sps)
    aaf = rrc_taps(0.15, 32, sps)
    scaled = FilterTaps(alpha * taps.coeffs, sps, taps.symmetric)
    g, delay, _ = aggregate_response(scaled.coeffs, np.array([1.0]),
                                     aaf.coeffs, sps)
    return _SchemeAssets(scaled, aaf, g, delay, sps, alpha)


def max_data_rate_mbps(scheme: str, M: int) -> float:
    """Uncoded ceiling: bits per symbol times the scheme symbol rate."""
    return math.log2(M) * scheme_symbol_rate(scheme) / 1e6


def _van_der_corput(i: int) -> float:
    v, denom = 0.0, 1.0
    while i:
        denom *= 2.0
        v += (i & 1) / denom
        i >>= 1
    return v


def stratified_rummler_draws(n: int):
    """Deterministic fading realizations covering the draw distribution.

    Depths sit at the quantiles of the exponential notch-depth statistic and
    frequencies follow a base-2 low-discrepancy sequence across the band, so
    a small pooled set estimates the population average without the draw-mix
    variance of a random seed.  Returns n (depth_db, notch_freq) pairs.
    """
    if n < 1:
        raise ValueError("need at least one draw")
    out = []
    for i in range(n):
        u = (i + 0.5) / n
        depth = RUMMLER_DEPTH_MEAN_DB * math.log1p(-u) # quantile, negative
        freq = -0.5 + _van_der_corput(i + 1)
        out.append((depth, freq))
    return tuple(out)


def _measure_mask(frame, n_train: int) -> np.ndarray:
    mask = frame.data_mask.copy()
    mask[:n_train] = False
    if mask.size > TAIL_GUARD:
        mask[-TAIL_GUARD:] = False
    return mask


def _run_draw(cfg: ScenarioConfig, M: int, snr_db: float, keys) -> dict:
    """Simulate one channel draw end to end and measure SER and rate."""
    ss = np.random.SeedSequence(cfg.master_seed, spawn_key=tuple(keys))
    rng_ch, rng_frame, rng_noise, rng_pn, rng_prior = \
        (np.random.default_rng(s) for s in ss.spawn(5))
    assets = _scheme_assets(cfg.scheme)
    c = make_constellation(M)
    sigma_n2 = snr_calibrate(cfg.scheme, snr_db)
    if cfg.awgn_only:
        ch = flat_channel()
    elif cfg.fixed_channels is not None:
        ch = gen_rummler_channel(*cfg.fixed_channels[keys[2]])
    else:
        ch = gen_rummler_channel(rng=rng_ch)
    h_a, d_sym, phase = aggregate_response(assets.shaping.coeffs, ch.taps,
                                           assets.aaf.coeffs, assets.sps)
    n = cfg.n_symbols
    d_pilot = cfg.d_pilot if cfg.pn_comp != "none" else 0
    frame = make_frame(c, n, rng_frame, d_pilot=d_pilot)

    joint = cfg.equalizer == "thp-joint"
    precode_d = None
    eqs = None
    if cfg.equalizer in ("thp", "thp-joint"):
        target = h_a if joint else assets.g_tr
        eqs = thp_filters_for(target, sigma_n2, cfg.ff_len, cfg.fb_len)
        tx_syms, precode_d = thp_precode(frame.symbols, eqs.b_ht.coeffs,
                                         c.delta)
    else:
        tx_syms = frame.symbols

    wave = transmit(tx_syms, assets.shaping)
    pn_on = cfg.pn_comp != "none"
    pn_samples = None
    if pn_on:
        t_sym = 1.0 / scheme_symbol_rate(cfg.scheme)
        sigma_psi2 = pn_variance_from_dbc(cfg.pn_level_dbc, cfg.pn_offset_hz,
                                          t_sym)
        n_pn = wave.size // assets.sps + 2
        pn_sym = gen_wiener_pn(PnModel(sigma_psi2), n_pn, rng=rng_pn)
        pn_samples = np.repeat(pn_sym, assets.sps)
    else:
        sigma_psi2 = 0.0
    y = channel_pass(wave, ch, pn_samples, sigma_n2, rng_noise)
    z = receive_front_end(y, assets.aaf, assets.sps, timing_offset=phase)[d_sym:]

    # equalization down to one complex sample per symbol, bias removed;
    # receiver-side filters (le, dfe) adapt to the aggregate channel, while
    # the static transmit precoder (thp) pairs its fixed pulse feedforward
    # with a channel LE targeting the pulse cascade
    fbf = None
    if cfg.equalizer == "le":
        w, mse, d = _le_design(h_a, sigma_n2, cfg.ff_len, None)
        v = np.convolve(z, w.coeffs)[d:d + n] / (1.0 - mse)
        metric_var = mse
    elif cfg.equalizer == "dfe":
        fff_t, fbf, mse, d = _dfe_design(h_a, sigma_n2, cfg.ff_len,
                                         cfg.fb_len)
        v = np.convolve(z, fff_t.coeffs)[d:d + n] / (1.0 - mse)
        metric_var = mse
    elif joint:
        v = np.convolve(z, eqs.w_ht.coeffs)
        v = v[eqs.decision_delay:eqs.decision_delay + n] / eqs.bias
        metric_var = eqs.mse
    else:
        w_hc, _, d1 = _le_design(h_a, sigma_n2, cfg.channel_le_len, None,
                                 target=assets.g_tr)
        casc = np.convolve(np.convolve(h_a, w_hc.coeffs), eqs.w_ht.coeffs)
        d_tot = d1 + eqs.decision_delay
        gain = casc[d_tot]
        v = np.convolve(np.convolve(z, w_hc.coeffs), eqs.w_ht.coeffs)
        v = v[d_tot:d_tot + n] / gain
        metric_var = eqs.mse

    delta = c.delta if cfg.equalizer in ("thp", "thp-joint") else None

    # phase compensation and symbol decisions
    genie_u = None
    if cfg.genie_pilots and delta is not None and d_pilot:
        u_true = frame.symbols + precode_d
        genie_u = u_true[frame.pilot_positions]
    if cfg.equalizer == "dfe":
        dec, fold = dfe_detect_anchored(v, fbf, c, c.points[frame.indices],
                                        cfg.d_pilot)
        phi_hat = np.zeros(n)
    elif cfg.pn_comp == "none":
        fold = modulo(v, delta) if delta is not None else v
        dec = nearest_indices(c, fold)
        phi_hat = np.zeros(n)
    elif cfg.pn_comp == "dpll":
        res = run_thp_dpll(v, frame, c, delta=delta, gain=cfg.dpll_gain,
                           n_train=cfg.n_train, genie_u=genie_u)
        dec, phi_hat = res.decisions, res.phi_hat
        vr = v * np.exp(-1j * phi_hat)
        fold = modulo(vr, delta) if delta is not None else vr
    else:
        trellis = build_phase_trellis(sigma_psi2, cfg.d_pilot, cfg.k_phi,
                                      cfg.span_factor)
        prior = None
        if delta is not None and genie_u is None:
            prior = effective_pilot_prior(frame.pilot_value, eqs.b_ht.coeffs,
                                          c.delta, 100000, rng_prior)
        res = run_thp_bcjr(v, frame, c, trellis, prior, max(metric_var, 1e-12),
                           delta=delta, pilot_window=cfg.pilot_window,
                           genie_u=genie_u)
        dec, phi_hat = res.decisions, res.phi_hat
        vr = v * np.exp(-1j * phi_hat)
        fold = modulo(vr, delta) if delta is not None else vr

    mask = _measure_mask(frame, cfg.n_train if pn_on else 0)
    n_meas = int(mask.sum())
    errors = int(np.sum(dec[mask] != frame.indices[mask]))
    sigma_llr = residual_variance(fold[mask], c, dec[mask])
    bits = c.labels[frame.indices[mask]]
    raw_air = air(bit_llrs(fold[mask], c, max(sigma_llr, 1e-12)), bits)
    return {"errors": errors, "n": n_meas, "air_raw": raw_air}


def _draw_task(args):
    cfg_dict, M, snr_db, keys = args
    cfg = ScenarioConfig(**cfg_dict)
    try:
        out = _run_draw(cfg, M, snr_db, keys)
        return keys, out, None
    except Exception as exc:  # noqa: BLE001 - sweep must survive bad points
        return keys, None, f"{type(exc).__name__}: {exc}"


def run_scenario(cfg: ScenarioConfig, threads: int = 1, log=sys.stderr):
    """Execute the sweep and aggregate one result row per (M, SNR) point."""
    tasks = []
    for mi, M in enumerate(cfg.M):
        for si, snr in enumerate(cfg.snr_db):
            for di in range(cfg.n_channels):
                tasks.append((cfg.to_dict(), M, snr, (mi, si, di)))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_draw_task, tasks))
    else:
        raw = [_draw_task(t) for t in tasks]
    by_point = {}
    for keys, out, err in raw:
        mi, si, di = keys
        if err is not None:
            print(f"point M={cfg.M[mi]} snr={cfg.snr_db[si]} draw={di} "
                  f"failed: {err}", file=log)
            continue
        by_point.setdefault((mi, si), []).append(out)
    results = []
    for mi, M in enumerate(cfg.M):
        for si, snr in enumerate(cfg.snr_db):
            draws = by_point.get((mi, si))
            if not draws:
                print(f"point M={M} snr={snr} produced no draws", file=log)
                continue
            errors = sum(d["errors"] for d in draws)
            total = sum(d["n"] for d in draws)
            mean_air = float(np.mean([d["air_raw"] for d in draws]))
            m_bits = math.log2(M)
            bpcu = min(max(mean_air, 0.0), m_bits)
            lo, hi = wilson_interval(errors, total)
            results.append(TrialResult(
                cfg.scheme, M, snr, errors / total, bpcu,
                bpcu * scheme_symbol_rate(cfg.scheme) / 1e6, total,
                cfg.master_seed, lo, hi))
    return results


def air_envelope(results):
    """Per-SNR maximum rate over constellation sizes: list of
    (snr_db, best_M, air_mbps)."""
    by_snr = {}
    for r in results:
        cur = by_snr.get(r.snr_db)
        if cur is None or r.air_mbps > cur.air_mbps:
            by_snr[r.snr_db] = r
    return [(s, by_snr[s].M, by_snr[s].air_mbps) for s in sorted(by_snr)]


def emit_results(results, out_dir, cfg: ScenarioConfig = None) -> dict:
    """Write results.csv and manifest.json; returns the written paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in results:
            writer.writerow(r.to_row())
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "n_results": len(results),
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"csv": csv_path, "manifest": manifest_path}


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.from_json(args.config)
    if args.seed is not None:
        doc = cfg.to_dict()
        doc["master_seed"] = args.seed
        cfg = ScenarioConfig(**doc)
    results = run_scenario(cfg, threads=args.threads)
    paths = emit_results(results, args.out, cfg)
    print(f"wrote {paths['csv']} ({len(results)} points)")
    return 0


def _cmd_design_filter(args) -> int:
    mask = seven_segment_mask() if args.mask == "default" \
        else mask_from_json(args.mask)
    taps = design_ssf(mask, num_taps=args.taps)
    save_taps_csv(taps, args.out)
    margin, f_worst = mask_compliance_margin_db(taps, mask)
    print(f"wrote {args.out}; worst margin {margin:+.4f} dB at f={f_worst:.4f}")
    return 0


def _cmd_validate_mask(args) -> int:
    mask = seven_segment_mask() if args.mask == "default" \
        else mask_from_json(args.mask)
    taps = load_taps_csv(args.taps)
    f = mask.grid_freqs()
    n_idx = np.arange(len(taps.coeffs))
    mag = np.abs(np.exp(-2j * np.pi * np.outer(f, n_idx)) @ taps.coeffs)
    grid_violation = float(np.max(mag - mask.level_linear(f)))
    margin_db, f_worst = mask_compliance_margin_db(taps, mask)
    ok = grid_violation <= 1e-9 and margin_db <= 0.05
    verdict = "COMPLIANT" if ok else "VIOLATION"
    print(f"{verdict}: design-grid excess {grid_violation:.3e} linear, "
          f"dense-grid margin {margin_db:+.4f} dB at f={f_worst:.4f}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skirtlink",
        description="Link-level simulator for mask-filling wideband transmission")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a sweep from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_design = sub.add_parser("design-filter",
                              help="design a mask-filling pulse and save taps")
    p_design.add_argument("--mask", default="default")
    p_design.add_argument("--taps", type=int, default=257)
    p_design.add_argument("--out", required=True)
    p_design.set_defaults(func=_cmd_design_filter)

    p_val = sub.add_parser("validate-mask",
                           help="check saved taps against a spectral mask")
    p_val.add_argument("--taps", required=True)
    p_val.add_argument("--mask", default="default")
    p_val.set_defaults(func=_cmd_validate_mask)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
