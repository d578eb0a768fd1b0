"""Render figures from link-simulation CSV results.

Consumes only the simulator's documented artifacts: results.csv files with
columns (scheme, M, snr_db, ser, air_bpcu, air_mbps, n_symbols, seed,
ser_ci_lo, ser_ci_hi), filter tap files (one coefficient per line), and mask
JSON ({"corners": [...], "levels_db": [...]}, implicit 0 dB at f=0).  Output
is deterministic: fixed style file, Agg backend, pinned PNG metadata, so the
same inputs always produce identical bytes.
"""

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from importlib import resources

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__version__ = "0.1.0"

KINDS = ("mask", "ser", "air", "envelope")

# columns each kind reads from results.csv
REQUIRED_COLUMNS = {
    "ser": ("scheme", "M", "snr_db", "ser"),
    "air": ("scheme", "M", "snr_db", "air_bpcu"),
    "envelope": ("scheme", "M", "snr_db", "air_mbps"),
}

# shade the mask region sitting well below the passband
SKIRT_THRESHOLD_DB = -30.0

_STYLE = resources.files("skirtplots") / "skirt.mplstyle"
_METADATA = {"Software": f"skirtplots {__version__}"}


@dataclass(frozen=True)
class PlotSpec:
    """Declarative description of one figure."""

    kind: str
    output: str
    inputs: tuple = ()
    schemes: tuple = None
    m_values: tuple = None
    taps: str = None
    mask: str = None
    title: str = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")
        if not self.output:
            raise ValueError("output path is required")
        object.__setattr__(self, "inputs", tuple(self.inputs or ()))
        if self.schemes is not None:
            object.__setattr__(self, "schemes", tuple(self.schemes))
        if self.m_values is not None:
            object.__setattr__(self, "m_values",
                               tuple(int(m) for m in self.m_values))
        if self.kind == "mask":
            if not (self.taps and self.mask):
                raise ValueError("mask plot needs 'taps' and 'mask' paths")
        elif not self.inputs:
            raise ValueError(f"{self.kind} plot needs at least one input csv")

    @classmethod
    def from_json(cls, source) -> "PlotSpec":
        if isinstance(source, dict):
            doc = source
        else:
            with open(source) as fh:
                doc = json.load(fh)
        return cls(**doc)


def load_results(paths, required):
    """Rows from one or more results.csv files, schema-checked."""
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in required if c not in header]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            for rec in reader:
                rows.append({
                    "scheme": rec["scheme"],
                    "M": int(rec["M"]),
                    "snr_db": float(rec["snr_db"]),
                    **{c: float(rec[c]) for c in required
                       if c not in ("scheme", "M", "snr_db")},
                })
    return rows


def _filter_rows(rows, spec: PlotSpec):
    out = [r for r in rows
           if (spec.schemes is None or r["scheme"] in spec.schemes)
           and (spec.m_values is None or r["M"] in spec.m_values)]
    if not out:
        raise ValueError("empty series: no rows match the requested "
                         "scheme/M filters")
    return out


def _series(rows):
    """Rows grouped by (scheme, M), sorted for stable draw order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["M"]), []).append(r)
    per_scheme = {}
    for scheme, m in groups:
        per_scheme.setdefault(scheme, []).append(m)
    out = []
    for key in sorted(groups):
        scheme, m = key
        label = scheme if len(per_scheme[scheme]) == 1 else f"{scheme} M={m}"
        pts = sorted(groups[key], key=lambda r: r["snr_db"])
        out.append((label, pts))
    return out


def load_taps(path) -> np.ndarray:
    with open(path) as fh:
        vals = [float(line) for line in fh if line.strip()]
    if not vals:
        raise ValueError(f"{path}: no filter coefficients found")
    return np.asarray(vals)


def load_mask(path):
    """(corner_freqs, levels_db) arrays with the implicit (0, 0 dB) start."""
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("corners", "levels_db"):
        if key not in doc:
            raise ValueError(f"{path}: missing mask key {key!r}")
    f = np.concatenate([[0.0], np.asarray(doc["corners"], dtype=float)])
    lv = np.concatenate([[0.0], np.asarray(doc["levels_db"], dtype=float)])
    if f.size != lv.size:
        raise ValueError(f"{path}: corners and levels_db lengths differ")
    return f, lv


def _mask_figure(spec: PlotSpec):
    h = load_taps(spec.taps)
    fc, lv = load_mask(spec.mask)
    f = np.linspace(0.0, 0.5, 2001)
    resp = np.exp(-2j * np.pi * np.outer(f, np.arange(h.size))) @ h
    mag_db = 20.0 * np.log10(np.maximum(np.abs(resp), 1e-15))
    mag_db -= mag_db[0]
    mask_db = np.interp(f, fc, lv)

    fig, ax = plt.subplots()
    skirt = f[mask_db <= SKIRT_THRESHOLD_DB]
    if skirt.size:
        ax.axvspan(skirt[0], 0.5, color="0.88", zorder=0, label="skirt region")
    ax.plot(f, mask_db, "k--", label="mask")
    ax.plot(f, mag_db, label="filter response")
    ax.set_xlabel("normalized frequency (cycles/sample)")
    ax.set_ylabel("magnitude (dB)")
    ax.set_xlim(0.0, 0.5)
    ax.set_ylim(min(lv.min(), mag_db.min()) - 10.0, 5.0)
    ax.legend(loc="upper right")
    return fig


def _ser_figure(spec: PlotSpec):
    rows = _filter_rows(load_results(spec.inputs, REQUIRED_COLUMNS["ser"]),
                        spec)
    fig, ax = plt.subplots()
    for label, pts in _series(rows):
        x = [p["snr_db"] for p in pts if p["ser"] > 0.0]
        y = [p["ser"] for p in pts if p["ser"] > 0.0]
        if x:
            ax.semilogy(x, y, marker="o", label=label)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("symbol error rate")
    ax.legend(loc="lower left")
    return fig


def _air_figure(spec: PlotSpec):
    rows = _filter_rows(load_results(spec.inputs, REQUIRED_COLUMNS["air"]),
                        spec)
    fig, ax = plt.subplots()
    for label, pts in _series(rows):
        ax.plot([p["snr_db"] for p in pts], [p["air_bpcu"] for p in pts],
                marker="o", label=label)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("AIR (bit/channel use)")
    ax.legend(loc="lower right")
    return fig


def _envelope_figure(spec: PlotSpec):
    rows = _filter_rows(load_results(spec.inputs,
                                     REQUIRED_COLUMNS["envelope"]), spec)
    fig, ax = plt.subplots()
    by_scheme = {}
    for r in rows:
        by_scheme.setdefault(r["scheme"], []).append(r)
    for scheme in sorted(by_scheme):
        env = {}
        for r in by_scheme[scheme]:
            s = r["snr_db"]
            env[s] = max(env.get(s, 0.0), r["air_mbps"])
        snrs = sorted(env)
        ax.plot(snrs, [env[s] for s in snrs], marker="o", label=scheme)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("envelope rate (Mbit/s)")
    ax.legend(loc="lower right")
    return fig


_BUILDERS = {"mask": _mask_figure, "ser": _ser_figure, "air": _air_figure,
             "envelope": _envelope_figure}


def build_figure(spec: PlotSpec):
    """Figure object for the spec; callers own closing it."""
    with plt.style.context(str(_STYLE)):
        fig = _BUILDERS[spec.kind](spec)
        if spec.title:
            fig.axes[0].set_title(spec.title)
        fig.tight_layout()
    return fig


def render(spec: PlotSpec) -> str:
    """Write the figure to spec.output and return that path."""
    fig = build_figure(spec)
    try:
        fig.savefig(spec.output, metadata=_METADATA)
    finally:
        plt.close(fig)
    return spec.output


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skirtlink-plot",
        description="Render a figure described by a JSON plot spec")
    parser.add_argument("--spec", required=True, help="path to a PlotSpec JSON")
    args = parser.parse_args(argv)
    try:
        out = render(PlotSpec.from_json(args.spec))
    except (ValueError, OSError, KeyError, TypeError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
