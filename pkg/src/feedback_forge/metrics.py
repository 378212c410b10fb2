"""Howling detection (PTPR), SNR scoring and gain/delay sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .loop import LoopConfig, LoopRun, Passthrough, run_controlled_loop
from .signals import StftConfig, snr_db, stft

log = logging.getLogger(__name__)

P0_DB = 35.0
PTPR_FLOOR_DB = -120.0
WARMUP_S = 0.25

CSV_COLUMNS = ["enhancer", "axis", "value", "snr_db_mean", "snr_db_std", "howl_pct_mean",
               "howl_pct_std", "ptpr_max_db", "n_sources", "warmup_s"]


def ptpr_frames(spec, p0_db: float = P0_DB) -> np.ndarray:
    """Per-frame 10 log10(max_k |Y(k, l)|^2 / P0) in dB, floored at -120 dB.

    The candidate howling component of each frame is its strongest bin.
    """
    bins = spec.bins if hasattr(spec, "bins") else np.asarray(spec)
    if bins.ndim == 3:
        if bins.shape[0] != 1:
            raise ValueError("PTPR needs a single-channel spectrogram")
        bins = bins[0]
    peak = np.max(np.abs(bins) ** 2, axis=-1)
    out = np.full(peak.shape, PTPR_FLOOR_DB)
    live = peak > 0
    out[live] = 10.0 * np.log10(peak[live]) - p0_db
    return np.maximum(out, PTPR_FLOOR_DB)


def first_counted_frame(warmup_s: float, fs: int, hop: int) -> int:
    """First frame whose start time is at or after the warmup."""
    return int(math.ceil(warmup_s * fs / hop - 1e-9))


def howling_incidence(ptpr_series, warmup_s: float = WARMUP_S, fs: int = 16000,
                      hop: int = 256) -> float:
    """Percentage of post-warmup frames with PTPR > 0 dB."""
    x = np.asarray(ptpr_series, dtype=float)[first_counted_frame(warmup_s, fs, hop):]
    if x.size == 0:
        raise ValueError("no frames after warmup")
    return 100.0 * np.count_nonzero(x > 0.0) / x.size


@dataclass
class MetricsReport:
    snr_db: float
    howling_incidence_pct: float
    ptpr_max_db: float
    gain_db: float
    delay_ms: float
    enhancer: str
    warmup_s: float
    ptpr_signal: str = "speaker"

    def __post_init__(self):
        if not 0.0 <= self.howling_incidence_pct <= 100.0:
            raise ValueError("incidence outside [0, 100]")
        if not all(math.isfinite(v) for v in (self.snr_db, self.ptpr_max_db)):
            raise ValueError("non-finite metric")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_run(run: LoopRun, target, stft_cfg: StftConfig = StftConfig(),
                 warmup_s: float = WARMUP_S, p0_db: float = P0_DB,
                 ptpr_signal: str = "speaker") -> MetricsReport:
    """Score a loop run.

    ``run.enhanced`` is already latency-compensated, so it lines up with the
    target sample for sample; the last ``run.latency`` samples are never
    produced and are left out of the SNR.  PTPR is taken on the loudspeaker
    signal (or the enhanced signal with ``ptpr_signal="enhanced"``).
    """
    s = np.asarray(getattr(target, "samples", target), dtype=float)
    e = run.enhanced.samples
    if s.size != e.size:
        raise ValueError(f"length mismatch after alignment: {s.size} vs {e.size}")
    n = e.size - run.latency
    snr = snr_db(s[:n], e[:n])
    if ptpr_signal == "speaker":
        sig = run.speaker_out
    elif ptpr_signal == "enhanced":
        sig = run.enhanced
    else:
        raise ValueError(f"unknown ptpr_signal {ptpr_signal!r}")
    ptpr = ptpr_frames(stft(sig, stft_cfg), p0_db)
    fs = run.config.sample_rate_hz
    inc = howling_incidence(ptpr, warmup_s, fs, stft_cfg.hop)
    post = ptpr[first_counted_frame(warmup_s, fs, stft_cfg.hop):]
    cfg = run.config
    gain = cfg.gain_db if cfg.gain_linear is None else 20 * math.log10(max(cfg.gain_linear, 1e-300))
    return MetricsReport(snr, inc, float(post.max()), gain, cfg.delay_ms, run.enhancer,
                         warmup_s, ptpr_signal)


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepCell:
    enhancer: str
    axis: str
    value: float
    reports: list
    errors: list

    def row(self, warmup_s: float) -> dict:
        snr = np.array([r.snr_db for r in self.reports])
        howl = np.array([r.howling_incidence_pct for r in self.reports])
        ok = len(self.reports) > 0
        return {
            "enhancer": self.enhancer,
            "axis": self.axis,
            "value": self.value,
            "snr_db_mean": float(snr.mean()) if ok else math.nan,
            "snr_db_std": float(snr.std()) if ok else math.nan,
            "howl_pct_mean": float(howl.mean()) if ok else math.nan,
            "howl_pct_std": float(howl.std()) if ok else math.nan,
            "ptpr_max_db": max(r.ptpr_max_db for r in self.reports) if ok else math.nan,
            "n_sources": len(self.reports),
            "warmup_s": warmup_s,
        }


def sweep(axis: str, values, base: LoopConfig, enhancers: dict, scenes: list,
          stft_cfg: StftConfig = StftConfig(), warmup_s: float = WARMUP_S,
          ptpr_signal: str = "speaker", n_jobs: int = 1) -> list:
    """Evaluate every (enhancer, value) cell over all scenes.

    ``enhancers`` maps a name to a factory ``f(scene) -> Enhancer | None``
    (None runs the default system).  Each scene needs ``images``,
    ``target`` and ``paths``; gain/delay/clip come from ``base`` with the
    swept axis overridden.  Failures are recorded per cell and the sweep
    carries on.
    """
    if axis not in ("gain_db", "delay_ms"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values or not scenes:
        raise ValueError("sweep needs values and scenes")
    jobs = [(name, factory, float(v)) for name, factory in enhancers.items() for v in values]

    def run_cell(job):
        name, factory, v = job
        cell = SweepCell(name, axis, v, [], [])
        for k, scene in enumerate(scenes):
            try:
                if axis == "delay_ms":
                    D = int(round(v * base.sample_rate_hz / 1000.0))
                    cfg = replace(base, delay_ms=v, block_size=min(base.block_size, max(D, 1)))
                else:
                    cfg = replace(base, gain_db=v, gain_linear=None)
                enh = factory(scene)
                if enh is None:
                    enh = Passthrough(cfg.ref_mic)
                run = run_controlled_loop(scene.images, scene.paths, cfg, enh)
                run.enhancer = name
                cell.reports.append(evaluate_run(run, scene.target, stft_cfg, warmup_s,
                                                 ptpr_signal=ptpr_signal))
            except (ValueError, ArithmeticError, IndexError, np.linalg.LinAlgError) as err:
                log.warning("sweep cell %s %s=%s scene %d failed: %s", name, axis, v, k, err)
                cell.errors.append(f"scene {k}: {err}")
        return cell

    if n_jobs > 1:
        # cells are independent; map() keeps the result order fixed
        with ThreadPoolExecutor(n_jobs) as ex:
            return list(ex.map(run_cell, jobs))
    return [run_cell(j) for j in jobs]


def sweep_rows(cells, warmup_s: float = WARMUP_S) -> list:
    return [c.row(warmup_s) for c in cells]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def sweep_svg(rows, metric: str = "howl_pct_mean", width: int = 480, height: int = 320) -> str:
    """Self-contained SVG line plot of one metric against the swept value."""
    series = {}
    for r in rows:
        if not math.isnan(r[metric]):
            series.setdefault(r["enhancer"], []).append((r["value"], r[metric]))
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in series.values() for _, y in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
    ml, mr, mt, mb = 50, 110, 20, 40

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    axis = rows[0]["axis"] if rows else ""
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
           f'<text x="{(width - mr + ml) / 2:.1f}" y="{height - 8}" text-anchor="middle" '
           f'font-size="12">{axis}</text>',
           f'<text x="12" y="{mt + 10}" font-size="12">{metric}</text>',
           f'<text x="{ml - 4}" y="{py(y0):.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
           f'<text x="{ml - 4}" y="{py(y1):.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
           f'<text x="{px(x0):.1f}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x0:.3g}</text>',
           f'<text x="{px(x1):.1f}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>']
    for k, (name, pts) in enumerate(series.items()):
        col = colors[k % len(colors)]
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{path}"/>')
        out.append(f'<text x="{width - mr + 8}" y="{mt + 14 * (k + 1)}" fill="{col}" '
                   f'font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
