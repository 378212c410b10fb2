"""Sample-accurate closed-loop simulation of the loudspeaker -> room -> mic loop.

Each block of B samples is produced in three steps::

    y[t]    = clip(G * e[t - (D - L)])          loudspeaker (same for all j)
    m_i[t]  = s_i[t] + sum_k hsum_i[k] y[t - k]  microphones
    e[block] = enhancer.process(m[:, block], y[block])

where ``e`` is the raw enhancer stream, L the enhancer's declared latency
and D the total loop delay, so y[t] = clip(G * s_hat[t - D]).  The default
system is the same engine with a pass-through enhancer on the reference mic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .room import FeedbackPathSet
from .signals import DEFAULT_FS, MonoSignal, MultiSignal, db_to_linear_gain, write_wav


class LoopConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    gain_db: float = 40.0
    delay_ms: float = 8.0
    clip_lo: float = -1000.0
    clip_hi: float = 1000.0
    block_size: int = 64
    ref_mic: int = 0
    sample_rate_hz: int = DEFAULT_FS
    # overrides gain_db when set; lets fixtures use an exact linear gain (or 0)
    gain_linear: float | None = None

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise LoopConfigError("clip_lo must be below clip_hi")
        if self.block_size < 1:
            raise LoopConfigError("block_size must be >= 1")
        if self.sample_rate_hz <= 0:
            raise LoopConfigError("sample_rate_hz must be positive")
        if self.gain_linear is None and not math.isfinite(self.gain_db):
            raise LoopConfigError("gain_db must be finite")
        if self.delay_samples < 1:
            raise LoopConfigError("non-causal configuration: loop delay below one sample")
        if self.delay_samples < self.block_size:
            raise LoopConfigError(
                f"non-causal configuration: delay {self.delay_samples} < block {self.block_size}")

    @property
    def delay_samples(self) -> int:
        return int(round(self.delay_ms * self.sample_rate_hz / 1000.0))

    @property
    def gain(self) -> float:
        if self.gain_linear is not None:
            return float(self.gain_linear)
        return db_to_linear_gain(self.gain_db)

    def speaker(self, x):
        return np.clip(self.gain * x, self.clip_lo, self.clip_hi)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# enhancers


class Enhancer:
    """Causal multichannel-in, single-channel-out block processor.

    ``reset`` is called once before a run; ``process`` then receives
    consecutive (N, B) mic blocks together with the loudspeaker block that
    produced their feedback and returns B output samples.  The output
    stream may lag the input by ``latency(B)`` samples.
    """

    name = "enhancer"

    def latency(self, block_size: int) -> int:
        return 0

    def reset(self, n_mics: int, block_size: int) -> None:
        pass

    def process(self, mics: np.ndarray, speaker: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Passthrough(Enhancer):
    name = "passthrough"

    def __init__(self, ref_mic: int = 0):
        if ref_mic < 0:
            raise IndexError(f"bad channel index {ref_mic}")
        self.ref_mic = ref_mic

    def reset(self, n_mics, block_size):
        if self.ref_mic >= n_mics:
            raise IndexError(f"bad channel index {self.ref_mic} for {n_mics} mics")

    def process(self, mics, speaker):
        return mics[self.ref_mic].copy()


def make_passthrough(ref_mic: int = 0) -> Passthrough:
    return Passthrough(ref_mic)


class ZeroEnhancer(Enhancer):
    name = "zero"

    def process(self, mics, speaker):
        return np.zeros(mics.shape[1])


class OracleEnhancer(Enhancer):
    """Emits the true target signal; the ideal controller."""

    name = "oracle"

    def __init__(self, target):
        self.target = np.asarray(getattr(target, "samples", target), dtype=float)
        self._t = 0

    def reset(self, n_mics, block_size):
        self._t = 0

    def process(self, mics, speaker):
        b = mics.shape[1]
        out = np.zeros(b)
        seg = self.target[self._t : self._t + b]
        out[: seg.size] = seg
        self._t += b
        return out


# --------------------------------------------------------------------------
# engine


def feedback_block(taps: np.ndarray, y: np.ndarray, t0: int, t1: int) -> np.ndarray:
    """Feedback sum_k taps[k, i] * y[t - k] for t in [t0, t1), shape (N, t1 - t0).

    ``taps`` is (L_h, N).  The reduction runs over the leading axis so every
    output sample is accumulated in ascending tap order no matter how the
    time axis is blocked; results are bit-identical for any block split.
    """
    lh, n = taps.shape
    b = t1 - t0
    pad = 1 if n * b == 1 else 0  # a (L, 1, 1) product would be summed pairwise
    lo = t0 - lh + 1
    seg = y[max(lo, 0) : t1 + pad] if t1 + pad <= y.size else np.concatenate(
        [y[max(lo, 0) : t1], np.zeros(t1 + pad - y.size)])
    if lo < 0:
        seg = np.concatenate([np.zeros(-lo), seg])
    win = sliding_window_view(seg, b + pad)[::-1]
    out = (taps[:, :, None] * win[:, None, :]).sum(axis=0)
    return out[:, :b]


def feedback_signal(taps: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Whole-signal version of :func:`feedback_block`, same bits."""
    out = np.zeros((taps.shape[1], y.size))
    if not taps.any():
        return out
    for t0 in range(0, y.size, chunk):
        t1 = min(t0 + chunk, y.size)
        out[:, t0:t1] = feedback_block(taps, y, t0, t1)
    return out


def as_images(source, n_mics: int) -> np.ndarray:
    """Source as per-mic images (N, T); a mono source is shared by all mics."""
    if isinstance(source, MultiSignal):
        x = source.channels
    elif isinstance(source, MonoSignal):
        x = source.samples[None, :]
    else:
        x = np.atleast_2d(np.asarray(source, dtype=float))
    if x.shape[0] == 1 and n_mics > 1:
        x = np.repeat(x, n_mics, axis=0)
    if x.shape[0] != n_mics:
        raise ValueError(f"source has {x.shape[0]} images for {n_mics} mics")
    return x


@dataclass
class LoopRun:
    mics: MultiSignal
    speaker_out: MonoSignal
    enhanced: MonoSignal
    config: LoopConfig
    paths_id: str
    enhancer: str = "none"
    latency: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "paths_sha256": self.paths_id,
            "enhancer": self.enhancer,
            "latency_samples": self.latency,
            "n_samples": len(self.enhanced),
            **self.meta,
        }


def run_controlled_loop(source, paths: FeedbackPathSet, cfg: LoopConfig,
                        enhancer: Enhancer, paths_id: str | None = None) -> LoopRun:
    if paths.sample_rate_hz != cfg.sample_rate_hz:
        raise LoopConfigError("paths and loop config disagree on sample rate")
    s = as_images(source, paths.n_mics)
    n_mics, T = s.shape
    if T == 0:
        raise ValueError("source is empty")
    B = cfg.block_size
    D = cfg.delay_samples
    L = enhancer.latency(B)
    if L > D:
        raise LoopConfigError(f"latency exceeds loop delay ({L} > {D} samples)")
    lag = D - L
    if lag < B:
        raise LoopConfigError(
            f"non-causal configuration: delay {D} - latency {L} < block {B}")
    if not 0 <= cfg.ref_mic < n_mics:
        raise IndexError(f"ref_mic {cfg.ref_mic} out of range")

    Tp = -(-T // B) * B
    if Tp != T:
        s = np.concatenate([s, np.zeros((n_mics, Tp - T))], axis=1)
    taps = np.ascontiguousarray(paths.speaker_sum().T)
    silent = not taps.any()
    y = np.zeros(Tp)
    m = np.zeros((n_mics, Tp))
    e = np.zeros(Tp)
    enhancer.reset(n_mics, B)
    for t0 in range(0, Tp, B):
        t1 = t0 + B
        a, b = t0 - lag, t1 - lag
        if b > 0:
            src = e[max(a, 0) : b]
            y[t0 + max(0, -a) : t1] = cfg.speaker(src)
        m[:, t0:t1] = s[:, t0:t1]
        if not silent:
            m[:, t0:t1] += feedback_block(taps, y, t0, t1)
        out = np.asarray(enhancer.process(m[:, t0:t1].copy(), y[t0:t1].copy()), dtype=float)
        if out.shape != (B,):
            raise ValueError(f"enhancer returned shape {out.shape}, expected ({B},)")
        e[t0:t1] = out
    enhanced = np.zeros(T)
    enhanced[: T - L] = e[L:T]
    fs = cfg.sample_rate_hz
    return LoopRun(
        mics=MultiSignal(m[:, :T], fs),
        speaker_out=MonoSignal(y[:T], fs),
        enhanced=MonoSignal(enhanced, fs),
        config=cfg,
        paths_id=paths_id or paths.sha256(),
        enhancer=getattr(enhancer, "name", type(enhancer).__name__),
        latency=L,
    )


def run_default_loop(source, paths: FeedbackPathSet, cfg: LoopConfig,
                     paths_id: str | None = None) -> LoopRun:
    """Loudspeakers replay the delayed, amplified, clipped reference mic."""
    run = run_controlled_loop(source, paths, cfg, Passthrough(cfg.ref_mic), paths_id)
    run.enhancer = "none"
    return run


def export_run(run: LoopRun, out_dir, extra: dict | None = None) -> dict:
    """Write mics/speaker/enhanced WAVs (float32) and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "mics.wav", run.mics)
    write_wav(out / "speaker.wav", run.speaker_out)
    write_wav(out / "enhanced.wav", run.enhanced)
    meta = run.to_json()
    if extra:
        meta.update(extra)
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
