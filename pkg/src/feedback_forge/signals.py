"""Time/frequency-domain primitives shared by every other module.

Signals are thin frozen wrappers around float64 numpy arrays.  Most
operations accept either the wrapper or a bare array and return the same
kind they were given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

DEFAULT_FS = 16000
SNR_CAP_DB = 120.0


@dataclass(frozen=True)
class MonoSignal:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_FS

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("signal contains non-finite samples")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MultiSignal:
    """C channels of equal length; ``channels`` has shape (C, T)."""

    channels: np.ndarray
    sample_rate_hz: int = DEFAULT_FS

    def __post_init__(self):
        x = np.array(self.channels, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("MultiSignal needs a (C, T) array with C >= 1")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("signal contains non-finite samples")
        x.flags.writeable = False
        object.__setattr__(self, "channels", x)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def __len__(self):
        return self.channels.shape[1]

    def channel(self, i: int) -> MonoSignal:
        return MonoSignal(self.channels[i], self.sample_rate_hz)

    @classmethod
    def stack(cls, signals) -> "MultiSignal":
        rates = {s.sample_rate_hz for s in signals}
        lengths = {len(s) for s in signals}
        if len(rates) != 1 or len(lengths) != 1:
            raise ValueError("channels must share length and sample rate")
        return cls(np.stack([s.samples for s in signals]), rates.pop())


SignalLike = Union[MonoSignal, MultiSignal, np.ndarray]


def _data(sig):
    if isinstance(sig, MonoSignal):
        return sig.samples
    if isinstance(sig, MultiSignal):
        return sig.channels
    return np.asarray(sig, dtype=np.float64)


def _rewrap(like, data):
    if isinstance(like, MonoSignal):
        return MonoSignal(data, like.sample_rate_hz)
    if isinstance(like, MultiSignal):
        return MultiSignal(data, like.sample_rate_hz)
    return data


# --------------------------------------------------------------------------
# STFT


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    """Frame grid and window pair.

    ``window="hann"`` uses a square-root periodic Hann window for both
    analysis and synthesis, so the analysis/synthesis product is the Hann
    window itself.  ``window="rect"`` uses flat windows.  The pair must
    overlap-add to a constant at the chosen hop; this is checked here.
    """

    frame_len: int = 512
    hop: int = 256
    window: str = "hann"
    analysis: np.ndarray = field(init=False, repr=False, compare=False)
    synthesis: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        F, H = self.frame_len, self.hop
        if F < 2 or F & (F - 1):
            raise ValueError(f"frame_len must be a power of two, got {F}")
        if H < 1 or F % H:
            raise ValueError(f"hop {H} must divide frame_len {F}")
        if self.window == "hann":
            w = np.sqrt(_periodic_hann(F))
            wa, ws = w, w.copy()
        elif self.window == "rect":
            wa, ws = np.ones(F), np.ones(F)
        else:
            raise ValueError(f"unknown window kind {self.window!r}")
        ola = (wa * ws).reshape(F // H, H).sum(axis=0)
        if not np.allclose(ola, ola[0], rtol=1e-10, atol=0) or ola[0] <= 0:
            raise ValueError(f"window {self.window!r} is not COLA at hop {H}")
        ws = ws / ola[0]
        wa.flags.writeable = False
        ws.flags.writeable = False
        object.__setattr__(self, "analysis", wa)
        object.__setattr__(self, "synthesis", ws)

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.hop

    def interior(self, n_samples: int) -> slice:
        """Sample range reconstructed exactly by ``istft(stft(x))``."""
        n = self.n_frames(n_samples)
        return slice(self.frame_len - self.hop, (n - 1) * self.hop + self.hop)


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT; ``bins`` has shape (channels, frames, frame_len//2+1)."""

    bins: np.ndarray
    cfg: StftConfig
    sample_rate_hz: int
    n_samples: int
    mono: bool = False

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., T) -> (..., frames, frame_len) strided view, no windowing."""
    n = cfg.n_frames(x.shape[-1])
    win = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len, axis=-1)
    return win[..., : (n - 1) * cfg.hop + 1 : cfg.hop, :]


def stft(sig: SignalLike, cfg: StftConfig = StftConfig()) -> Spectrogram:
    x = _data(sig)
    mono = x.ndim == 1
    x2 = x[None, :] if mono else x
    if x2.shape[-1] < cfg.frame_len:
        raise ValueError("input too short")
    frames = frame_signal(x2, cfg) * cfg.analysis
    fs = getattr(sig, "sample_rate_hz", DEFAULT_FS)
    return Spectrogram(np.fft.rfft(frames, axis=-1), cfg, fs, x2.shape[-1], mono)


def overlap_add(frames: np.ndarray, cfg: StftConfig, n_samples: int) -> np.ndarray:
    """Weighted overlap-add of time-domain frames (..., L, frame_len)."""
    out = np.zeros(frames.shape[:-2] + (n_samples,))
    w = frames * cfg.synthesis
    for ell in range(frames.shape[-2]):
        a = ell * cfg.hop
        out[..., a : a + cfg.frame_len] += w[..., ell, :]
    return out


def istft(spec: Spectrogram):
    cfg = spec.cfg
    frames = np.fft.irfft(spec.bins, n=cfg.frame_len, axis=-1)
    out = overlap_add(frames, cfg, spec.n_samples)
    if spec.mono:
        return MonoSignal(out[0], spec.sample_rate_hz)
    return MultiSignal(out, spec.sample_rate_hz)


class FrameStream:
    """Block-wise STFT analysis and overlap-add synthesis for causal enhancers.

    Blocks of B samples go in through :meth:`push`, which returns the
    spectra of any frames completed by that block, shape (C, n_bins) each.
    Processed spectra go back through :meth:`add_frame` in the same order,
    and :meth:`pull` returns B output samples lagging the input by
    ``frame_len - B``.  B must divide the hop.
    """

    def __init__(self, cfg: StftConfig, n_channels: int, block_size: int):
        if cfg.hop % block_size:
            raise ValueError(f"block size {block_size} must divide hop {cfg.hop}")
        self.cfg = cfg
        self.block_size = block_size
        self.latency = cfg.frame_len - block_size
        self._inp = np.zeros((n_channels, cfg.frame_len))
        self._out = np.zeros(cfg.frame_len + block_size)
        self._n_in = 0
        self._n_out = 0
        self._frames_in = 0
        self._frames_out = 0

    def push(self, block: np.ndarray) -> list:
        cfg, b = self.cfg, self.block_size
        block = np.atleast_2d(block)
        self._inp = np.concatenate([self._inp[:, b:], block], axis=1)
        self._n_in += b
        ready = []
        if self._frames_in * cfg.hop + cfg.frame_len <= self._n_in:
            ready.append(np.fft.rfft(self._inp * cfg.analysis, axis=-1))
            self._frames_in += 1
        return ready

    def add_frame(self, spectrum: np.ndarray) -> None:
        cfg = self.cfg
        frame = np.fft.irfft(spectrum, n=cfg.frame_len) * cfg.synthesis
        a = self._frames_out * cfg.hop - self._n_out
        need = a + cfg.frame_len
        if need > self._out.size:
            self._out = np.concatenate([self._out, np.zeros(need - self._out.size)])
        self._out[a:need] += frame
        self._frames_out += 1

    def pull(self) -> np.ndarray:
        """Next B output samples, i.e. synthesis output at t - latency."""
        b = self.block_size
        lo = self._n_in - b - self.latency
        res = np.zeros(b)
        if lo + b > 0:
            k0 = max(lo, 0)
            res[k0 - lo :] = self._out[k0 - self._n_out : lo + b - self._n_out]
            drop = lo + b - self._n_out
            self._out = np.concatenate([self._out[drop:], np.zeros(drop)])
            self._n_out += drop
        return res


# --------------------------------------------------------------------------
# elementary operators


def fir_convolve(sig: SignalLike, ir: SignalLike):
    """Causal linear convolution truncated to the input length."""
    x, h = _data(sig), _data(ir)
    if h.size == 0:
        raise ValueError("impulse response is empty")
    if h.ndim != 1:
        raise ValueError("impulse response must be one-dimensional")
    n = x.shape[-1]
    h = h[:n] if h.size > n else h
    if x.ndim == 1:
        y = np.convolve(x, h)[:n]
    else:
        y = np.stack([np.convolve(row, h)[:n] for row in x])
    return _rewrap(sig, y)


def integer_delay(sig: SignalLike, delay: int):
    if delay < 0:
        raise ValueError("delay must be non-negative")
    x = _data(sig)
    y = np.zeros_like(x)
    n = x.shape[-1]
    if delay < n:
        y[..., delay:] = x[..., : n - delay]
    return _rewrap(sig, y)


def ms_to_samples(ms: float, fs: int = DEFAULT_FS) -> int:
    return int(round(ms * fs / 1000.0))


def db_to_linear_gain(g_db: float) -> float:
    if not math.isfinite(g_db):
        raise ValueError("gain must be finite")
    return 10.0 ** (g_db / 20.0)


def hard_clip(sig: SignalLike, lo: float, hi: float):
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return _rewrap(sig, np.clip(_data(sig), lo, hi))


def snr_db(reference: SignalLike, estimate: SignalLike) -> float:
    s, e = _data(reference), _data(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {e.shape}")
    num = float(np.sum(s * s))
    if num == 0.0:
        raise ValueError("undefined SNR: reference is all zeros")
    den = float(np.sum((s - e) ** 2))
    if den == 0.0:
        return SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SNR_CAP_DB, SNR_CAP_DB))


def rms(x) -> float:
    x = _data(x)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


# --------------------------------------------------------------------------
# WAV interchange


def write_wav(path, sig: Union[MonoSignal, MultiSignal], fmt: str = "float32") -> None:
    """Write little-endian RIFF WAV as PCM16 (``fmt="pcm16"``) or float32."""
    data = _data(sig)
    data = data if data.ndim == 1 else data.T
    if fmt == "float32":
        payload = data.astype("<f4")
    elif fmt == "pcm16":
        payload = np.round(np.clip(data, -1.0, 32767 / 32768) * 32768).astype("<i2")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(str(path), sig.sample_rate_hz, payload)


def read_wav(path) -> Union[MonoSignal, MultiSignal]:
    fs, data = wavfile.read(str(Path(path)))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if data.ndim == 1:
        return MonoSignal(data, fs)
    return MultiSignal(data.T, fs)


# --------------------------------------------------------------------------
# synthetic sources


def speechlike(duration_s: float, fs: int = DEFAULT_FS, seed: int = 0,
               level_rms: float = 0.05) -> MonoSignal:
    """Seeded stand-in for a speech corpus.

    Alternates voiced syllables (glottal pulse train through a few formant
    resonators, slowly varying pitch) with short fricative noise bursts and
    pauses, then normalizes to ``level_rms``.
    """
    from scipy.signal import lfilter

    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    t = 0
    kind = 2
    while t < n:
        # never open with a pause, never two pauses in a row
        kind = rng.choice(3, p=[0.6, 0.2, 0.2]) if kind != 2 else rng.choice(2, p=[0.75, 0.25])
        seg = int(rng.uniform(0.06, 0.25) * fs)
        seg = min(seg, n - t)
        if kind == 0:
            f0 = rng.uniform(90, 220) * (1 + 0.1 * np.sin(np.linspace(0, np.pi, seg)))
            phase = np.cumsum(f0 / fs)
            pulses = np.diff(np.floor(phase), prepend=0.0)
            x = pulses + 0.02 * rng.standard_normal(seg)
            for fc in rng.uniform([300, 900, 2200], [900, 2200, 3500]):
                r = np.exp(-np.pi * 120.0 / fs)
                a = [1.0, -2 * r * np.cos(2 * np.pi * fc / fs), r * r]
                x = x + 0.5 * lfilter([1.0 - r], a, x)
            x *= np.hanning(seg)
        elif kind == 1:
            x = np.diff(rng.standard_normal(seg + 1)) * np.hanning(seg) * 0.3
        else:
            x = np.zeros(seg)
        out[t : t + seg] = x
        t += seg
    r = rms(out)
    if r > 0:
        out *= level_rms / r
    return MonoSignal(out, fs)
