"""Feedback-path synthesis: image-method RIRs, perturbation, loop gain, FPS1 files."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signals import DEFAULT_FS, MonoSignal, StftConfig, db_to_linear_gain, ms_to_samples

log = logging.getLogger(__name__)

TAIL_GUARD = 64
MIN_DIMS = (3.0, 3.0, 2.0)
MAX_ROOM_DIMS = (10.0, 10.0, 5.0)

FPS_MAGIC = b"FPS1"
FPS_VERSION = 1
_FPS_HEADER = struct.Struct("<4sIIIII")


class PathFileError(ValueError):
    """Malformed FPS1 container."""


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room.

    ``absorption`` is either one coefficient for all six surfaces or six
    values ordered (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz).
    """

    dims: tuple = (5.0, 4.0, 3.0)
    absorption: float | tuple = 0.2
    max_order: int = 6
    speed_of_sound: float = 343.0

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3:
            raise ValueError("room dims must be (Lx, Ly, Lz)")
        if any(d < m for d, m in zip(dims, MIN_DIMS)):
            raise ValueError(f"room {dims} smaller than the 3x3x2 m minimum")
        if any(d > m for d, m in zip(dims, MAX_ROOM_DIMS)):
            log.warning("room %s exceeds the 10x10x5 m envelope", dims)
        alpha = self.absorption
        alpha = (float(alpha),) * 6 if np.isscalar(alpha) else tuple(float(a) for a in alpha)
        if len(alpha) != 6 or not all(0.0 < a <= 1.0 for a in alpha):
            raise ValueError("absorption must be in (0, 1], one or six values")
        if self.max_order < 0:
            raise ValueError("max_order must be non-negative")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "absorption", alpha)

    @property
    def reflection(self) -> np.ndarray:
        """Per-wall pressure reflection coefficient sqrt(1 - alpha), shape (3, 2)."""
        return np.sqrt(1.0 - np.asarray(self.absorption)).reshape(3, 2)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dims)))


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray
    speaker_positions: np.ndarray
    source_position: np.ndarray

    def __post_init__(self):
        mics = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        spk = np.atleast_2d(np.asarray(self.speaker_positions, dtype=float))
        src = np.asarray(self.source_position, dtype=float).reshape(3)
        if mics.shape[1] != 3 or spk.shape[1] != 3 or len(mics) < 1 or len(spk) < 1:
            raise ValueError("need N >= 1 mics and J >= 1 speakers as (., 3) arrays")
        object.__setattr__(self, "mic_positions", mics)
        object.__setattr__(self, "speaker_positions", spk)
        object.__setattr__(self, "source_position", src)

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_positions)


def glasses_geometry(center=(2.5, 2.0, 1.6), source_distance: float = 1.0,
                     n_mics: int = 5, seed: int | None = None) -> ArrayGeometry:
    """Five mics and two temple speakers on a ~14 cm glasses-like frame.

    Facing +y.  With ``seed`` the head position and source bearing jitter
    a little so different seeds give different but plausible layouts.
    """
    c = np.asarray(center, dtype=float)
    bearing = 0.0
    if seed is not None:
        rng = np.random.default_rng(seed)
        c = c + rng.uniform([-0.5, -0.5, -0.1], [0.5, 0.5, 0.1])
        bearing = rng.uniform(-0.6, 0.6)
    frame = np.array([
        [-0.07, 0.00, 0.00],   # left temple
        [-0.03, 0.02, 0.01],   # left rim
        [0.00, 0.02, 0.02],    # bridge
        [0.03, 0.02, 0.01],    # right rim
        [0.07, 0.00, 0.00],    # right temple
    ])[:n_mics]
    speakers = np.array([[-0.07, -0.04, -0.02], [0.07, -0.04, -0.02]])
    src = c + source_distance * np.array([np.sin(bearing), np.cos(bearing), 0.0])
    return ArrayGeometry(c + frame, c + speakers, src)


@dataclass(frozen=True)
class FeedbackPathSet:
    """N x J grid of equal-length impulse responses, ``irs[i, j]`` = speaker j -> mic i."""

    irs: np.ndarray
    sample_rate_hz: int = DEFAULT_FS

    def __post_init__(self):
        irs = np.array(self.irs, dtype=np.float64)
        if irs.ndim != 3 or min(irs.shape) < 1:
            raise ValueError("irs must have shape (N, J, T_h) with all sizes >= 1")
        if not np.all(np.isfinite(irs)):
            raise ValueError("impulse responses contain non-finite values")
        irs.flags.writeable = False
        object.__setattr__(self, "irs", irs)

    @property
    def n_mics(self) -> int:
        return self.irs.shape[0]

    @property
    def n_speakers(self) -> int:
        return self.irs.shape[1]

    @property
    def ir_len(self) -> int:
        return self.irs.shape[2]

    def speaker_sum(self) -> np.ndarray:
        """(N, T_h) response from a common loudspeaker signal to each mic."""
        acc = self.irs[:, 0, :].copy()
        for j in range(1, self.n_speakers):
            acc = acc + self.irs[:, j, :]
        return acc

    def sha256(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()

    @classmethod
    def zeros(cls, n_mics: int, n_speakers: int = 1, ir_len: int = 1,
              fs: int = DEFAULT_FS) -> "FeedbackPathSet":
        return cls(np.zeros((n_mics, n_speakers, ir_len)), fs)

    @classmethod
    def pure_delay(cls, gains, delay: int, fs: int = DEFAULT_FS) -> "FeedbackPathSet":
        """One speaker, mic i path ``gains[i] * delta[delay]``."""
        g = np.asarray(gains, dtype=float).reshape(-1)
        irs = np.zeros((g.size, 1, delay + 1))
        irs[:, 0, delay] = g
        return cls(irs, fs)


# --------------------------------------------------------------------------
# image method


def _image_sources(room: RoomSpec, src: np.ndarray):
    """Enumerate images up to ``max_order``: (positions, amplitude factors)."""
    order = room.max_order
    L = np.asarray(room.dims)
    beta = room.reflection
    rng_n = np.arange(-order, order + 1)
    per_axis = []
    for ax in range(3):
        n, p = np.meshgrid(rng_n, [0, 1], indexing="ij")
        n, p = n.ravel(), p.ravel()
        hits_lo = np.abs(n - p)
        hits_hi = np.abs(n)
        pos = (1 - 2 * p) * src[ax] + 2 * n * L[ax]
        amp = beta[ax, 0] ** hits_lo * beta[ax, 1] ** hits_hi
        per_axis.append((pos, hits_lo + hits_hi, amp))
    (px, ox, ax_), (py, oy, ay), (pz, oz, az) = per_axis
    tot = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    keep = tot <= order
    ix, iy, iz = np.nonzero(keep)
    pos = np.stack([px[ix], py[iy], pz[iz]], axis=1)
    amp = ax_[ix] * ay[iy] * az[iz]
    return pos, amp


def simulate_rir(room: RoomSpec, src, rcv, fs: int = DEFAULT_FS) -> MonoSignal:
    """Image-method room impulse response, nearest-sample placement.

    Every image at distance d with wall-reflection product b adds
    b / (4 pi d) at sample round(d / c * fs).  Length covers the farthest
    contributing image plus a 64-sample guard.
    """
    src = np.asarray(src, dtype=float).reshape(3)
    rcv = np.asarray(rcv, dtype=float).reshape(3)
    if not room.contains(src) or not room.contains(rcv):
        raise ValueError("source and receiver must lie strictly inside the room")
    if np.allclose(src, rcv, atol=1e-9, rtol=0):
        raise ValueError("source and receiver coincide")
    pos, amp = _image_sources(room, src)
    d = np.linalg.norm(pos - rcv, axis=1)
    live = amp != 0
    pos, amp, d = pos[live], amp[live], d[live]
    delays = np.round(d / room.speed_of_sound * fs).astype(np.int64)
    length = int(math.ceil(d.max() / room.speed_of_sound * fs)) + TAIL_GUARD
    h = np.zeros(length)
    np.add.at(h, delays, amp / (4.0 * np.pi * d))
    return MonoSignal(h, fs)


def _as_float32_grid(irs: np.ndarray) -> np.ndarray:
    # stored values are float32-representable so FPS1 round trips are exact
    return irs.astype(np.float32).astype(np.float64)


def build_feedback_paths(room: RoomSpec, geom: ArrayGeometry, fs: int = DEFAULT_FS) -> FeedbackPathSet:
    rirs = [[simulate_rir(room, s, m, fs).samples for s in geom.speaker_positions]
            for m in geom.mic_positions]
    length = max(len(h) for row in rirs for h in row)
    irs = np.zeros((geom.n_mics, geom.n_speakers, length))
    for i, row in enumerate(rirs):
        for j, h in enumerate(row):
            irs[i, j, : len(h)] = h
    return FeedbackPathSet(_as_float32_grid(irs), fs)


def source_images(room: RoomSpec, geom: ArrayGeometry, fs: int = DEFAULT_FS) -> np.ndarray:
    """(N, T_a) RIRs from the desired source to each mic."""
    rirs = [simulate_rir(room, geom.source_position, m, fs).samples for m in geom.mic_positions]
    length = max(len(h) for h in rirs)
    out = np.zeros((len(rirs), length))
    for i, h in enumerate(rirs):
        out[i, : len(h)] = h
    return out


def perturb_paths(paths: FeedbackPathSet, sigma: float, seed: int = 0) -> FeedbackPathSet:
    """Add i.i.d. Gaussian noise with std ``sigma * rms(ir)`` to every IR."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return paths
    rng = np.random.default_rng(seed)
    irs = paths.irs
    scale = sigma * np.sqrt(np.mean(irs * irs, axis=-1, keepdims=True))
    noisy = irs + scale * rng.standard_normal(irs.shape)
    return FeedbackPathSet(_as_float32_grid(noisy), paths.sample_rate_hz)


def loop_gain_profile(paths: FeedbackPathSet, gain, ref_mic: int = 0,
                      stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Linearized open-loop magnitude |G e^{-jwD} sum_j H_ref,j(w)| on the STFT bins.

    ``gain`` is a dB value or anything with a linear ``.gain`` (a LoopConfig).
    The delay only contributes phase, so it does not enter the magnitude.
    """
    g = float(gain.gain) if hasattr(gain, "gain") else db_to_linear_gain(gain)
    if not 0 <= ref_mic < paths.n_mics:
        raise IndexError(f"ref_mic {ref_mic} out of range")
    h = paths.speaker_sum()[ref_mic]
    F = stft_cfg.frame_len
    m = max(1, -(-h.size // F))
    H = np.fft.rfft(h, n=m * F)[::m]
    return g * np.abs(H)


# --------------------------------------------------------------------------
# FPS1 container


def to_bytes(paths: FeedbackPathSet) -> bytes:
    n, j, t = paths.irs.shape
    head = _FPS_HEADER.pack(FPS_MAGIC, FPS_VERSION, n, j, t, paths.sample_rate_hz)
    return head + paths.irs.astype("<f4").tobytes(order="C")


def from_bytes(buf: bytes) -> FeedbackPathSet:
    if len(buf) < _FPS_HEADER.size:
        raise PathFileError("truncated header")
    magic, version, n, j, t, fs = _FPS_HEADER.unpack_from(buf)
    if magic != FPS_MAGIC:
        raise PathFileError("bad magic")
    if version != FPS_VERSION:
        raise PathFileError(f"unsupported version {version}")
    if min(n, j, t) < 1 or fs < 1:
        raise PathFileError(f"dimension mismatch: N={n} J={j} len={t} fs={fs}")
    need = n * j * t * 4
    payload = buf[_FPS_HEADER.size:]
    if len(payload) < need:
        raise PathFileError("truncated payload")
    if len(payload) > need:
        raise PathFileError("dimension mismatch: trailing bytes after payload")
    irs = np.frombuffer(payload, dtype="<f4").reshape(n, j, t).astype(np.float64)
    return FeedbackPathSet(irs, fs)


def save_paths(paths: FeedbackPathSet, file) -> None:
    Path(file).write_bytes(to_bytes(paths))


def load_paths(file) -> FeedbackPathSet:
    return from_bytes(Path(file).read_bytes())


def direct_delay_samples(room: RoomSpec, src, rcv, fs: int = DEFAULT_FS) -> int:
    d = float(np.linalg.norm(np.asarray(src, float) - np.asarray(rcv, float)))
    return int(round(d / room.speed_of_sound * fs))


__all__ = [
    "ArrayGeometry", "FeedbackPathSet", "PathFileError", "RoomSpec",
    "build_feedback_paths", "direct_delay_samples", "glasses_geometry",
    "load_paths", "loop_gain_profile", "ms_to_samples", "perturb_paths",
    "save_paths", "simulate_rir", "source_images",
]
