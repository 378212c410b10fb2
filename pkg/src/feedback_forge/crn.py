"""Toy-scale convolutional recurrent network working on STFT frames.

Every layer mixes channels per frequency bin (a 1x1 "spatial" convolution),
runs an LSTM over time on the mixed vector of each bin, and multiplies the
two elementwise::

    c   = W_s x + b_s
    h   = LSTM(c)            hidden size = out channels, state kept per bin
    out = c * h

The LSTM weights are shared across bins.  Input features are the real and
imaginary parts of each mic spectrum (channel 2n is Re, 2n+1 is Im),
optionally followed by the loudspeaker spectrum.  The last layer emits
either a complex spectrum (2 channels) or a sigmoid mask (1 channel)
applied to the reference mic.

Gradients are hand-derived reverse mode; ``tests/test_crn.py`` checks them
against central finite differences.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .loop import Enhancer
from .signals import FrameStream, StftConfig

GATES = 4  # i, f, g, o
TENSOR_NAMES = ("w_s", "b_s", "w_ih", "w_hh", "b")
CRN_MAGIC = b"CRN1"
CRN_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CrnConfig:
    layers: tuple = ((4, 4), (4, 2))
    stft: StftConfig = field(default_factory=lambda: StftConfig(128, 64))
    input_mode: str = "mics"            # or "mics+speaker"
    output_mode: str = "complex"        # or "mask"
    per_bin_kernel: bool = False
    feature_scale: float = 1.0
    ref_mic: int = 0

    def __post_init__(self):
        layers = tuple((int(a), int(b)) for a, b in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("need at least one layer")
        for (_, prev_out), (nxt_in, _) in zip(layers, layers[1:]):
            if prev_out != nxt_in:
                raise ValueError(f"layer channels do not chain: {layers}")
        if any(a < 1 or b < 1 for a, b in layers):
            raise ValueError("channel counts must be positive")
        if self.input_mode not in ("mics", "mics+speaker"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.output_mode not in ("complex", "mask"):
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        want = 2 if self.output_mode == "complex" else 1
        if layers[-1][1] != want:
            raise ValueError(f"{self.output_mode} output needs {want} final channels")
        extra = 2 if self.input_mode == "mics+speaker" else 0
        if (layers[0][0] - extra) < 2 or (layers[0][0] - extra) % 2:
            raise ValueError("first layer input must be 2 x n_mics (+2 with speaker ref)")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")
        if not 0 <= self.ref_mic < self.n_mics:
            raise ValueError("ref_mic out of range")

    @property
    def n_bins(self) -> int:
        return self.stft.n_bins

    @property
    def n_mics(self) -> int:
        extra = 2 if self.input_mode == "mics+speaker" else 0
        return (self.layers[0][0] - extra) // 2

    @property
    def uses_speaker(self) -> bool:
        return self.input_mode == "mics+speaker"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(x) for x in self.layers]
        d["stft"] = {"frame_len": self.stft.frame_len, "hop": self.stft.hop,
                     "window": self.stft.window}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrnConfig":
        d = dict(d)
        st = d.pop("stft", None)
        if st is not None:
            d["stft"] = StftConfig(**st)
        d["layers"] = tuple(tuple(x) for x in d.get("layers", ((4, 4), (4, 2))))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


FULL_CONFIG = CrnConfig(layers=((10, 20), (20, 20), (20, 1)), output_mode="mask")


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: CrnConfig) -> dict:
    K = config.n_bins
    shapes = {}
    for ell, (ci, co) in enumerate(config.layers):
        if config.per_bin_kernel:
            shapes[f"l{ell}.w_s"] = (K, co, ci)
            shapes[f"l{ell}.b_s"] = (K, co)
        else:
            shapes[f"l{ell}.w_s"] = (co, ci)
            shapes[f"l{ell}.b_s"] = (co,)
        shapes[f"l{ell}.w_ih"] = (GATES * co, co)
        shapes[f"l{ell}.w_hh"] = (GATES * co, co)
        shapes[f"l{ell}.b"] = (GATES * co,)
    return shapes


def init_params(config: CrnConfig, seed: int = 0) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias +1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        ell = int(name[1:name.index(".")])
        ci, co = config.layers[ell]
        fan_in = ci if name.endswith(("w_s", "b_s")) else co
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".b"):
            params[name][co : 2 * co] += 1.0
    return params


def zero_params(config: CrnConfig) -> dict:
    return {k: np.zeros(s) for k, s in param_shapes(config).items()}


def param_count(config: CrnConfig) -> int:
    """sum over layers of |W_s| + |b_s| + 8 co^2 + 4 co (times K for per-bin kernels)."""
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def macs_per_frame(config: CrnConfig) -> int:
    """K * sum over layers of (co*ci + 8*co^2 + 4*co).

    Spatial mix, input and recurrent gate products, plus the four
    elementwise products (f*c, i*g, o*tanh, c*h).
    """
    K = config.n_bins
    return int(K * sum(co * ci + 8 * co * co + 4 * co for ci, co in config.layers))


# --------------------------------------------------------------------------
# forward / backward


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def zero_state(config: CrnConfig) -> list:
    K = config.n_bins
    return [(np.zeros((K, co)), np.zeros((K, co))) for _, co in config.layers]


def _spatial(params, ell, x, per_bin):
    w, b = params[f"l{ell}.w_s"], params[f"l{ell}.b_s"]
    if per_bin:
        return np.einsum("koi,ki->ko", w, x) + b
    return x @ w.T + b


def crn_forward_frame(params: dict, config: CrnConfig, state: list, frame: np.ndarray,
                      tape: list | None = None):
    """One STFT frame.  ``frame`` is (in_channels, K); returns ((out_channels, K), state).

    When ``tape`` is a list, the intermediates needed by :func:`crn_backward`
    are appended to it.
    """
    frame = np.asarray(frame, dtype=float)
    K = config.n_bins
    if frame.shape != (config.layers[0][0], K):
        raise ValueError(f"frame shape {frame.shape} != {(config.layers[0][0], K)}")
    x = frame.T
    new_state = []
    rec = []
    for ell, (ci, co) in enumerate(config.layers):
        h_prev, cell_prev = state[ell]
        c = _spatial(params, ell, x, config.per_bin_kernel)
        z = c @ params[f"l{ell}.w_ih"].T + h_prev @ params[f"l{ell}.w_hh"].T + params[f"l{ell}.b"]
        i = _sigmoid(z[:, :co])
        f = _sigmoid(z[:, co : 2 * co])
        g = np.tanh(z[:, 2 * co : 3 * co])
        o = _sigmoid(z[:, 3 * co :])
        cell = f * cell_prev + i * g
        tc = np.tanh(cell)
        h = o * tc
        out = c * h
        rec.append((x, c, h_prev, cell_prev, i, f, g, o, tc, h))
        new_state.append((h, cell))
        x = out
    y = x.T
    if config.output_mode == "mask":
        y = _sigmoid(y)
    if tape is not None:
        tape.append((rec, y))
    return y, new_state


def crn_forward_sequence(params: dict, config: CrnConfig, features: np.ndarray,
                         state: list | None = None, tape: list | None = None):
    """Frames (T, in_channels, K) -> outputs (T, out_channels, K), final state."""
    state = zero_state(config) if state is None else state
    outs = []
    for frame in features:
        y, state = crn_forward_frame(params, config, state, frame, tape)
        outs.append(y)
    out = np.stack(outs) if outs else np.zeros((0, config.layers[-1][1], config.n_bins))
    return out, state


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward_frame(params: dict, config: CrnConfig, frame_tape, d_out: np.ndarray,
                   d_state: list | None, grads: dict):
    """Reverse one frame.  Accumulates into ``grads``; returns (d_frame, d_state_prev)."""
    rec, y = frame_tape
    dy = np.asarray(d_out, dtype=float)
    if config.output_mode == "mask":
        dy = dy * y * (1.0 - y)
    dx = dy.T
    d_prev = [None] * len(config.layers)
    for ell in reversed(range(len(config.layers))):
        x, c, h_prev, cell_prev, i, f, g, o, tc, h = rec[ell]
        dh_next, dcell_next = (0.0, 0.0) if d_state is None else d_state[ell]
        dc = dx * h
        dh = dx * c + dh_next
        do = dh * tc
        dcell = dh * o * (1.0 - tc * tc) + dcell_next
        dz = np.concatenate([
            dcell * g * i * (1.0 - i),
            dcell * cell_prev * f * (1.0 - f),
            dcell * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        w_ih, w_hh = params[f"l{ell}.w_ih"], params[f"l{ell}.w_hh"]
        grads[f"l{ell}.w_ih"] += dz.T @ c
        grads[f"l{ell}.w_hh"] += dz.T @ h_prev
        grads[f"l{ell}.b"] += dz.sum(axis=0)
        dc = dc + dz @ w_ih
        d_prev[ell] = (dz @ w_hh, dcell * f)
        w_s = params[f"l{ell}.w_s"]
        if config.per_bin_kernel:
            grads[f"l{ell}.w_s"] += dc[:, :, None] * x[:, None, :]
            grads[f"l{ell}.b_s"] += dc
            dx = np.einsum("koi,ko->ki", w_s, dc)
        else:
            grads[f"l{ell}.w_s"] += dc.T @ x
            grads[f"l{ell}.b_s"] += dc.sum(axis=0)
            dx = dc @ w_s
    return dx.T, d_prev


def crn_backward(params: dict, config: CrnConfig, tape: list, d_outputs: np.ndarray):
    """Reverse-mode gradients of a recorded sequence.

    ``d_outputs`` is (T, out_channels, K).  Returns (parameter gradients,
    input gradients of shape (T, in_channels, K)).
    """
    if not tape:
        raise ValueError("missing tape: run the forward pass with tape recording")
    if len(d_outputs) != len(tape):
        raise ValueError("output gradient length does not match the tape")
    grads = zero_grads(params)
    d_in = np.zeros((len(tape), config.layers[0][0], config.n_bins))
    d_state = None
    for t in reversed(range(len(tape))):
        d_in[t], d_state = backward_frame(params, config, tape[t], d_outputs[t], d_state, grads)
    return grads, d_in


# --------------------------------------------------------------------------
# spectra <-> features, with adjoints


def spectra_to_features(config: CrnConfig, mic_spec: np.ndarray, spk_spec=None) -> np.ndarray:
    """(N, K) complex mic spectra (+ (K,) speaker spectrum) -> (in_channels, K) reals."""
    n, K = mic_spec.shape
    if n != config.n_mics:
        raise ValueError(f"mic count mismatch: config expects {config.n_mics}, got {n}")
    feats = np.empty((config.layers[0][0], K))
    feats[0 : 2 * n : 2] = mic_spec.real
    feats[1 : 2 * n : 2] = mic_spec.imag
    if config.uses_speaker:
        feats[2 * n] = spk_spec.real
        feats[2 * n + 1] = spk_spec.imag
    return feats * config.feature_scale


def features_grad_to_spectra(config: CrnConfig, d_feats: np.ndarray):
    """Adjoint of :func:`spectra_to_features`, gradients as dRe + j dIm."""
    n = config.n_mics
    d = d_feats * config.feature_scale
    d_mic = d[0 : 2 * n : 2] + 1j * d[1 : 2 * n : 2]
    d_spk = d[2 * n] + 1j * d[2 * n + 1] if config.uses_speaker else None
    return d_mic, d_spk


def output_to_spectrum(config: CrnConfig, out: np.ndarray, mic_spec: np.ndarray) -> np.ndarray:
    if config.output_mode == "complex":
        return (out[0] + 1j * out[1]) / config.feature_scale
    return out[0] * mic_spec[config.ref_mic]


def spectrum_grad_to_output(config: CrnConfig, d_spec: np.ndarray, out: np.ndarray,
                            mic_spec: np.ndarray):
    """Adjoint of :func:`output_to_spectrum`: returns (d_out, d_mic_spec or None)."""
    if config.output_mode == "complex":
        d = d_spec / config.feature_scale
        return np.stack([d.real, d.imag]), None
    ref = mic_spec[config.ref_mic]
    d_out = np.real(d_spec * ref.conj())[None, :]
    d_mic = np.zeros_like(mic_spec)
    d_mic[config.ref_mic] = out[0] * d_spec
    return d_out, d_mic


def rfft_adjoint(G: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``np.fft.rfft(x, n)`` for real x, gradient G = dRe + j dIm."""
    Z = np.array(G, dtype=complex) * 0.5
    Z[..., 0] = G[..., 0]
    Z[..., -1] = G[..., -1]
    return n * np.fft.irfft(Z, n=n, axis=-1)


def irfft_adjoint(g: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``np.fft.irfft(S, n)`` w.r.t. (Re S, Im S), as dRe + j dIm."""
    R = np.fft.rfft(g, n=n, axis=-1)
    G = R * (2.0 / n)
    # DC and Nyquist enter once and only through their real part (n even)
    G[..., 0] = R[..., 0].real / n
    G[..., -1] = R[..., -1].real / n
    return G


# --------------------------------------------------------------------------
# enhancer


class CrnEnhancer(Enhancer):
    name = "crn"

    def __init__(self, params: dict, config: CrnConfig):
        shapes = param_shapes(config)
        for k, s in shapes.items():
            if k not in params or params[k].shape != s:
                raise ValueError(f"parameter {k} missing or mis-shaped")
        self.params = params
        self.config = config

    def latency(self, block_size):
        if self.config.stft.hop % block_size:
            raise ValueError(f"block size {block_size} must divide hop {self.config.stft.hop}")
        return self.config.stft.frame_len - block_size

    def reset(self, n_mics, block_size):
        if n_mics != self.config.n_mics:
            raise ValueError(f"mic count mismatch: model expects {self.config.n_mics}, loop has {n_mics}")
        self._mics = FrameStream(self.config.stft, n_mics, block_size)
        self._spk = FrameStream(self.config.stft, 1, block_size)
        self._state = zero_state(self.config)

    def process(self, mics, speaker):
        spk_frames = self._spk.push(speaker)
        for k, M in enumerate(self._mics.push(mics)):
            Y = spk_frames[k][0] if self.config.uses_speaker else None
            feats = spectra_to_features(self.config, M, Y)
            out, self._state = crn_forward_frame(self.params, self.config, self._state, feats)
            self._mics.add_frame(output_to_spectrum(self.config, out, M))
        return self._mics.pull()


def make_crn_enhancer(params: dict, config: CrnConfig) -> CrnEnhancer:
    return CrnEnhancer(params, config)


# --------------------------------------------------------------------------
# CRN1 checkpoints


def quantize(params: dict) -> dict:
    """Round to float32-representable values (what a checkpoint stores)."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def checkpoint_bytes(params: dict, config: CrnConfig) -> bytes:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [CRN_MAGIC, struct.pack("<II", CRN_VERSION, len(blob)), blob]
    for name in param_shapes(config):
        arr = np.asarray(params[name])
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(params: dict, config: CrnConfig, file) -> None:
    Path(file).write_bytes(checkpoint_bytes(params, config))


def parse_checkpoint(buf: bytes, expect_config: CrnConfig | None = None):
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    if buf[:4] != CRN_MAGIC:
        raise CheckpointError("bad magic")
    version, jlen = struct.unpack_from("<II", buf, 4)
    if version != CRN_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    if len(buf) < pos + jlen:
        raise CheckpointError("truncated payload")
    try:
        config = CrnConfig.from_dict(json.loads(buf[pos : pos + jlen]))
    except (ValueError, TypeError) as err:
        raise CheckpointError(f"bad config blob: {err}") from err
    pos += jlen
    if expect_config is not None and expect_config.digest() != config.digest():
        raise CheckpointError("config hash mismatch")
    params = {}
    for name, shape in param_shapes(config).items():
        if len(buf) < pos + 4:
            raise CheckpointError("truncated payload")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + 4 * rank:
            raise CheckpointError("truncated payload")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        if tuple(dims) != tuple(shape):
            raise CheckpointError(f"shape mismatch for {name}: {dims} != {shape}")
        nbytes = 4 * int(np.prod(dims))
        if len(buf) < pos + nbytes:
            raise CheckpointError("truncated payload")
        params[name] = np.frombuffer(buf, "<f4", int(np.prod(dims)), pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError("trailing bytes after payload")
    return params, config


def load_checkpoint(file, expect_config: CrnConfig | None = None):
    return parse_checkpoint(Path(file).read_bytes(), expect_config)
