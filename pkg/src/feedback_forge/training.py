"""Training strategies for the CRN: teacher forcing and in-a-loop, both on the SNR loss.

Teacher forcing builds microphone signals offline with the loudspeakers
replaying the clean target, so the model never sees its own errors.
In-a-loop training runs the model inside the simulated feedback loop and
backpropagates through the loop as well: gain (linear), delay (index
shift), clipping (derivative 0 outside the bounds) and the feedback FIRs.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import crn as C
from .loop import LoopConfig, feedback_signal, feedback_block
from .room import (FeedbackPathSet, RoomSpec, build_feedback_paths, glasses_geometry,
                   load_paths, perturb_paths, source_images)
from .signals import (DEFAULT_FS, MonoSignal, MultiSignal, fir_convolve, read_wav, rms,
                      speechlike, write_wav)

log = logging.getLogger(__name__)

LOSS_EPS = 1e-8


class TrainingDivergedError(FloatingPointError):
    """Raised on a non-finite loss or gradient; ``last_good`` holds the last finite params."""

    def __init__(self, msg="training diverged", last_good=None, trace=None):
        super().__init__(msg)
        self.last_good = last_good
        self.trace = trace or []


# --------------------------------------------------------------------------
# loss


def snr_loss(target, estimate):
    """Negative SNR in dB, -10 log10(|s|^2 / (|s - s_hat|^2 + eps)), and d/d s_hat.

    eps = 1e-8 |s|^2 floors the loss at -80 dB.
    """
    s = np.asarray(getattr(target, "samples", target), dtype=float)
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=float)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {e.shape}")
    S = float(np.sum(s * s))
    if S == 0.0:
        raise ValueError("zero target: SNR loss undefined")
    r = s - e
    den = float(np.sum(r * r)) + LOSS_EPS * S
    loss = 10.0 * math.log10(den / S)
    grad = (-20.0 / math.log(10.0)) * r / den
    return loss, grad


# --------------------------------------------------------------------------
# scenarios


@dataclass
class ScenarioSpec:
    """One training/evaluation scene.

    ``gain_db`` and ``delay_ms`` are a number or a [lo, hi] range drawn
    uniformly per example.  The feedback paths come from ``paths`` (an
    explicit set), ``paths_file`` (FPS1) or the image method on ``room``
    with a glasses geometry seeded by ``geometry_seed``.  With
    ``reverberant`` the mics get image-method source images and the target
    is the reference image truncated ``early_ms`` after the direct path;
    otherwise every mic sees the dry source.
    """

    source: str = "speechlike"
    source_level: float = 0.003
    source_offset_s: float = 0.0
    duration_s: float = 2.0
    room: RoomSpec | None = None
    geometry_seed: int | None = None
    paths: FeedbackPathSet | None = None
    paths_file: str | None = None
    reverberant: bool = False
    early_ms: float = 50.0
    gain_db: float | tuple = 40.0
    delay_ms: float | tuple = 8.0
    clip: tuple = (-1000.0, 1000.0)
    perturb_sigma: float = 0.0
    ref_mic: int = 0
    seed: int = 0
    sample_rate_hz: int = DEFAULT_FS

    def __post_init__(self):
        lo, hi = _range(self.gain_db)
        if not (0.0 <= lo <= hi <= 120.0):
            raise ValueError("gain range must lie within [0, 120] dB")
        dlo, dhi = _range(self.delay_ms)
        if not 0 < dlo <= dhi:
            raise ValueError("delay must be positive")
        if self.perturb_sigma < 0:
            raise ValueError("perturb_sigma must be non-negative")


def _range(v):
    if isinstance(v, (list, tuple)):
        lo, hi = float(v[0]), float(v[1])
        return lo, hi
    return float(v), float(v)


@dataclass
class Scene:
    images: MultiSignal
    target: MonoSignal
    paths: FeedbackPathSet
    loop: LoopConfig
    meta: dict = field(default_factory=dict)

    @property
    def n_mics(self) -> int:
        return self.images.n_channels


def _load_source(spec: ScenarioSpec, n: int, rng) -> np.ndarray:
    fs = spec.sample_rate_hz
    if spec.source == "speechlike":
        return speechlike(n / fs, fs, int(rng.integers(2**31)), spec.source_level).samples
    if spec.source == "noise":
        x = rng.standard_normal(n)
        return x * spec.source_level
    sig = read_wav(spec.source)
    x = sig.samples if isinstance(sig, MonoSignal) else sig.channels[0]
    a = int(round(spec.source_offset_s * sig.sample_rate_hz))
    x = x[a : a + n]
    if x.size < n:
        raise ValueError(f"source {spec.source} shorter than {spec.duration_s} s")
    r = rms(x)
    return x * (spec.source_level / r) if r > 0 else x


def build_scene(spec: ScenarioSpec, block_size: int = 64) -> Scene:
    """Draw gain/delay, synthesize source, images, target and paths for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    glo, ghi = _range(spec.gain_db)
    dlo, dhi = _range(spec.delay_ms)
    gain = float(rng.uniform(glo, ghi)) if ghi > glo else glo
    delay = float(rng.uniform(dlo, dhi)) if dhi > dlo else dlo
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    src = _load_source(spec, n, rng)

    geom = None
    if spec.paths is not None:
        paths = spec.paths
    elif spec.paths_file is not None:
        paths = load_paths(spec.paths_file)
    else:
        room = spec.room or RoomSpec()
        geom = glasses_geometry(seed=spec.geometry_seed)
        paths = build_feedback_paths(room, geom, fs)
    paths = perturb_paths(paths, spec.perturb_sigma, spec.seed)

    if spec.reverberant:
        room = spec.room or RoomSpec()
        geom = geom or glasses_geometry(seed=spec.geometry_seed)
        a = source_images(room, geom, fs)[: paths.n_mics]
        images = np.stack([fir_convolve(src, ai) for ai in a])
        ref = a[spec.ref_mic]
        onset = int(np.flatnonzero(ref)[0])
        early = ref[: onset + int(round(spec.early_ms * fs / 1000.0))]
        target = fir_convolve(src, early)
    else:
        images = np.repeat(src[None, :], paths.n_mics, axis=0)
        target = src
    loop = LoopConfig(gain_db=gain, delay_ms=delay, clip_lo=spec.clip[0], clip_hi=spec.clip[1],
                      block_size=min(block_size, int(round(delay * fs / 1000.0))),
                      ref_mic=spec.ref_mic, sample_rate_hz=fs)
    meta = {"gain_db": gain, "delay_ms": delay, "perturb_sigma": spec.perturb_sigma,
            "paths_sha256": paths.sha256(), "seed": spec.seed}
    return Scene(MultiSignal(images, fs), MonoSignal(target, fs), paths, loop, meta)


def toy_scenario(seed: int = 0, duration_s: float = 0.5, gains=(0.05, 0.025),
                 path_delay: int = 2, gain_db=40.0, delay_ms=8.0, level: float = 0.003,
                 source: str = "speechlike") -> ScenarioSpec:
    """Desk-scale scene: dry source on every mic, one speaker, pure-delay paths.

    The feedback reaches the mics with different gains but the same delay,
    so a fixed spatial combination of the mics can null it.
    """
    return ScenarioSpec(source=source, source_level=level, duration_s=duration_s,
                        paths=FeedbackPathSet.pure_delay(gains, path_delay),
                        gain_db=gain_db, delay_ms=delay_ms, seed=seed)


# --------------------------------------------------------------------------
# teacher-forcing data


def teacher_forcing_mics(scene: Scene):
    """y = clip(G s(t - D)) and m_i = s_i + sum_j h_ij * y.  Returns (mics, speaker)."""
    cfg = scene.loop
    s = scene.target.samples
    D = cfg.delay_samples
    y = np.zeros(s.size)
    y[D:] = cfg.speaker(s[: s.size - D])
    taps = np.ascontiguousarray(scene.paths.speaker_sum().T)
    m = scene.images.channels + feedback_signal(taps, y)
    return m, y


def gen_teacher_forcing_example(scenario: ScenarioSpec | Scene):
    scene = scenario if isinstance(scenario, Scene) else build_scene(scenario)
    m, y = teacher_forcing_mics(scene)
    fs = scene.loop.sample_rate_hz
    meta = dict(scene.meta, speaker=MonoSignal(y, fs))
    return MultiSignal(m, fs), scene.target, meta


@dataclass
class Example:
    mics: np.ndarray
    target: np.ndarray
    speaker: np.ndarray | None = None


def gen_dataset(scenarios, out_dir, master_seed: int = 0) -> dict:
    """Write WAV triples and ``manifest.json``.  Scenario seeds are replaced by
    seeds spawned from ``master_seed`` so the whole set is reproducible."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(master_seed).generate_state(len(scenarios))
    entries = []
    for idx, (spec, seed) in enumerate(zip(scenarios, seeds)):
        spec = replace(spec, seed=int(seed))
        mics, target, meta = gen_teacher_forcing_example(spec)
        names = {k: f"ex{idx:04d}_{k}.wav" for k in ("mics", "target", "speaker")}
        write_wav(out / names["mics"], mics)
        write_wav(out / names["target"], target)
        write_wav(out / names["speaker"], meta["speaker"])
        entries.append({
            "mics_wav": names["mics"], "target_wav": names["target"],
            "speaker_wav": names["speaker"], "gain_db": meta["gain_db"],
            "delay_ms": meta["delay_ms"], "perturb_sigma": meta["perturb_sigma"],
            "paths_sha256": meta["paths_sha256"], "seed": int(seed),
        })
    manifest = {"version": 1, "master_seed": master_seed, "examples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path) -> list:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    base = path.parent
    data = []
    for ex in manifest["examples"]:
        mics = read_wav(base / ex["mics_wav"])
        target = read_wav(base / ex["target_wav"])
        spk = read_wav(base / ex["speaker_wav"]).samples if "speaker_wav" in ex else None
        m = mics.channels if isinstance(mics, MultiSignal) else mics.samples[None, :]
        data.append(Example(m, target.samples, spk))
    return data


def example_from_scene(scene: Scene) -> Example:
    m, y = teacher_forcing_mics(scene)
    return Example(m, scene.target.samples.copy(), y)


# --------------------------------------------------------------------------
# shared per-frame plumbing


def _frame_spectrum(seg: np.ndarray, stft) -> np.ndarray:
    return np.fft.rfft(seg * stft.analysis, axis=-1)


def _check_lengths(config: C.CrnConfig, T: int):
    if config.stft.n_frames(T) < 2:
        raise ValueError("example shorter than two STFT frames")


def tf_loss_and_grad(params: dict, config: C.CrnConfig, ex: Example, need_grad: bool = True):
    """SNR loss of istft(CRN(stft(mics))) on the STFT interior, and parameter grads."""
    st = config.stft
    F, H = st.frame_len, st.hop
    T = ex.target.size
    _check_lengths(config, T)
    nF = st.n_frames(T)
    state = C.zero_state(config)
    tape = [] if need_grad else None
    s_hat = np.zeros(T)
    cache = []
    for ell in range(nF):
        a = ell * H
        M = _frame_spectrum(ex.mics[:, a : a + F], st)
        Y = _frame_spectrum(ex.speaker[a : a + F], st) if config.uses_speaker else None
        feats = C.spectra_to_features(config, M, Y)
        out, state = C.crn_forward_frame(params, config, state, feats, tape)
        s_hat[a : a + F] += np.fft.irfft(C.output_to_spectrum(config, out, M), n=F) * st.synthesis
        cache.append((M, out))
    region = st.interior(T)
    loss, g_region = snr_loss(ex.target[region], s_hat[region])
    if not need_grad:
        return loss, None, s_hat
    g = np.zeros(T)
    g[region] = g_region
    grads = C.zero_grads(params)
    d_state = None
    for ell in reversed(range(nF)):
        a = ell * H
        M, out = cache[ell]
        dS = C.irfft_adjoint(g[a : a + F] * st.synthesis, F)
        d_out, _ = C.spectrum_grad_to_output(config, dS, out, M)
        _, d_state = C.backward_frame(params, config, tape[ell], d_out, d_state, grads)
    return loss, grads, s_hat


def loop_loss_and_grad(params: dict, config: C.CrnConfig, scene: Scene, need_grad: bool = True,
                       truncation: int | None = None, stop_grad_speaker: bool = False):
    """Run the CRN inside the feedback loop frame by frame and backpropagate
    the SNR loss through the whole unrolled loop.

    Frame ell needs mic samples up to ell*H + F - 1, whose feedback only
    depends on estimates at least D samples older; with D >= F those are
    already final, so the frame recursion is exact.  ``truncation`` (in
    frames) cuts both the LSTM state gradient and the loop-path gradient at
    chunk boundaries.
    """
    st = config.stft
    F, H = st.frame_len, st.hop
    cfg = scene.loop
    D = cfg.delay_samples
    if D < F:
        raise ValueError(f"latency exceeds loop delay: frame {F} > delay {D} samples")
    s_img = scene.images.channels
    target = scene.target.samples
    N, T = s_img.shape
    _check_lengths(config, T)
    nF = st.n_frames(T)
    G = cfg.gain
    taps = np.ascontiguousarray(scene.paths.speaker_sum().T)
    silent = not taps.any()

    m = np.zeros((N, T))
    y = np.zeros(T)
    s_hat = np.zeros(T)
    state = C.zero_state(config)
    tape = [] if need_grad else None
    cache = []
    done = 0
    for ell in range(nF):
        a, end = ell * H, ell * H + F
        lo = done - D
        if end - D > 0:
            src = s_hat[max(lo, 0) : end - D]
            y[done + max(0, -lo) : end] = cfg.speaker(src)
        m[:, done:end] = s_img[:, done:end]
        if not silent:
            m[:, done:end] += feedback_block(taps, y, done, end)
        done = end
        M = _frame_spectrum(m[:, a:end], st)
        Y = _frame_spectrum(y[a:end], st) if config.uses_speaker else None
        feats = C.spectra_to_features(config, M, Y)
        out, state = C.crn_forward_frame(params, config, state, feats, tape)
        s_hat[a:end] += np.fft.irfft(C.output_to_spectrum(config, out, M), n=F) * st.synthesis
        cache.append((M, out))
    region = st.interior(T)
    loss, g_region = snr_loss(target[region], s_hat[region])
    if not need_grad:
        return loss, None, s_hat

    g_s = np.zeros(T)
    g_s[region] = g_region
    g_m = np.zeros((N, T))
    g_y = np.zeros(T)           # direct speaker-feature gradient
    lh = taps.shape[0]
    lo_done = T
    grads = C.zero_grads(params)
    d_state = None
    loop_grad = not stop_grad_speaker and (not silent or config.uses_speaker)
    for ell in reversed(range(nF)):
        a = ell * H
        if truncation and (ell + 1) % truncation == 0 and ell + 1 < nF:
            d_state = None
            g_m[:] = 0.0
            g_y[:] = 0.0
        if loop_grad and a < lo_done:
            # s_hat(t) drives y(t + D) -> mics at t + D + k
            t0, t1 = a + D, min(lo_done + D, T)
            if t1 > t0:
                gm_pad = np.concatenate([g_m[:, t0 : min(t1 + lh - 1, T)],
                                         np.zeros((N, max(0, t1 + lh - 1 - T)))], axis=1)
                win = sliding_window_view(gm_pad, lh, axis=1)        # (N, t1-t0, lh)
                gy = np.einsum("nbk,kn->b", win, taps) + g_y[t0:t1]
                z = G * s_hat[a : a + t1 - t0]
                lin = (z > cfg.clip_lo) & (z < cfg.clip_hi)
                g_s[a : a + t1 - t0] += G * lin * gy
            lo_done = a
        M, out = cache[ell]
        dS = C.irfft_adjoint(g_s[a : a + F] * st.synthesis, F)
        d_out, d_mic_mask = C.spectrum_grad_to_output(config, dS, out, M)
        d_feat, d_state = C.backward_frame(params, config, tape[ell], d_out, d_state, grads)
        if loop_grad:
            d_mic, d_spk = C.features_grad_to_spectra(config, d_feat)
            if d_mic_mask is not None:
                d_mic = d_mic + d_mic_mask
            g_m[:, a : a + F] += C.rfft_adjoint(d_mic, F) * st.analysis
            if d_spk is not None:
                g_y[a : a + F] += C.rfft_adjoint(d_spk, F) * st.analysis
    return loss, grads, s_hat


# --------------------------------------------------------------------------
# optimizers and trainers


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    steps: int | None = None          # overrides epochs when set
    bptt_truncation: int | None = None
    grad_clip: float | None = None
    stop_grad_speaker: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.bptt_truncation is not None and self.bptt_truncation < 1:
            raise ValueError("bptt_truncation must be >= 1")
        self.betas = tuple(self.betas)


class Optimizer:
    def __init__(self, cfg: TrainConfig, params: dict):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> dict:
        cfg = self.cfg
        self.t += 1
        new = {}
        if cfg.optimizer == "sgd":
            for k in params:
                new[k] = params[k] - cfg.lr * grads[k]
            return new
        b1, b2 = cfg.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in params:
            self.m[k] = b1 * self.m[k] + (1 - b1) * grads[k]
            self.v[k] = b2 * self.v[k] + (1 - b2) * grads[k] ** 2
            new[k] = params[k] - cfg.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.adam_eps)
        return new


@dataclass
class TrainResult:
    params: dict
    trace: list                     # (step, loss_db, grad_norm)


def _batches(n: int, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * math.ceil(n / cfg.batch_size)
    step = 0
    while step < total:
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            if step >= total:
                return
            yield order[i : i + cfg.batch_size]
            step += 1


def _train(params: dict, n_items: int, loss_fn, cfg: TrainConfig) -> TrainResult:
    params = {k: v.copy() for k, v in params.items()}
    opt = Optimizer(cfg, params)
    trace = []
    for step, idx in enumerate(_batches(n_items, cfg)):
        tot_loss = 0.0
        grads = None
        for i in idx:
            loss, g = loss_fn(params, int(i))
            tot_loss += loss
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        scale = 1.0 / len(idx)
        loss = tot_loss * scale
        for k in grads:
            grads[k] *= scale
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not (math.isfinite(loss) and math.isfinite(norm)):
            raise TrainingDivergedError(last_good=params, trace=trace)
        trace.append((step, loss, norm))
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            for k in grads:
                grads[k] *= cfg.grad_clip / norm
        params = opt.step(params, grads)
    return TrainResult(params, trace)


def train_teacher_forcing(params: dict, config: C.CrnConfig, dataset: list,
                          cfg: TrainConfig) -> TrainResult:
    if not dataset:
        raise ValueError("empty dataset")
    for ex in dataset:
        if ex.mics.shape[0] != config.n_mics:
            raise ValueError("dataset mic count does not match the model")

    def loss_fn(p, i):
        loss, g, _ = tf_loss_and_grad(p, config, dataset[i])
        return loss, g

    return _train(params, len(dataset), loss_fn, cfg)


def train_in_a_loop(params: dict, config: C.CrnConfig, scenes: list, cfg: TrainConfig) -> TrainResult:
    if not scenes:
        raise ValueError("no scenes")
    scenes = [s if isinstance(s, Scene) else build_scene(s) for s in scenes]

    def loss_fn(p, i):
        loss, g, _ = loop_loss_and_grad(p, config, scenes[i], truncation=cfg.bptt_truncation,
                                        stop_grad_speaker=cfg.stop_grad_speaker)
        return loss, g

    return _train(params, len(scenes), loss_fn, cfg)


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_db", "grad_norm"])
        for step, loss, norm in trace:
            w.writerow([step, repr(float(loss)), repr(float(norm))])
