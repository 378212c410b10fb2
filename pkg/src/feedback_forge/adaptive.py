"""Classical feedback controllers: RLS canceller and multichannel Wiener filter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loop import Enhancer
from .signals import FrameStream, StftConfig


class RlsDivergedError(FloatingPointError):
    def __init__(self, msg="RLS diverged"):
        super().__init__(msg)


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, msg="singular covariance"):
        super().__init__(msg)


# --------------------------------------------------------------------------
# RLS


@dataclass
class RlsState:
    """Exponentially weighted RLS; ``history[0]`` is the newest reference sample."""

    coeffs: np.ndarray
    P: np.ndarray
    lam: float = 0.999
    delta_init: float = 1e3
    history: np.ndarray = field(default=None)

    @classmethod
    def init(cls, order: int, lam: float = 0.999, delta_init: float = 1e3) -> "RlsState":
        if order < 1:
            raise ValueError("RLS order must be >= 1")
        if not 0.0 < lam <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if delta_init <= 0:
            raise ValueError("delta_init must be positive")
        return cls(np.zeros(order), delta_init * np.eye(order), lam, delta_init, np.zeros(order))

    @property
    def order(self) -> int:
        return self.coeffs.size


def rls_step(state: RlsState, mic_ref_sample: float, loudspeaker_sample: float):
    """One RLS update.  Returns the a-priori error (feedback-cancelled mic sample)
    and the updated state (modified in place)."""
    u = state.history
    u[1:] = u[:-1]
    u[0] = loudspeaker_sample
    e = mic_ref_sample - state.coeffs @ u
    if not u.any():
        # no excitation: the update below is the identity up to 1/lambda scaling of P
        state.P /= state.lam
        return e, state
    Pu = state.P @ u
    k = Pu / (state.lam + u @ Pu)
    state.coeffs += k * e
    P = (state.P - np.outer(k, Pu)) / state.lam
    state.P = 0.5 * (P + P.T)
    if not (np.isfinite(e) and np.all(np.isfinite(k))):
        raise RlsDivergedError()
    return e, state


class RlsEnhancer(Enhancer):
    """Feedback canceller on the reference mic, loudspeaker signal as reference."""

    name = "rls"

    def __init__(self, order: int = 256, lam: float = 0.999, delta_init: float = 1e3,
                 ref_mode: str = "loudspeaker", ref_mic: int = 0):
        if ref_mode != "loudspeaker":
            raise ValueError(f"unsupported ref_mode {ref_mode!r}")
        RlsState.init(order, lam, delta_init)  # validates
        self.order, self.lam, self.delta_init = order, lam, delta_init
        self.ref_mic = ref_mic
        self.state = None

    def reset(self, n_mics, block_size):
        if not 0 <= self.ref_mic < n_mics:
            raise IndexError(f"bad channel index {self.ref_mic}")
        self.state = RlsState.init(self.order, self.lam, self.delta_init)

    def process(self, mics, speaker):
        if self.state is None:
            raise RuntimeError("reset() must be called before process()")
        m = mics[self.ref_mic]
        out = np.empty(m.size)
        for n in range(m.size):
            out[n], _ = rls_step(self.state, m[n], speaker[n])
        if not np.all(np.isfinite(self.state.P)):
            raise RlsDivergedError()
        return out


def make_rls_enhancer(order: int = 256, lam: float = 0.999, delta_init: float = 1e3,
                      ref_mode: str = "loudspeaker", ref_mic: int = 0) -> RlsEnhancer:
    return RlsEnhancer(order, lam, delta_init, ref_mode, ref_mic)


# --------------------------------------------------------------------------
# multichannel Wiener filter


@dataclass
class WienerState:
    """Per-bin recursive correlation estimates.

    phi_mm: (K, N, N) Hermitian, phi_ms: (K, N).  ``epsilon`` is the
    diagonal loading relative to trace(phi_mm) / N.
    """

    phi_mm: np.ndarray
    phi_ms: np.ndarray
    alpha: float = 0.05
    epsilon: float = 1e-6

    @classmethod
    def init(cls, n_bins: int, n_mics: int, alpha: float = 0.05, epsilon: float = 1e-6):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        return cls(np.zeros((n_bins, n_mics, n_mics), complex),
                   np.zeros((n_bins, n_mics), complex), alpha, epsilon)


def mcwf_update(state: WienerState, mic_frame: np.ndarray, ref_frame: np.ndarray) -> WienerState:
    """Recursive averaging of m m^H and m ref^* for every bin.

    ``mic_frame`` is (N, K) complex, ``ref_frame`` (K,) complex.
    """
    m = np.asarray(mic_frame)
    r = np.asarray(ref_frame).reshape(-1)
    K, N = state.phi_ms.shape
    if m.shape != (N, K) or r.shape != (K,):
        raise ValueError(f"dimension mismatch: mics {m.shape}, ref {r.shape}, state ({N}, {K})")
    a = state.alpha
    mt = m.T  # (K, N)
    outer = mt[:, :, None] * mt.conj()[:, None, :]
    phi = (1 - a) * state.phi_mm + a * outer
    state.phi_mm = 0.5 * (phi + phi.conj().transpose(0, 2, 1))
    state.phi_ms = (1 - a) * state.phi_ms + a * mt * r.conj()[:, None]
    return state


def _hpd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b per bin via Cholesky; A (K, N, N) Hermitian PD, b (K, N)."""
    try:
        Lc = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as err:
        raise SingularCovarianceError() from err
    K, N = b.shape
    z = np.zeros((K, N), complex)
    for i in range(N):
        z[:, i] = (b[:, i] - np.einsum("kj,kj->k", Lc[:, i, :i], z[:, :i])) / Lc[:, i, i]
    x = np.zeros((K, N), complex)
    LH = Lc.conj().transpose(0, 2, 1)
    for i in reversed(range(N)):
        x[:, i] = (z[:, i] - np.einsum("kj,kj->k", LH[:, i, i + 1:], x[:, i + 1:])) / LH[:, i, i]
    if not np.all(np.isfinite(x)):
        raise SingularCovarianceError()
    return x


def wiener_weights(state: WienerState) -> np.ndarray:
    """(K, N) filter w = (phi_mm + eps I)^-1 phi_ms."""
    K, N = state.phi_ms.shape
    tr = np.real(np.trace(state.phi_mm, axis1=1, axis2=2))
    load = np.maximum(state.epsilon * tr / N, np.finfo(float).tiny)
    A = state.phi_mm + load[:, None, None] * np.eye(N)
    return _hpd_solve(A, state.phi_ms)


def mcwf_apply(state: WienerState, mic_frame: np.ndarray) -> np.ndarray:
    """w^H m per bin; ``mic_frame`` is (N, K), result (K,)."""
    w = wiener_weights(state)
    return np.einsum("kn,nk->k", w.conj(), np.asarray(mic_frame))


class HybridEnhancer(Enhancer):
    """MCWF steered by an inner enhancer's output as the desired-signal reference.

    Mics are delayed by the inner latency so both STFT streams line up.
    """

    name = "hybrid"

    def __init__(self, inner: Enhancer, stft_cfg: StftConfig = StftConfig(128, 64),
                 alpha: float = 0.05, epsilon: float = 1e-6):
        self.inner = inner
        self.stft_cfg = stft_cfg
        self.alpha, self.epsilon = alpha, epsilon

    def latency(self, block_size):
        if self.stft_cfg.hop % block_size:
            raise ValueError(f"block size {block_size} must divide hop {self.stft_cfg.hop}")
        return self.inner.latency(block_size) + self.stft_cfg.frame_len - block_size

    def reset(self, n_mics, block_size):
        self.inner.reset(n_mics, block_size)
        self._lag = self.inner.latency(block_size)
        self._mic_line = np.zeros((n_mics, self._lag))
        self._mics = FrameStream(self.stft_cfg, n_mics, block_size)
        self._ref = FrameStream(self.stft_cfg, 1, block_size)
        self.state = WienerState.init(self.stft_cfg.n_bins, n_mics, self.alpha, self.epsilon)

    def process(self, mics, speaker):
        r = self.inner.process(mics, speaker)
        if self._lag:
            line = np.concatenate([self._mic_line, mics], axis=1)
            delayed, self._mic_line = line[:, : mics.shape[1]], line[:, mics.shape[1]:]
        else:
            delayed = mics
        for M, R in zip(self._mics.push(delayed), self._ref.push(r)):
            mcwf_update(self.state, M, R[0])
            self._mics.add_frame(mcwf_apply(self.state, M))
        return self._mics.pull()


def make_hybrid_enhancer(inner: Enhancer, stft_cfg: StftConfig = StftConfig(128, 64),
                         alpha: float = 0.05, epsilon: float = 1e-6) -> HybridEnhancer:
    return HybridEnhancer(inner, stft_cfg, alpha, epsilon)


def make_mcwf_enhancer(stft_cfg: StftConfig = StftConfig(128, 64), alpha: float = 0.05,
                       epsilon: float = 1e-6, rls_order: int = 256, lam: float = 0.999,
                       delta_init: float = 1e3, ref_mic: int = 0) -> HybridEnhancer:
    """Purely classical variant: the Wiener reference comes from an RLS canceller."""
    enh = HybridEnhancer(RlsEnhancer(rls_order, lam, delta_init, ref_mic=ref_mic),
                         stft_cfg, alpha, epsilon)
    enh.name = "mcwf"
    return enh
