import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedback_forge.adaptive import (HybridEnhancer, RlsDivergedError, RlsEnhancer, RlsState,
                                     SingularCovarianceError, WienerState, _hpd_solve,
                                     make_hybrid_enhancer, make_mcwf_enhancer, make_rls_enhancer,
                                     mcwf_apply, mcwf_update, rls_step, wiener_weights)
from feedback_forge.loop import (LoopConfig, OracleEnhancer, Passthrough, ZeroEnhancer,
                                 run_controlled_loop, run_default_loop)
from feedback_forge.room import FeedbackPathSet
from feedback_forge.signals import MonoSignal, StftConfig, snr_db

from oracles import regressors

FS = 16000


def mono(x):
    return MonoSignal(np.asarray(x, dtype=float), FS)


def run_rls(state, m, y):
    e = np.empty(m.size)
    for t in range(m.size):
        e[t], _ = rls_step(state, m[t], y[t])
    return e


# RLS


def test_rls_state_validation():
    with pytest.raises(ValueError):
        RlsState.init(0)
    with pytest.raises(ValueError):
        RlsState.init(4, lam=0.0)
    with pytest.raises(ValueError):
        RlsState.init(4, delta_init=-1.0)


def test_rls_no_excitation():
    st_ = RlsState.init(8)
    m = np.random.default_rng(0).standard_normal(100)
    e = run_rls(st_, m, np.zeros(100))
    assert np.array_equal(e, m) and not st_.coeffs.any()


def test_rls_system_identification():
    rng = np.random.default_rng(1)
    h = rng.standard_normal(32) * np.exp(-np.arange(32) / 8)
    y = rng.standard_normal(5000)
    m = regressors(y, 32) @ h
    st_ = RlsState.init(32, lam=0.999, delta_init=1e3)
    run_rls(st_, m, y)
    assert np.linalg.norm(st_.coeffs - h) / np.linalg.norm(h) < 1e-2
    assert np.allclose(st_.P, st_.P.T) and np.all(np.isfinite(st_.P))


def test_rls_unit_lambda_is_batch_least_squares():
    rng = np.random.default_rng(2)
    h = rng.standard_normal(16)
    y = rng.standard_normal(3000)
    X = regressors(y, 16)
    m = X @ h + 0.05 * rng.standard_normal(3000)
    st_ = RlsState.init(16, lam=1.0, delta_init=1e3)
    run_rls(st_, m, y)
    w_ls = np.linalg.lstsq(X, m, rcond=None)[0]
    assert np.linalg.norm(st_.coeffs - w_ls) / np.linalg.norm(w_ls) < 1e-6


def test_rls_divergence_detected():
    st_ = RlsState.init(2, lam=1.0)
    with np.errstate(invalid="ignore"), pytest.raises(RlsDivergedError, match="RLS diverged"):
        rls_step(st_, np.inf, 1.0)


def test_rls_enhancer_zero_paths_is_passthrough():
    rng = np.random.default_rng(3)
    s = 0.01 * rng.standard_normal(4000)
    cfg = LoopConfig(gain_db=40.0)
    # the regressor (delayed, amplified output) is uncorrelated with the mic, so
    # past the start-up transient the canceller leaves the mic nearly untouched
    run = run_controlled_loop(mono(s), FeedbackPathSet.zeros(2), cfg, make_rls_enhancer(order=32))
    err = (run.enhanced.samples - s)[2000:]
    assert np.sqrt(np.mean(err**2)) < 0.2 * np.sqrt(np.mean(s[2000:] ** 2))


def test_rls_enhancer_in_loop_finite_and_deterministic():
    rng = np.random.default_rng(4)
    s = 0.003 * rng.standard_normal(FS // 2)
    paths = FeedbackPathSet(0.002 * rng.standard_normal((2, 2, 48)))
    cfg = LoopConfig(gain_db=40.0, delay_ms=8.0)
    enh = make_rls_enhancer(order=64)
    a = run_controlled_loop(mono(s), paths, cfg, enh)
    b = run_controlled_loop(mono(s), paths, cfg, enh)  # reset() inside the loop
    assert np.all(np.isfinite(a.enhanced.samples))
    assert np.array_equal(a.enhanced.samples, b.enhanced.samples)


def test_rls_enhancer_reduces_howling():
    rng = np.random.default_rng(5)
    s = 0.003 * rng.standard_normal(2 * FS)
    paths = FeedbackPathSet.pure_delay([0.02], 5)
    cfg = LoopConfig(gain_db=40.0, delay_ms=8.0)  # loop gain 2
    from feedback_forge.metrics import evaluate_run
    base = evaluate_run(run_default_loop(mono(s), paths, cfg), mono(s))
    rls = evaluate_run(run_controlled_loop(mono(s), paths, cfg, make_rls_enhancer(order=16)),
                       mono(s))
    assert base.howling_incidence_pct > 90 and rls.howling_incidence_pct < base.howling_incidence_pct


# Wiener


def test_mcwf_update_alpha_one_and_shapes():
    rng = np.random.default_rng(6)
    st_ = WienerState.init(3, 2, alpha=1.0)
    m = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    r = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    mcwf_update(st_, m, r)
    for k in range(3):
        assert np.allclose(st_.phi_mm[k], np.outer(m[:, k], m[:, k].conj()), atol=1e-15)
        assert np.allclose(st_.phi_ms[k], m[:, k] * r[k].conj(), atol=1e-15)
    with pytest.raises(ValueError, match="dimension mismatch"):
        mcwf_update(st_, m[:, :2], r)


def test_mcwf_constant_frames_fixed_point():
    rng = np.random.default_rng(7)
    m = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    r = rng.standard_normal(4) + 0j
    st_ = WienerState.init(4, 2, alpha=0.2)
    for _ in range(400):
        mcwf_update(st_, m, r)
    target = np.einsum("nk,mk->knm", m, m.conj())
    assert np.max(np.abs(st_.phi_mm - target)) < 1e-10


def test_mcwf_white_covariance():
    rng = np.random.default_rng(8)
    st_ = WienerState.init(1, 3, alpha=0.001)
    frames = (rng.standard_normal((20000, 3, 1)) + 1j * rng.standard_normal((20000, 3, 1))) / np.sqrt(2)
    for f in frames:
        mcwf_update(st_, f, np.zeros(1, complex))
    est = st_.phi_mm[0]
    assert np.linalg.norm(est - np.eye(3)) / np.linalg.norm(np.eye(3)) < 0.05
    assert np.allclose(est, est.conj().T, atol=1e-12)
    assert np.all(np.diag(est).real >= 0) and np.allclose(np.diag(est).imag, 0)


def test_hpd_solve_matches_numpy():
    rng = np.random.default_rng(9)
    A0 = rng.standard_normal((5, 3, 3)) + 1j * rng.standard_normal((5, 3, 3))
    A = A0 @ A0.conj().transpose(0, 2, 1) + 0.1 * np.eye(3)
    b = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
    x = _hpd_solve(A, b)
    assert np.allclose(np.einsum("knm,km->kn", A, x), b, atol=1e-12)
    with pytest.raises(SingularCovarianceError, match="singular covariance"):
        _hpd_solve(-A, b)


def test_mcwf_identity_and_dead_channel():
    rng = np.random.default_rng(10)
    st1 = WienerState.init(1, 1, epsilon=1e-10)
    st2 = WienerState.init(1, 2, epsilon=1e-10)
    for _ in range(300):
        s = rng.standard_normal(1) + 1j * rng.standard_normal(1)
        mcwf_update(st1, s[None, :], s)
        mcwf_update(st2, np.stack([s, np.zeros(1)]), s)
    assert abs(wiener_weights(st1)[0, 0] - 1) < 1e-6
    assert abs(mcwf_apply(st1, np.array([[2.0 + 1j]]))[0] - (2.0 + 1j)) < 1e-5
    w = wiener_weights(st2)[0]
    assert abs(w[0] - 1) < 1e-6 and abs(w[1]) < 1e-6


def _two_mic_scene(rng, n_frames, K=4):
    s = rng.standard_normal((n_frames, K)) + 1j * rng.standard_normal((n_frames, K))
    n1 = 0.7 * (rng.standard_normal((n_frames, K)) + 1j * rng.standard_normal((n_frames, K)))
    n2 = 0.5 * (rng.standard_normal((n_frames, K)) + 1j * rng.standard_normal((n_frames, K)))
    mics = np.stack([s + n1, 0.6 * s + n2], axis=1)     # (L, 2, K)
    return s, mics


def test_mcwf_matches_batch_normal_equations():
    rng = np.random.default_rng(11)
    alpha = 0.01
    s, mics = _two_mic_scene(rng, 1500)
    st_ = WienerState.init(4, 2, alpha=alpha, epsilon=1e-12)
    for m, r in zip(mics, s):
        mcwf_update(st_, m, r)
    w = wiener_weights(st_)
    L = len(s)
    wts = alpha * (1 - alpha) ** np.arange(L - 1, -1, -1)
    for k in range(4):
        M = mics[:, :, k]
        Phi = (M.T * wts) @ M.conj()
        phi = (M.T * wts) @ s[:, k].conj()
        w_ref = np.linalg.solve(Phi, phi)
        assert np.linalg.norm(w[k] - w_ref) / np.linalg.norm(w_ref) < 1e-6
        # orthogonality of the residual with every mic channel
        res = s[:, k] - M @ w[k].conj()
        for n in range(2):
            c = np.abs(np.sum(wts * M[:, n] * res.conj()))
            norm = np.sqrt(np.sum(wts * np.abs(M[:, n]) ** 2) * np.sum(wts * np.abs(res) ** 2))
            assert c / norm < 1e-2


def test_mcwf_closed_form_mmse():
    # m1 = s + n, m2 = n, uncorrelated: w = [1, -1] reproduces s exactly
    rng = np.random.default_rng(12)
    st_ = WienerState.init(1, 2, alpha=0.05, epsilon=1e-12)
    for _ in range(500):
        s = rng.standard_normal(1) + 1j * rng.standard_normal(1)
        n = 2.0 * (rng.standard_normal(1) + 1j * rng.standard_normal(1))
        mcwf_update(st_, np.stack([s + n, n]), s)
    assert np.allclose(wiener_weights(st_)[0], [1.0, -1.0], atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100.0))
def test_mcwf_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    s, mics = _two_mic_scene(rng, 200)
    a, b = WienerState.init(4, 2), WienerState.init(4, 2)
    for m, r in zip(mics, s):
        mcwf_update(a, m, r)
        mcwf_update(b, c * m, r)
    probe = mics[-1]
    assert np.allclose(mcwf_apply(b, c * probe), mcwf_apply(a, probe), rtol=1e-8, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_mcwf_hermitian_invariant(seed):
    rng = np.random.default_rng(seed)
    st_ = WienerState.init(3, 3, alpha=float(rng.uniform(0.01, 1.0)))
    for _ in range(30):
        m = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        mcwf_update(st_, m, rng.standard_normal(3) + 0j)
    P = st_.phi_mm
    assert np.max(np.abs(P - P.conj().transpose(0, 2, 1))) <= 1e-12
    d = np.diagonal(P, axis1=1, axis2=2)
    assert np.all(d.imag == 0) and np.all(d.real >= 0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0.99, 1.0))
def test_rls_p_stays_symmetric(seed, lam):
    rng = np.random.default_rng(seed)
    st_ = RlsState.init(8, lam=lam)
    y = rng.standard_normal(400)
    run_rls(st_, rng.standard_normal(400), y)
    assert np.array_equal(st_.P, st_.P.T) and np.all(np.isfinite(st_.P))


# hybrid


def test_hybrid_latency_and_zero_inner():
    enh = make_hybrid_enhancer(ZeroEnhancer(), StftConfig(128, 64))
    assert enh.latency(64) == 64 and enh.latency(16) == 112
    with pytest.raises(ValueError):
        enh.latency(48)
    s = 0.01 * np.random.default_rng(13).standard_normal(4000)
    run = run_controlled_loop(mono(s), FeedbackPathSet.zeros(2), LoopConfig(), enh)
    assert not run.enhanced.samples.any()


def test_hybrid_single_mic_scalar_wiener():
    # N = 1: output is the mic re-filtered by Phi_ms / (Phi_mm + load) per bin
    rng = np.random.default_rng(14)
    s = 0.01 * rng.standard_normal(3000)
    cfg = LoopConfig(gain_db=0.0, block_size=64)
    stft_cfg = StftConfig(128, 64)
    enh = make_hybrid_enhancer(Passthrough(0), stft_cfg, alpha=0.1, epsilon=1e-6)
    run = run_controlled_loop(mono(s), FeedbackPathSet.zeros(1), cfg, enh)
    # inner is passthrough and the mic is the reference, so w = 1/(1 + eps) per bin;
    # only the STFT edges at both ends differ
    inner = slice(128, 3000 - 128)
    assert snr_db(mono(s[inner]), mono(run.enhanced.samples[inner])) > 100.0


def test_hybrid_with_oracle_inner_helps():
    rng = np.random.default_rng(15)
    T = FS
    s = 0.003 * rng.standard_normal(T)
    paths = FeedbackPathSet.pure_delay([0.05, 0.025], 2)
    cfg = LoopConfig(gain_db=40.0, delay_ms=8.0)
    tgt = mono(s)
    hyb = run_controlled_loop(tgt, paths, cfg, make_hybrid_enhancer(OracleEnhancer(tgt)))
    base = run_default_loop(tgt, paths, cfg)
    warm = FS // 4
    n = T - hyb.latency
    snr_h = snr_db(mono(s[warm:n]), mono(hyb.enhanced.samples[warm:n]))
    snr_b = snr_db(mono(s[warm:n]), mono(base.enhanced.samples[warm:n]))
    assert snr_h > 10.0 and snr_h > snr_b + 10.0


def test_mcwf_enhancer_runs_in_loop():
    rng = np.random.default_rng(16)
    s = 0.003 * rng.standard_normal(FS // 2)
    paths = FeedbackPathSet.pure_delay([0.01, 0.008], 3)
    enh = make_mcwf_enhancer(rls_order=16)
    assert isinstance(enh, HybridEnhancer) and isinstance(enh.inner, RlsEnhancer)
    run = run_controlled_loop(mono(s), paths, LoopConfig(gain_db=40.0), enh)
    assert run.enhancer == "mcwf" and np.all(np.isfinite(run.enhanced.samples))
