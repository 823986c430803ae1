import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.fft import dct

from phaseflow.data import ramp_tone
from phaseflow.signal import (
    BEEP_BAND_HZ,
    AudioSignal,
    MfccConfig,
    SignalError,
    band_energy_track,
    cross_correlate_lag,
    cross_correlation,
    detect_beeps,
    detect_growth_events,
    log_mel_energies,
    mel_filterbank,
    mfcc,
    read_wav,
    stft,
    write_wav,
)


def sig(x, sr=8000):
    return AudioSignal(np.asarray(x, dtype=float), sr)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def test_stft_zero():
    spec = stft(sig(np.zeros(1000)), 256, 128)
    assert spec.magnitudes.shape == ((1000 - 256) // 128 + 1, 129)
    assert not spec.magnitudes.any()


def test_stft_bin_centre_sinusoid():
    n, k = 256, 10
    x = np.sin(2 * np.pi * k * np.arange(1024) / n)
    mags = stft(sig(x), n, 100, "rect").magnitudes
    frame = x[:n]
    direct = np.abs([sum(frame[m] * np.exp(-2j * np.pi * b * m / n) for m in range(n)) for b in range(n // 2 + 1)])
    np.testing.assert_allclose(mags[0], direct, atol=1e-8)
    assert (mags.argmax(axis=1) == k).all()


def test_stft_dc():
    mags = stft(sig(np.ones(512)), 128, 64, "rect").magnitudes
    np.testing.assert_allclose(mags[:, 0], 128.0)
    np.testing.assert_allclose(mags[:, 1:], 0.0, atol=1e-9)


def test_stft_errors():
    with pytest.raises(SignalError, match="insufficient samples"):
        stft(sig(np.zeros(100)), 128, 64)
    with pytest.raises(SignalError):
        stft(sig(np.zeros(300)), 100, 64)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["hann", "hamming", "rect"]))
def test_stft_nonnegative(seed, window):
    x = np.random.default_rng(seed).uniform(-1, 1, 700)
    assert (stft(sig(x), 64, 17, window).magnitudes >= 0).all()


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------


def test_mfcc_shape():
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 10 * 8000 + 123)
    assert mfcc(sig(x)).shape == (10, 40)


def test_mfcc_zero_signal():
    cfg = MfccConfig()
    out = mfcc(sig(np.zeros(3 * 8000)), cfg)
    floor_row = dct(np.full(cfg.n_mel_filters, np.log(cfg.log_floor)), type=2, norm="ortho")[:40]
    np.testing.assert_allclose(out, np.tile(floor_row, (3, 1)), rtol=1e-12)


def test_mfcc_tone_peak_filter():
    sr = 16000
    cfg = MfccConfig()
    tone = 0.5 * np.sin(2 * np.pi * 1000 * np.arange(sr) / sr)
    logmel = log_mel_energies(tone, sr, cfg).mean(axis=0)
    _, centres = mel_filterbank(sr, 512, cfg.n_mel_filters, 0.0, sr / 2)
    assert logmel.argmax() == np.abs(centres - 1000).argmin()


def test_mfcc_too_short():
    with pytest.raises(SignalError, match="operation too short"):
        mfcc(sig(np.zeros(7999)))


def test_mfcc_config_validation():
    with pytest.raises(SignalError):
        mfcc(sig(np.zeros(8000)), MfccConfig(n_coeffs=80, n_mel_filters=64))
    with pytest.raises(SignalError):
        mfcc(sig(np.zeros(8000)), MfccConfig(fmax_hz=5000))


def test_mfcc_whole_second_shift():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 4 * 8000)
    base = mfcc(sig(x))
    shifted = mfcc(sig(np.concatenate([np.zeros(8000), x])))
    np.testing.assert_allclose(shifted[1:], base, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(shifted[0], mfcc(sig(np.zeros(8000)))[0])


# ---------------------------------------------------------------------------
# cross-correlation lag
# ---------------------------------------------------------------------------


def naive_lag(a, b, max_lag):
    best, best_v = None, -np.inf
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda l: (abs(l), l)):
        v = sum(a[n] * b[n + lag] for n in range(len(a)) if 0 <= n + lag < len(b)) / norm
        if v > best_v + 1e-12:
            best, best_v = lag, v
    return best


def test_lag_identity():
    x = np.random.default_rng(2).standard_normal(4000)
    assert cross_correlate_lag(sig(x), sig(x), 0.2) == 0.0


def test_lag_pure_shift():
    sr = 1000
    x = np.random.default_rng(3).standard_normal(20 * sr)
    b = np.concatenate([np.zeros(7300), x])[: x.size]
    assert abs(cross_correlate_lag(sig(x, sr), sig(b, sr), 10.0) - 7.3) <= 1 / sr


def test_lag_noisy_shift():
    sr = 2000
    rng = np.random.default_rng(4)
    x = rng.standard_normal(10 * sr)
    k = 3217
    b = np.concatenate([np.zeros(k), x])[: x.size]
    b = b + rng.standard_normal(b.size) * np.sqrt(np.mean(b**2) / 10)
    assert abs(cross_correlate_lag(sig(x, sr), sig(b, sr), 5.0) * sr - k) <= 1


@given(st.integers(0, 2**31 - 1), st.integers(20, 60), st.integers(0, 8))
def test_lag_matches_naive(seed, n, max_lag):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(n), r.standard_normal(n + r.integers(-5, 6))
    assert round(cross_correlate_lag(sig(a, 1), sig(b, 1), max_lag)) == naive_lag(a, b, max_lag)


def test_lag_tie_prefers_small_then_negative():
    lags = np.array([-2, -1, 0, 1, 2])
    from phaseflow.signal import _tie_broken_argmax

    assert _tie_broken_argmax(lags, np.array([1.0, 1.0, 0.0, 1.0, 1.0])) == -1
    assert _tie_broken_argmax(lags, np.array([1.0, 0.0, 0.0, 0.0, 1.0])) == -2


@given(st.integers(0, 2**31 - 1), st.integers(-40, 40))
def test_lag_antisymmetric(seed, shift):
    x = np.random.default_rng(seed).standard_normal(400)
    a = np.concatenate([np.zeros(50), x, np.zeros(50)])
    b = np.roll(a, shift)
    la = cross_correlate_lag(sig(a, 100), sig(b, 100), 0.5)
    lb = cross_correlate_lag(sig(b, 100), sig(a, 100), 0.5)
    assert la == -lb == shift / 100


def test_lag_errors():
    with pytest.raises(SignalError, match="sample-rate"):
        cross_correlate_lag(sig(np.ones(10), 10), sig(np.ones(10), 20), 0.1)
    with pytest.raises(SignalError, match="degenerate signal"):
        cross_correlate_lag(sig(np.zeros(10)), sig(np.ones(10)), 0.1)


def test_correlation_values():
    # sum_n a[n] b[n + lag] by hand, divided by |a| |b| = 5
    lags, vals = cross_correlation(np.array([1.0, 2.0]), np.array([0.0, 1.0, 2.0]), 2)
    assert list(lags) == [-1, 0, 1, 2]
    np.testing.assert_allclose(vals * 5, [0.0, 2.0, 5.0, 2.0], atol=1e-12)


# ---------------------------------------------------------------------------
# band energy and growth events
# ---------------------------------------------------------------------------


def test_band_track_tone():
    sr = 16000
    x = 0.3 * np.sin(2 * np.pi * 542 * np.arange(3 * sr) / sr)
    on = band_energy_track(sig(x, sr), *BEEP_BAND_HZ)
    off = band_energy_track(sig(x, sr), 1000, 1100)
    assert on.min() > 0 and on.std() / on.mean() < 0.05
    assert off.max() < 1e-3 * on.mean()


def test_band_track_zero_and_errors():
    assert not band_energy_track(sig(np.zeros(16000), 16000)).any()
    with pytest.raises(SignalError, match="band too narrow"):
        band_energy_track(sig(np.zeros(16000), 16000), 540.0, 540.5, frame_len_s=0.01)


def test_growth_examples():
    assert detect_growth_events(np.ones(20), 3, 1.5) == []
    assert detect_growth_events([1, 2, 4, 8, 1, 1], 3, 1.5) == [0.0]
    assert detect_growth_events(np.arange(20, 0, -1), 3, 1.1) == []
    assert detect_growth_events([], 3, 1.5) == []


def test_growth_merges_close_runs():
    t = [1, 2, 4, 8, 1, 2, 4, 8]  # second run starts one frame after the first ends
    assert detect_growth_events(t, 3, 1.5) == [0.0]
    t = [1, 2, 4, 8] + [1] * 4 + [1, 2, 4, 8]
    assert detect_growth_events(t, 3, 1.5, frame_hop_s=0.5) == [0.0, 4.0]


@given(st.lists(st.floats(0.0, 100.0), max_size=80), st.integers(2, 6), st.floats(1.01, 3.0))
def test_growth_properties(track, k, r):
    ev = detect_growth_events(track, k, r)
    assert ev == sorted(ev)
    assert len(ev) <= len(track) // k


def test_beep_detection_accuracy():
    sr = 16000
    rng = np.random.default_rng(5)
    x = rng.normal(0, 0.05, 60 * sr)
    starts = [5.0, 21.3, 40.7]
    tone = ramp_tone(sr)
    for s in starts:
        i = int(s * sr)
        x[i : i + tone.size] += tone
    found = detect_beeps(sig(x, sr))
    assert len(found) == len(starts)
    assert max(abs(f - s) for f, s in zip(found, starts)) <= 0.5


def test_beep_noise_only():
    x = np.random.default_rng(6).normal(0, 0.05, 120 * 16000)
    assert detect_beeps(sig(x, 16000)) == []


# ---------------------------------------------------------------------------
# audio signals and WAV
# ---------------------------------------------------------------------------


def test_audio_validation():
    with pytest.raises(SignalError):
        AudioSignal(np.array([0.0, np.nan]), 8000)
    with pytest.raises(SignalError):
        AudioSignal(np.zeros(3), 0)
    with pytest.raises(SignalError):
        AudioSignal(np.zeros((2, 3)), 8000)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(7).uniform(-0.9, 0.9, 4000)
    write_wav(tmp_path / "a.wav", sig(x, 4000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 4000
    np.testing.assert_allclose(back.samples, x, atol=0.5 / 32768 + 1e-12)


def test_wav_rejects_stereo(tmp_path):
    import wave

    with wave.open(str(tmp_path / "s.wav"), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(bytes(400))
    with pytest.raises(SignalError, match="multi-channel"):
        read_wav(tmp_path / "s.wav")
