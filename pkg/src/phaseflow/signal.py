"""DSP front end: STFT, MFCC, cross-correlation lag and narrow-band event detection."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, irfft, next_fast_len, rfft

# X-ray warning tone band picked up on the physician headset
BEEP_BAND_HZ = (539.0, 545.0)
BEEP_FRAME_S = 0.25
BEEP_HOP_S = 0.1
BEEP_MIN_CONSECUTIVE = 7
BEEP_GROWTH_RATIO = 1.15


class SignalError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("audio must be mono (1-D)")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise SignalError("sample_rate must be a positive integer")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # frames x (fft_size // 2 + 1)
    frame_hop_s: float
    freq_resolution_hz: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.shape[1]) * self.freq_resolution_hz

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.magnitudes.shape[0]) * self.frame_hop_s


@dataclass
class MfccConfig:
    n_coeffs: int = 40
    frame_len_s: float = 0.025
    frame_hop_s: float = 0.010
    n_mel_filters: int = 64
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    window: str = "hamming"

    def validate(self, sample_rate: int) -> float:
        fmax = sample_rate / 2 if self.fmax_hz is None else self.fmax_hz
        if self.n_coeffs < 1 or self.n_coeffs > self.n_mel_filters:
            raise SignalError("n_coeffs must be in [1, n_mel_filters]")
        if not (0 <= self.fmin_hz < fmax <= sample_rate / 2):
            raise SignalError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.log_floor <= 0:
            raise SignalError("log_floor must be positive")
        if self.frame_len_s <= 0 or self.frame_hop_s <= 0:
            raise SignalError("frame length and hop must be positive")
        return fmax


def _window(name: str, n: int) -> np.ndarray:
    # periodic windows, as used for spectral analysis
    if name == "rect":
        return np.ones(n)
    k = np.arange(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * k / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * k / n)
    raise SignalError(f"unknown window {name!r}")


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    n = (x.size - size) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop][:n]


def stft(signal: AudioSignal, fft_size: int, hop: int, window: str = "hann") -> Spectrogram:
    """Magnitude of the one-sided DFT of each windowed frame."""
    if fft_size < 1 or fft_size & (fft_size - 1):
        raise SignalError("fft_size must be a power of two")
    if hop < 1:
        raise SignalError("hop must be >= 1")
    if len(signal) < fft_size:
        raise SignalError("insufficient samples")
    frames = _frames(signal.samples, fft_size, hop)
    win = _window(window, fft_size)
    block = max(1, (1 << 22) // fft_size)  # bound the temporary frame buffer
    mags = np.vstack(
        [np.abs(rfft(frames[i : i + block] * win, axis=1)) for i in range(0, frames.shape[0], block)]
    )
    return Spectrogram(mags, hop / signal.sample_rate, signal.sample_rate / fft_size)


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_filters: int, fmin: float, fmax: float):
    """Triangular mel filters evaluated at DFT bin centres.

    Returns ``(weights, centres_hz)`` with weights shaped n_filters x (fft_size//2 + 1).
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling)), edges[1:-1]


def _mfcc_geometry(signal: AudioSignal, cfg: MfccConfig):
    fmax = cfg.validate(signal.sample_rate)
    frame = int(round(cfg.frame_len_s * signal.sample_rate))
    hop = max(1, int(round(cfg.frame_hop_s * signal.sample_rate)))
    if frame > signal.sample_rate:
        raise SignalError("MFCC frame longer than one second")
    fft_size = 1 << (frame - 1).bit_length()
    fb, _ = mel_filterbank(signal.sample_rate, fft_size, cfg.n_mel_filters, cfg.fmin_hz, fmax)
    return frame, hop, fft_size, fb


def log_mel_energies(chunk: np.ndarray, sample_rate: int, cfg: MfccConfig) -> np.ndarray:
    """Frame-level floored log mel energies (frames x n_mel_filters) of one chunk."""
    sig = AudioSignal(chunk, sample_rate)
    frame, hop, fft_size, fb = _mfcc_geometry(sig, cfg)
    if chunk.size < frame:
        raise SignalError("insufficient samples")
    frames = _frames(sig.samples, frame, hop) * _window(cfg.window, frame)
    power = np.abs(rfft(frames, n=fft_size, axis=1)) ** 2
    return np.log(np.maximum(power @ fb.T, cfg.log_floor))


def mfcc(signal: AudioSignal, cfg: MfccConfig | None = None) -> np.ndarray:
    """Per-second MFCCs, shape ``floor(duration) x n_coeffs``.

    Each whole second is framed on its own and the frame MFCCs are averaged,
    so shifting the input by whole seconds shifts the rows exactly.
    """
    cfg = cfg or MfccConfig()
    cfg.validate(signal.sample_rate)
    sr = signal.sample_rate
    n_sec = len(signal) // sr
    if n_sec < 1:
        raise SignalError("operation too short")
    rows = []
    for t in range(n_sec):
        logmel = log_mel_energies(signal.samples[t * sr : (t + 1) * sr], sr, cfg)
        coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_coeffs]
        rows.append(coeffs.mean(axis=0))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# Alignment helpers
# ---------------------------------------------------------------------------


def cross_correlation(a: np.ndarray, b: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Globally normalized cross-correlation ``sum_n a[n] b[n + lag]`` for |lag| <= max_lag.

    Returns ``(lags, values)``; lags outside the possible overlap are dropped.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        raise SignalError("degenerate signal")
    n = next_fast_len(a.size + b.size - 1, real=True)
    full = irfft(np.conj(rfft(a, n)) * rfft(b, n), n)
    lo = max(-max_lag, -(a.size - 1))
    hi = min(max_lag, b.size - 1)
    lags = np.arange(lo, hi + 1)
    return lags, full[lags % n] / norm


def cross_correlate_lag(a: AudioSignal, b: AudioSignal, max_lag_s: float) -> float:
    """Lag in seconds of ``b`` relative to ``a`` at the correlation peak.

    Positive means the shared content appears later in ``b``. Ties go to the
    smallest |lag|, then to the negative side. (Often called the "ACF" of
    the two channels; for two different signals it is a cross-correlation.)
    """
    if a.sample_rate != b.sample_rate:
        raise SignalError("sample-rate mismatch")
    if len(a) == 0 or len(b) == 0:
        raise SignalError("empty signal")
    if max_lag_s < 0:
        raise SignalError("max_lag_s must be >= 0")
    lags, vals = cross_correlation(a.samples, b.samples, int(np.floor(max_lag_s * a.sample_rate)))
    return _tie_broken_argmax(lags, vals) / a.sample_rate


def _tie_broken_argmax(lags: np.ndarray, vals: np.ndarray) -> int:
    order = np.lexsort((lags, np.abs(lags)))
    return int(lags[order][np.argmax(vals[order])])


def band_energy_track(
    signal: AudioSignal,
    f_lo: float = BEEP_BAND_HZ[0],
    f_hi: float = BEEP_BAND_HZ[1],
    frame_len_s: float = BEEP_FRAME_S,
    hop_s: float = BEEP_HOP_S,
) -> np.ndarray:
    """Per-frame summed DFT magnitude over bins centred in ``[f_lo, f_hi]``.

    The frame length is rounded up to a power of two; frames are Hann-windowed.
    """
    if not (0 < f_lo < f_hi <= signal.sample_rate / 2):
        raise SignalError("need 0 < f_lo < f_hi <= sample_rate / 2")
    fft_size = 1 << (max(1, int(round(frame_len_s * signal.sample_rate))) - 1).bit_length()
    hop = max(1, int(round(hop_s * signal.sample_rate)))
    freqs = np.arange(fft_size // 2 + 1) * signal.sample_rate / fft_size
    band = (freqs >= f_lo) & (freqs <= f_hi)
    if not band.any():
        raise SignalError("band too narrow for fft_size")
    spec = stft(signal, fft_size, hop, "hann")
    return spec.magnitudes[:, band].sum(axis=1)


def detect_growth_events(
    track,
    min_consecutive: int = BEEP_MIN_CONSECUTIVE,
    growth_ratio: float = BEEP_GROWTH_RATIO,
    frame_hop_s: float = 1.0,
    time_offset_s: float = 0.0,
) -> list[float]:
    """Start times of runs where the track keeps growing by ``growth_ratio`` per frame.

    A run needs at least ``min_consecutive`` growth steps; qualifying runs
    separated by fewer than ``min_consecutive`` frames are merged.
    """
    if min_consecutive < 2:
        raise ValueError("min_consecutive must be >= 2")
    x = np.asarray(track, dtype=np.float64)
    if x.size < 2:
        return []
    grows = (x[1:] >= growth_ratio * x[:-1]) & (x[1:] > x[:-1])
    runs = []  # (first step, one past last step)
    i = 0
    while i < grows.size:
        if grows[i]:
            j = i
            while j < grows.size and grows[j]:
                j += 1
            if j - i >= min_consecutive:
                if runs and i - runs[-1][1] < min_consecutive:
                    runs[-1] = (runs[-1][0], j)
                else:
                    runs.append((i, j))
            i = j
        else:
            i += 1
    return [start * frame_hop_s + time_offset_s for start, _ in runs]


def detect_beeps(
    signal: AudioSignal,
    band: tuple[float, float] = BEEP_BAND_HZ,
    frame_len_s: float = BEEP_FRAME_S,
    hop_s: float = BEEP_HOP_S,
    min_consecutive: int = BEEP_MIN_CONSECUTIVE,
    growth_ratio: float = BEEP_GROWTH_RATIO,
) -> list[float]:
    """Times (s) at which the X-ray warning tone starts ramping up.

    Frames are stamped at their centre.
    """
    track = band_energy_track(signal, band[0], band[1], frame_len_s, hop_s)
    sr = signal.sample_rate
    hop = max(1, int(round(hop_s * sr)))
    fft_size = 1 << (max(1, int(round(frame_len_s * sr))) - 1).bit_length()
    return detect_growth_events(track, min_consecutive, growth_ratio, hop / sr, fft_size / sr / 2)


# ---------------------------------------------------------------------------
# WAV I/O (PCM16 mono)
# ---------------------------------------------------------------------------


def read_wav(path) -> AudioSignal:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise SignalError(f"{path}: multi-channel WAV not supported")
        if wf.getsampwidth() != 2:
            raise SignalError(f"{path}: only 16-bit PCM is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())
