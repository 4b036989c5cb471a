"""Waveform front-end: 80-dim MFCCs, random crops, CMS and SpecAugment masking.

Feature matrices are ``np.ndarray`` of shape ``[n_coeffs, T]``.
"""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

SAMPLE_RATE = 16000
WINDOW_MS = 25
SHIFT_MS = 10
N_FFT = 512
N_MELS = 80
PREEMPH = 0.97
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft//2+1]`` evenly spaced on the mel scale.

    Triangles are evaluated at the exact bin frequencies, so narrow low
    filters still land on at least one bin.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win, hop = sample_rate * WINDOW_MS // 1000, sample_rate * SHIFT_MS // 1000
    if n_samples < win:
        raise ValueError(f"recording of {n_samples} samples is shorter than one {win}-sample window")
    return 1 + (n_samples - win) // hop


def power_frames(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Pre-emphasis, 25 ms Hamming frames every 10 ms, power spectrum ``[T, n_fft//2+1]``."""
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"only {SAMPLE_RATE} Hz audio is supported, got {sample_rate}")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected mono audio")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    T = frame_count(len(x), sample_rate)
    win, hop = sample_rate * WINDOW_MS // 1000, sample_rate * SHIFT_MS // 1000
    emph = np.append(x[0], x[1:] - PREEMPH * x[:-1])
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = emph[idx] * np.hamming(win)
    return np.abs(np.fft.rfft(frames, N_FFT)) ** 2


def log_mel(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    """Log mel filterbank energies ``[n_mels, T]``."""
    energies = power_frames(samples, sample_rate) @ mel_filterbank(n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR)).T


def mfcc(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    """MFCCs ``[n_mels, T]``: orthonormal DCT-II of the log mel energies, all coefficients kept."""
    return dct(log_mel(samples, sample_rate, n_mels), type=2, axis=0, norm="ortho")


def random_crop(f: np.ndarray, length: int = 200, rng: np.random.Generator | None = None,
                offset: int | None = None) -> np.ndarray:
    """Fixed-length crop along time; shorter inputs are wrap-padded from frame 0."""
    T = f.shape[1]
    if T < 1:
        raise ValueError("cannot crop an empty feature matrix")
    if T < length:
        return f[:, np.arange(length) % T]
    if offset is None:
        offset = int((rng or np.random.default_rng()).integers(0, T - length + 1))
    if not 0 <= offset <= T - length:
        raise ValueError(f"crop offset {offset} out of range for T={T}, length={length}")
    return f[:, offset:offset + length]


def cms(f: np.ndarray) -> np.ndarray:
    """Cepstral mean subtraction over time."""
    return f - f.mean(axis=1, keepdims=True)


@dataclass(frozen=True)
class SpecAugmentConfig:
    max_time_mask: int = 5
    max_freq_mask: int = 10


def spec_augment(f: np.ndarray, cfg: SpecAugmentConfig = SpecAugmentConfig(), rng: np.random.Generator | None = None,
                 *, time_width: int | None = None, time_start: int | None = None,
                 freq_width: int | None = None, freq_start: int | None = None) -> np.ndarray:
    """Zero one random block of frames and one random block of coefficients.

    Widths are drawn uniformly from ``0..max`` and starts uniformly over the
    positions where the block fits; keyword overrides pin any draw. Blocks
    that would run past the edge are truncated.
    """
    rng = rng or np.random.default_rng()
    n_coef, T = f.shape
    out = f.copy()
    tw = int(rng.integers(0, cfg.max_time_mask + 1)) if time_width is None else time_width
    ts = int(rng.integers(0, max(T - tw, 0) + 1)) if time_start is None else time_start
    fw = int(rng.integers(0, cfg.max_freq_mask + 1)) if freq_width is None else freq_width
    fs = int(rng.integers(0, max(n_coef - fw, 0) + 1)) if freq_start is None else freq_start
    out[:, ts:ts + tw] = 0.0
    out[fs:fs + fw, :] = 0.0
    return out


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV -> float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
