import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecapa_tdnn import features as ft


def tone(freq, seconds, amp=0.5, sr=16000):
    return amp * np.sin(2 * np.pi * freq * np.arange(int(seconds * sr)) / sr)


def naive_log_mel(x, n_mels=80, sr=16000, n_fft=512):
    """Per-frame explicit DFT and loop-built triangular filters."""
    win, hop = 400, 160
    y = [x[0]] + [x[n] - 0.97 * x[n - 1] for n in range(1, len(x))]
    ham = [0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)]
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    top = mel(sr / 2)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    n_bins = n_fft // 2 + 1
    kk = np.arange(n_bins)
    out = []
    for t in range(1 + (len(x) - win) // hop):
        frame = np.array([y[t * hop + n] * ham[n] for n in range(win)])
        n = np.arange(win)
        spec = np.array([abs(np.sum(frame * np.exp(-2j * np.pi * k * n / n_fft))) ** 2 for k in kk])
        row = []
        for m in range(n_mels):
            lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
            acc = 0.0
            for k in kk:
                f = k * sr / n_fft
                if lo < f < hi:
                    acc += spec[k] * ((f - lo) / (mid - lo) if f <= mid else (hi - f) / (hi - mid))
            row.append(math.log(max(acc, 1e-10)))
        out.append(row)
    return np.array(out).T


class TestMFCC:
    def test_frame_count(self):
        assert ft.mfcc(np.random.default_rng(0).normal(size=32000)).shape == (80, 198)
        assert ft.frame_count(400) == 1 and ft.frame_count(559) == 1 and ft.frame_count(560) == 2

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            ft.mfcc(np.zeros(399))

    def test_silence_zero_after_cms(self):
        f = ft.mfcc(np.zeros(16000))
        assert np.all(f == f[:, :1])
        np.testing.assert_allclose(ft.cms(f), 0.0, rtol=0, atol=1e-12)

    def test_rejects_other_rates_and_bad_input(self):
        with pytest.raises(ValueError, match="16000"):
            ft.mfcc(np.zeros(8000), sample_rate=8000)
        with pytest.raises(ValueError, match="mono"):
            ft.mfcc(np.zeros((2, 8000)))
        with pytest.raises(ValueError, match="non-finite"):
            ft.mfcc(np.r_[np.zeros(800), np.nan])

    def test_tone_matches_direct_dft_oracle(self):
        x = tone(1000.0, 0.04)  # 3 frames keeps the oracle cheap
        np.testing.assert_allclose(ft.log_mel(x), naive_log_mel(x), rtol=0, atol=1e-8)

    def test_tone_energy_near_1khz(self):
        lm = ft.log_mel(tone(1000.0, 0.5))
        centers = ft.mel_to_hz(np.linspace(0, ft.hz_to_mel(8000), 82))[1:-1]
        peak = centers[np.argmax(lm.mean(axis=1))]
        assert abs(peak - 1000.0) < 60.0

    def test_dct_orthonormal(self):
        lm = ft.log_mel(tone(440.0, 0.2))
        c = ft.mfcc(tone(440.0, 0.2))
        np.testing.assert_allclose(np.sum(c ** 2, axis=0), np.sum(lm ** 2, axis=0), rtol=1e-10)

    @given(st.floats(0.05, 0.9), st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_amplitude_scaling_only_shifts_c0(self, scale, seed):
        x = np.random.default_rng(seed).normal(0, 0.1, size=4000)
        a, b = ft.mfcc(x), ft.mfcc(scale * x)
        np.testing.assert_allclose(ft.cms(a), ft.cms(b), atol=1e-8)

    def test_filterbank_shape_and_coverage(self):
        fb = ft.mel_filterbank()
        assert fb.shape == (80, 257)
        assert np.all(fb.max(axis=1) > 0)
        assert not fb.flags.writeable


class TestCropCms:
    def test_exact_length_identity(self):
        f = np.arange(400.0).reshape(2, 200)
        np.testing.assert_array_equal(ft.random_crop(f, 200, np.random.default_rng(0)), f)

    def test_forced_offset(self):
        f = np.arange(600.0).reshape(2, 300)
        np.testing.assert_array_equal(ft.random_crop(f, 200, offset=50), f[:, 50:250])
        with pytest.raises(ValueError):
            ft.random_crop(f, 200, offset=101)

    def test_wrap_padding(self):
        f = np.arange(240.0).reshape(2, 120)
        out = ft.random_crop(f, 200)
        np.testing.assert_array_equal(out[:, :120], f)
        np.testing.assert_array_equal(out[:, 120:], f[:, :80])

    def test_cms_examples(self):
        np.testing.assert_array_equal(ft.cms(np.full((3, 4), 2.5)), 0.0)
        np.testing.assert_array_equal(ft.cms(np.array([[1.0, 3.0]])), [[-1.0, 1.0]])

    @given(st.integers(1, 400), st.integers(1, 300), st.integers(0, 99))
    @settings(max_examples=50, deadline=None)
    def test_crop_length_and_content(self, T, L, seed):
        f = np.arange(float(T))[None, :]
        out = ft.random_crop(f, L, np.random.default_rng(seed))
        assert out.shape == (1, L)
        if T >= L:
            assert np.all(np.diff(out[0]) == 1)


class TestSpecAugment:
    def test_zero_width_identity(self):
        f = np.random.default_rng(0).normal(size=(80, 50))
        np.testing.assert_array_equal(ft.spec_augment(f, time_width=0, freq_width=0), f)

    def test_time_block(self):
        f = np.ones((80, 50))
        out = ft.spec_augment(f, time_width=5, time_start=0, freq_width=0)
        assert np.all(out[:, :5] == 0) and np.all(out[:, 5:] == 1)

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_mask_counts_bounded(self, seed):
        f = np.ones((80, 200))
        out = ft.spec_augment(f, ft.SpecAugmentConfig(5, 10), np.random.default_rng(seed))
        zero_cols = int(np.sum(np.all(out == 0, axis=0)))
        zero_rows = int(np.sum(np.all(out == 0, axis=1)))
        assert zero_cols <= 5 and zero_rows <= 10
        assert np.all(f == 1)  # input untouched


def test_wav_round_trip(tmp_path):
    x = tone(300.0, 0.1, amp=0.7)
    ft.write_wav(tmp_path / "a.wav", x)
    y, sr = ft.read_wav(tmp_path / "a.wav")
    assert sr == 16000 and np.max(np.abs(x - y)) <= 1 / 32768 + 1e-12
