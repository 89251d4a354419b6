import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npsd import dsp
from npsd.errors import InvalidArgumentError, SampleRateError, TooShortError


def naive_dft(frame):
    n = len(frame)
    return [sum(frame[i] * cmath.exp(-2j * math.pi * k * i / n) for i in range(n)) for k in range(n // 2 + 1)]


def naive_idft(half_spectrum, n):
    full = list(half_spectrum) + [np.conj(half_spectrum[n - k]) for k in range(n // 2 + 1, n)]
    return np.array([sum(full[k] * cmath.exp(2j * math.pi * k * i / n) for k in range(n)).real / n for i in range(n)])


# ---------------------------------------------------------------------------
# Window
# ---------------------------------------------------------------------------


class TestHammingWindow:
    @pytest.mark.parametrize("i, expected", [(0, 0.08), (256, 1.0), (128, 0.54)])
    def test_values(self, i, expected):
        assert dsp.hamming_window(512)[i] == pytest.approx(expected, abs=1e-15)

    def test_periodic_symmetry(self):
        w = dsp.hamming_window(512)
        np.testing.assert_allclose(w[1:], w[1:][::-1], atol=1e-15)

    @pytest.mark.parametrize("n", [0, 1, 3, 511])
    def test_rejects_odd_or_short(self, n):
        with pytest.raises(InvalidArgumentError):
            dsp.hamming_window(n)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


class TestStft:
    def test_frame_count_one_second(self):
        spec = dsp.stft(np.zeros(16000))
        assert spec.coefficients.shape == (257, 61)

    def test_zero_signal(self):
        spec = dsp.stft(np.zeros(4000))
        assert np.all(spec.coefficients == 0)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            dsp.stft(np.zeros(511))

    @given(st.integers(min_value=512, max_value=20000))
    def test_frame_count_formula(self, n):
        assert dsp.num_frames(n) == (n - 512) // 256 + 1

    def test_frame_count_matches_stft(self):
        for n in (512, 767, 768, 1000, 5000):
            assert dsp.stft(np.ones(n)).n_frames == (n - 512) // 256 + 1

    def test_bin_centred_cosine_against_naive_dft(self):
        k0 = 32
        t = np.arange(16000)
        x = np.cos(2 * np.pi * k0 * t / 512)  # 1 kHz at 16 kHz
        spec = dsp.stft(x)
        mag = np.abs(spec.coefficients)
        assert np.all(np.argmax(mag[:, 1:-1], axis=0) == k0)
        frame = (dsp.hamming_window(512) * x[256:768]).tolist()
        oracle = abs(naive_dft(frame)[k0]) ** 2
        assert mag[k0, 1] ** 2 == pytest.approx(oracle, rel=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        s1, s2 = rng.standard_normal((2, 6000))
        a, b = 0.7, -2.3
        lhs = dsp.stft(a * s1 + b * s2).coefficients
        rhs = a * dsp.stft(s1).coefficients + b * dsp.stft(s2).coefficients
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(5000)
        spec = dsp.stft(x)
        w = dsp.hamming_window(512)
        weight = np.full(257, 2.0)
        weight[[0, -1]] = 1.0
        for l in range(spec.n_frames):
            frame = w * x[l * 256:l * 256 + 512]
            lhs = np.sum(weight * np.abs(spec.coefficients[:, l]) ** 2) / 512
            assert lhs == pytest.approx(np.sum(frame**2), rel=1e-6)


class TestIstft:
    def test_round_trip_white_noise(self):
        x = np.random.default_rng(0).standard_normal(16000)
        y = dsp.istft(dsp.stft(x)).samples
        np.testing.assert_allclose(y[512:-512], x[512:len(y) - 512], atol=1e-6)

    def test_zero_spectrogram(self):
        spec = dsp.Spectrogram(np.zeros((257, 10), complex))
        assert np.all(dsp.istft(spec).samples == 0)

    def test_single_windowed_dc_frame_against_idft(self):
        w = dsp.hamming_window(512)
        spec = dsp.stft(np.ones(512))
        oracle = naive_idft(spec.coefficients[:, 0], 512) * w / w**2
        np.testing.assert_allclose(dsp.istft(spec).samples, oracle, atol=1e-9)

    def test_length_padding(self):
        x = np.random.default_rng(1).standard_normal(1000)
        assert len(dsp.istft(dsp.stft(x), length=1000)) == 1000


class TestPeriodogram:
    def test_values(self):
        assert dsp.periodogram(np.array([3 + 4j, 0j])).tolist() == [25.0, 0.0]

    def test_conjugate_product_oracle(self):
        rng = np.random.default_rng(5)
        c = rng.standard_normal((7, 9)) + 1j * rng.standard_normal((7, 9))
        np.testing.assert_allclose(dsp.periodogram(c), (c * np.conj(c)).real, rtol=1e-15)


# ---------------------------------------------------------------------------
# WAV IO
# ---------------------------------------------------------------------------


class TestWav:
    def test_float_round_trip(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000).astype(np.float32)
        dsp.write_wav(tmp_path / "a.wav", dsp.WaveBuffer(x))
        back = dsp.read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(back.samples, x.astype(np.float64))

    def test_pcm16_scaling(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "b.wav", 16000, np.array([-32768, 0, 16384], dtype=np.int16))
        assert dsp.read_wav(tmp_path / "b.wav").samples.tolist() == [-1.0, 0.0, 0.5]

    def test_rejects_stereo(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "c.wav", 16000, np.zeros((10, 2), dtype=np.int16))
        with pytest.raises(InvalidArgumentError):
            dsp.read_wav(tmp_path / "c.wav")

    def test_wrong_rate_rejected(self):
        with pytest.raises(SampleRateError):
            dsp.require_rate(dsp.WaveBuffer(np.zeros(10), 8000))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            dsp.WaveBuffer(np.array([0.0, np.nan]))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=600, max_value=6000), st.integers(min_value=0, max_value=2**32 - 1))
def test_round_trip_interior_property(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = dsp.istft(dsp.stft(x)).samples
    if len(y) > 1024:
        np.testing.assert_allclose(y[512:-512], x[512:len(y) - 512], atol=1e-6)
