"""STFT analysis/synthesis and WAV IO.

Frames are not centered: frame ``l`` covers samples ``[l*hop, l*hop + fft_size)``
and trailing samples that do not fill a frame are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import InvalidArgumentError, SampleRateError, TooShortError

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 256


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidArgumentError("WaveBuffer holds mono audio only")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("non-finite samples in WaveBuffer")

    def __len__(self):
        return self.samples.shape[0]

    def scaled(self, gain: float) -> "WaveBuffer":
        return WaveBuffer(self.samples * gain, self.sample_rate)


@dataclass
class Spectrogram:
    """Complex STFT grid, shape (K, L) = (bins, frames)."""

    coefficients: np.ndarray
    fft_size: int = FFT_SIZE
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    n_samples: int | None = None

    @property
    def n_bins(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.coefficients)

    def with_coefficients(self, coefficients: np.ndarray) -> "Spectrogram":
        return Spectrogram(coefficients, self.fft_size, self.hop, self.sample_rate, self.n_samples)


def require_rate(wave: WaveBuffer, rate: int = SAMPLE_RATE) -> WaveBuffer:
    if wave.sample_rate != rate:
        raise SampleRateError(
            f"expected {rate} Hz audio, got {wave.sample_rate} Hz (resampling is not supported)"
        )
    return wave


def hamming_window(n: int) -> np.ndarray:
    """Periodic Hamming window ``0.54 - 0.46 cos(2 pi i / n)``."""
    if n < 2 or n % 2:
        raise InvalidArgumentError(f"window length must be even and >= 2, got {n}")
    i = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / n)


def num_frames(n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> int:
    if n_samples < fft_size:
        return 0
    return (n_samples - fft_size) // hop + 1


def stft(signal: WaveBuffer | np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> Spectrogram:
    if isinstance(signal, WaveBuffer):
        x, rate = signal.samples, signal.sample_rate
    else:
        x, rate = np.asarray(signal, dtype=np.float64), SAMPLE_RATE
    if hop < 1:
        raise InvalidArgumentError("hop must be positive")
    n_frames = num_frames(x.shape[0], fft_size, hop)
    if n_frames == 0:
        raise TooShortError(f"signal of {x.shape[0]} samples is shorter than one {fft_size}-sample frame")
    window = hamming_window(fft_size)
    frames = np.lib.stride_tricks.sliding_window_view(x, fft_size)[::hop][:n_frames]
    coefficients = np.fft.rfft(frames * window, axis=1).T
    return Spectrogram(np.ascontiguousarray(coefficients), fft_size, hop, rate, x.shape[0])


def istft(spec: Spectrogram, length: int | None = None) -> WaveBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    The synthesis window equals the analysis window; each output sample is
    divided by the sum of squared windows overlapping it. ``length`` pads with
    zeros (or truncates) to a target length, e.g. the analysed signal's.
    """
    n, hop = spec.fft_size, spec.hop
    if spec.n_bins != n // 2 + 1:
        raise InvalidArgumentError(f"{spec.n_bins} bins inconsistent with fft_size {n}")
    window = hamming_window(n)
    frames = np.fft.irfft(spec.coefficients.T, n=n, axis=1) * window
    n_frames = frames.shape[0]
    out_len = (n_frames - 1) * hop + n if n_frames else 0
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    w2 = window**2
    for l in range(n_frames):
        start = l * hop
        out[start:start + n] += frames[l]
        norm[start:start + n] += w2
    nonzero = norm > 1e-12
    out[nonzero] /= norm[nonzero]
    if length is not None:
        if length > out_len:
            out = np.concatenate([out, np.zeros(length - out_len)])
        else:
            out = out[:length]
    return WaveBuffer(out, spec.sample_rate)


def periodogram(spec: Spectrogram | np.ndarray) -> np.ndarray:
    c = spec.coefficients if isinstance(spec, Spectrogram) else np.asarray(spec)
    return c.real**2 + c.imag**2


def read_wav(path) -> WaveBuffer:
    """Read a mono PCM16 or float32 WAV file into [-1, 1) floats."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise InvalidArgumentError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidArgumentError(f"{path}: unsupported sample format {data.dtype}")
    return WaveBuffer(samples, int(rate))


def write_wav(path, wave: WaveBuffer, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    wavfile.write(path, wave.sample_rate, data)
