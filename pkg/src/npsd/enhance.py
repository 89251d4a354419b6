"""Decision-directed Wiener enhancement driven by a noise PSD track."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import InvalidArgumentError, ShapeMismatchError
from .estimator import NoisePsdTrack

DD_ALPHA = 0.98
G_MIN = 10.0 ** (-25.0 / 20.0)


@dataclass
class GainGrid:
    gains: np.ndarray  # (K, L), values in [g_min, 1]


def wiener_gains(mix_spec: dsp.Spectrogram | np.ndarray, noise_psd: NoisePsdTrack | np.ndarray,
                 dd_alpha: float = DD_ALPHA, g_min: float = G_MIN) -> GainGrid:
    power = dsp.periodogram(mix_spec)
    lam = noise_psd.filled() if isinstance(noise_psd, NoisePsdTrack) else np.asarray(noise_psd, dtype=np.float64)
    if lam.shape != power.shape:
        raise ShapeMismatchError(f"noise track {lam.shape} does not match spectrogram {power.shape}")
    if not 0.0 <= g_min <= 1.0:
        raise InvalidArgumentError("g_min must lie in [0, 1]")
    if np.any(~(lam > 0)):
        raise InvalidArgumentError("noise PSD must be strictly positive")
    gamma = power / lam
    gains = np.empty_like(gamma)
    prev = None
    for l in range(gamma.shape[1]):
        ml = np.maximum(gamma[:, l] - 1.0, 0.0)
        if prev is None:
            xi = ml
        else:
            xi = dd_alpha * prev + (1.0 - dd_alpha) * ml
        g = np.maximum(xi / (1.0 + xi), g_min)
        gains[:, l] = g
        prev = g * g * gamma[:, l]
    return GainGrid(gains)


def apply_and_resynthesize(mix_spec: dsp.Spectrogram, gains: GainGrid | np.ndarray,
                           length: int | None = None) -> dsp.WaveBuffer:
    """Scale magnitudes by the real gains (phase kept) and overlap-add.

    The output is padded to the analysed signal length when that is known.
    """
    g = gains.gains if isinstance(gains, GainGrid) else np.asarray(gains)
    if g.shape != mix_spec.coefficients.shape:
        raise ShapeMismatchError(f"gain grid {g.shape} does not match spectrogram {mix_spec.coefficients.shape}")
    out = mix_spec.with_coefficients(mix_spec.coefficients * g)
    return dsp.istft(out, length=length if length is not None else mix_spec.n_samples)


def enhance(mix: dsp.WaveBuffer, noise_psd, dd_alpha: float = DD_ALPHA, g_min: float = G_MIN) -> dsp.WaveBuffer:
    spec = dsp.stft(mix)
    return apply_and_resynthesize(spec, wiener_gains(spec, noise_psd, dd_alpha, g_min), len(mix))
