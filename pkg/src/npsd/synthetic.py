"""Synthetic corpora for desk-scale runs.

``speech_like`` renders utterances from a crude source-filter model: glottal
pulse trains through formant resonators for vowels, band-passed noise bursts
for fricatives, and silent gaps between words. The result is sparse in time
and frequency like real speech, which is what noise trackers depend on.
"""

from __future__ import annotations

import os

import numpy as np
import yaml
from scipy import signal

from . import dsp

FS = dsp.SAMPLE_RATE

# (F1, F2, F3) in Hz
VOWELS = np.array([
    (730, 1090, 2440),
    (270, 2290, 3010),
    (300, 870, 2240),
    (530, 1840, 2480),
    (570, 840, 2410),
    (660, 1720, 2410),
    (440, 1020, 2240),
    (390, 1990, 2550),
])


def _resonator(x, freq, bw):
    r = np.exp(-np.pi * bw / FS)
    a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / FS), r * r]
    return signal.lfilter([1.0 - r], a, x)


def _envelope(n, attack, release):
    env = np.ones(n)
    a = min(attack, n // 2)
    r = min(release, n // 2)
    if a:
        env[:a] = 0.5 - 0.5 * np.cos(np.pi * np.arange(a) / a)
    if r:
        env[n - r:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(r) / r)
    return env


def _vowel(rng, n, f0, formant_scale):
    f0_track = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * np.arange(n) / FS + rng.uniform(0, 6.3)))
    f0_track *= np.linspace(1.0, rng.uniform(0.85, 1.1), n)
    phase = np.cumsum(f0_track / FS)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = signal.lfilter([1.0], [1.0, -1.9, 0.9025], pulses)  # glottal low-pass
    source += 0.02 * rng.standard_normal(n)
    formants = VOWELS[rng.integers(len(VOWELS))] * formant_scale
    out = np.zeros(n)
    for j, (f, bw) in enumerate(zip(formants, (80, 110, 150))):
        out += _resonator(source, f, bw) * (1.0, 0.6, 0.3)[j]
    return out * _envelope(n, int(0.02 * FS), int(0.04 * FS))


def _fricative(rng, n):
    lo = rng.uniform(2000, 4500)
    hi = min(lo + rng.uniform(1500, 3500), 7800)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=FS, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n)) * _envelope(n, int(0.01 * FS), int(0.02 * FS))


def speech_like(rng: np.random.Generator, seconds: float, f0: float, formant_scale: float = 1.0) -> np.ndarray:
    """One utterance of roughly ``seconds`` duration with leading/trailing silence."""
    n_total = int(seconds * FS)
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.1, 0.3) * FS)
    stop = n_total - int(rng.uniform(0.1, 0.3) * FS)
    while pos < stop:
        for _ in range(rng.integers(1, 4)):  # syllables per word
            if rng.random() < 0.5:
                n = int(rng.uniform(0.04, 0.12) * FS)
                seg = _fricative(rng, n) * rng.uniform(0.05, 0.3)
                end = min(pos + n, stop)
                out[pos:end] += seg[:end - pos]
                pos = end
            n = int(rng.uniform(0.08, 0.25) * FS)
            seg = _vowel(rng, n, f0 * rng.uniform(0.9, 1.15), formant_scale)
            seg /= np.max(np.abs(seg)) + 1e-12
            end = min(pos + n, stop)
            out[pos:end] += seg[:end - pos] * rng.uniform(0.3, 1.0)
            pos = end
            if pos >= stop:
                break
        pos += int(rng.uniform(0.05, 0.4) * FS)  # inter-word pause
    peak = np.max(np.abs(out))
    return out / peak * 0.5 * 10.0 ** (rng.uniform(-6, 0) / 20.0) if peak > 0 else out


def white_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Gaussian noise with a 1/f power spectrum."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / FS)
    f[0] = f[1]
    x = np.fft.irfft(spectrum / np.sqrt(f), n)
    return x / np.std(x)


def write_demo_corpus(out_dir: str, speech_seconds: float = 600.0, noise_seconds: float = 300.0,
                      seed: int = 0, utterance_seconds: tuple[float, float] = (2.0, 4.0)) -> str:
    """Write speakers' utterances, white and pink noise, and a run config.

    Train, validation and test speech come from disjoint synthetic speakers.
    ``speech_seconds`` is the total across all three splits (70/10/20).
    Returns the path of the written ``config.yaml``.
    """
    rng = np.random.default_rng(seed)
    splits = {"train": 0.7, "validation": 0.1, "test": 0.2}
    for split, frac in splits.items():
        d = os.path.join(out_dir, "speech", split)
        os.makedirs(d, exist_ok=True)
        total, i = 0.0, 0
        while total < frac * speech_seconds:
            speaker = rng.integers(1 << 30)
            srng = np.random.default_rng(speaker)
            male = srng.random() < 0.5
            f0 = srng.uniform(90, 140) if male else srng.uniform(170, 250)
            scale = srng.uniform(0.9, 1.0) if male else srng.uniform(1.0, 1.15)
            for _ in range(4):
                dur = float(rng.uniform(*utterance_seconds))
                x = speech_like(srng, dur, f0, scale)
                dsp.write_wav(os.path.join(d, f"{split}_{i:04d}.wav"), dsp.WaveBuffer(x), pcm16=True)
                total += dur
                i += 1
    noise_dir = os.path.join(out_dir, "noise")
    os.makedirs(noise_dir, exist_ok=True)
    n = int(noise_seconds * FS)
    for name, gen in (("white", white_noise), ("pink", pink_noise)):
        x = gen(rng, n)
        x = 0.1 * x / np.std(x)
        dsp.write_wav(os.path.join(noise_dir, f"{name}.wav"), dsp.WaveBuffer(x))
    config = {
        "speech": {s: f"speech/{s}/*.wav" for s in splits},
        "noise": "noise/*.wav",
        "splits": [0.7, 0.1, 0.2],
        "seed": seed,
    }
    path = os.path.join(out_dir, "config.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    return path
