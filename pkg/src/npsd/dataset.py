"""Corpus handling, SNR mixing, ground-truth noise PSD and training sequences.

A training pair for bin ``k`` and window end ``l`` consists of

* input: the ``T x 3`` magnitudes of bins ``(k-1, k, k+1)`` over frames
  ``l-T+1 .. l``, divided by the window mean of bin ``k`` (``mu``);
* target: ``ln(lambda_u / mu**2)`` of the ground-truth noise PSD over the same
  frames.

Edge bins reuse their own column for the missing neighbour.
"""

from __future__ import annotations

import glob
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import dsp
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InsufficientHistoryError,
    InvalidArgumentError,
    ShapeMismatchError,
    UnsupportedVersionError,
)

log = logging.getLogger(__name__)

SEQ_LEN = 128
STRIDE = 64
ALPHA = 0.8
PSD_FLOOR = 1e-12
TRAIN_SNRS = (-3.0, 3.0, 9.0, 15.0)
EVAL_SNRS = (0.0, 5.0, 10.0, 15.0)
SPLITS = ("train", "validation", "test")

NSEQ_MAGIC = b"NSEQ"
NSEQ_VERSION = 1


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusManifest:
    """Speech files per split, one noise file per noise type.

    Every noise file is cut into contiguous train/validation/test sections
    according to ``split_fractions``.
    """

    speech_files: dict[str, list[str]]
    noise_files: list[str]
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must be three values summing to 1, got {self.split_fractions}")
        if any(f < 0 for f in self.split_fractions):
            raise ConfigurationError("split fractions must be non-negative")
        seen: dict[str, str] = {}
        for split in SPLITS:
            for path in self.speech_files.get(split, []):
                key = os.path.realpath(path)
                if key in seen and seen[key] != split:
                    raise ConfigurationError(f"speech file {path} appears in both {seen[key]} and {split}")
                seen[key] = split
        for path in list(seen) + [os.path.realpath(p) for p in self.noise_files]:
            if not os.path.isfile(path):
                raise ConfigurationError(f"corpus file not found: {path}")

    @property
    def noise_types(self) -> list[str]:
        return [os.path.splitext(os.path.basename(p))[0] for p in self.noise_files]

    @classmethod
    def from_config(cls, cfg: dict, base_dir: str = ".") -> "CorpusManifest":
        """Build from the ``speech`` / ``noise`` / ``splits`` keys of a run config.

        ``speech`` is either a mapping ``{train, validation, test}`` of globs, or
        a single glob whose sorted files are divided by ``splits``.
        """
        fractions = tuple(float(f) for f in cfg.get("splits", (0.7, 0.1, 0.2)))
        speech = cfg.get("speech")
        if speech is None or cfg.get("noise") is None:
            raise ConfigurationError("config must define both 'speech' and 'noise'")
        if isinstance(speech, dict):
            speech_files = {s: _expand(speech.get(s, []), base_dir) for s in SPLITS}
        else:
            files = _expand(speech, base_dir)
            n = len(files)
            a = int(round(fractions[0] * n))
            b = a + int(round(fractions[1] * n))
            speech_files = {"train": files[:a], "validation": files[a:b], "test": files[b:]}
        noise_files = _expand(cfg["noise"], base_dir)
        return cls(speech_files, noise_files, fractions)  # type: ignore[arg-type]

    def noise_section(self, n_samples: int, split: str) -> tuple[int, int]:
        """Sample range ``[start, stop)`` of ``split`` inside a noise file."""
        edges = np.concatenate([[0.0], np.cumsum(self.split_fractions)])
        i = SPLITS.index(split)
        start = int(np.floor(edges[i] * n_samples))
        stop = n_samples if i == 2 else int(np.floor(edges[i + 1] * n_samples))
        return start, stop


def _expand(patterns, base_dir: str) -> list[str]:
    if isinstance(patterns, str):
        patterns = [patterns]
    files: list[str] = []
    for pattern in patterns:
        if not os.path.isabs(pattern):
            pattern = os.path.join(base_dir, pattern)
        files.extend(sorted(glob.glob(pattern, recursive=True)))
    return files


class AudioCache:
    """Decoded WAV files keyed by path, checked for 16 kHz."""

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._data:
            try:
                wave = dsp.read_wav(path)
            except (ValueError, OSError) as exc:
                raise ConfigurationError(f"cannot decode {path}: {exc}") from exc
            try:
                dsp.require_rate(wave)
            except ValueError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
            self._data[path] = wave.samples
        return self._data[path]


# ---------------------------------------------------------------------------
# Mixing and ground truth
# ---------------------------------------------------------------------------


@dataclass
class MixSpec:
    snr_db: float
    speech_ids: tuple[int, ...]
    noise_id: int
    noise_offsets: tuple[int, ...]
    duration: int


@dataclass
class Mixture:
    mix: dsp.WaveBuffer
    speech: dsp.WaveBuffer
    noise: dsp.WaveBuffer  # scaled noise actually present in ``mix``
    noise_type: str
    spec: MixSpec


def mix_at_snr(speech: dsp.WaveBuffer, noise: dsp.WaveBuffer, snr_db: float):
    """Scale ``noise`` so that the full-signal SNR equals ``snr_db``.

    Returns ``(mix, scaled_noise)``.
    """
    s, u = speech.samples, noise.samples
    if s.shape != u.shape:
        raise ShapeMismatchError(f"speech and noise lengths differ: {s.shape[0]} vs {u.shape[0]}")
    if not np.isfinite(snr_db):
        raise InvalidArgumentError("snr_db must be finite")
    p_s = np.mean(s**2)
    p_u = np.mean(u**2)
    if p_s <= 0 or p_u <= 0:
        raise DegenerateInputError("speech and noise must both have nonzero power")
    gain = np.sqrt(p_s / (p_u * 10.0 ** (snr_db / 10.0)))
    scaled = u * gain
    return dsp.WaveBuffer(s + scaled, speech.sample_rate), dsp.WaveBuffer(scaled, noise.sample_rate)


@dataclass
class GroundTruthPsd:
    lambda_u: np.ndarray  # (K, L)
    alpha: float


def recursive_average(power: np.ndarray, alpha: float) -> np.ndarray:
    """First-order recursive smoothing along the last axis, seeded with frame 0."""
    power = np.asarray(power, dtype=np.float64)
    out = np.empty_like(power)
    out[..., 0] = power[..., 0]
    for l in range(1, power.shape[-1]):
        out[..., l] = alpha * out[..., l - 1] + (1.0 - alpha) * power[..., l]
    return out


def ground_truth_psd(noise_spec: dsp.Spectrogram | np.ndarray, alpha: float = ALPHA) -> GroundTruthPsd:
    if not 0.0 <= alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in [0, 1), got {alpha}")
    return GroundTruthPsd(recursive_average(dsp.periodogram(noise_spec), alpha), alpha)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class TrainingSequence:
    input: np.ndarray  # (T, 3)
    target: np.ndarray  # (T,)
    mu: float
    k: int
    l_end: int


@dataclass
class SequenceBatch:
    """Column-stacked sequences; ``inputs`` is (N, T, 3), ``targets`` (N, T)."""

    inputs: np.ndarray
    targets: np.ndarray
    mu: np.ndarray
    k: np.ndarray
    l_end: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> TrainingSequence:
        return TrainingSequence(self.inputs[i], self.targets[i], float(self.mu[i]), int(self.k[i]), int(self.l_end[i]))

    def __iter__(self) -> Iterator[TrainingSequence]:
        return (self[i] for i in range(len(self)))

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    def take(self, index) -> "SequenceBatch":
        return SequenceBatch(self.inputs[index], self.targets[index], self.mu[index], self.k[index], self.l_end[index])

    @classmethod
    def empty(cls, seq_len: int = SEQ_LEN) -> "SequenceBatch":
        return cls(
            np.zeros((0, seq_len, 3), np.float32),
            np.zeros((0, seq_len), np.float32),
            np.zeros(0, np.float32),
            np.zeros(0, np.uint16),
            np.zeros(0, np.int64),
        )

    @classmethod
    def concat(cls, batches: Sequence["SequenceBatch"], seq_len: int = SEQ_LEN) -> "SequenceBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty(seq_len)
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("inputs", "targets", "mu", "k", "l_end")))


def neighbour_stack(mag: np.ndarray) -> np.ndarray:
    """(K, L) magnitudes -> (K, L, 3) of bins (k-1, k, k+1), edges duplicated."""
    padded = np.concatenate([mag[:1], mag, mag[-1:]], axis=0)
    return np.stack([padded[:-2], padded[1:-1], padded[2:]], axis=-1)


def window_ends(n_frames: int, seq_len: int = SEQ_LEN, stride: int = STRIDE) -> np.ndarray:
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if n_frames < seq_len:
        return np.zeros(0, dtype=np.int64)
    return np.arange(seq_len - 1, n_frames, stride, dtype=np.int64)


def extract_input_sequence(mix_mag: np.ndarray, k: int, l_end: int, seq_len: int = SEQ_LEN):
    """Normalized ``T x 3`` input for one (bin, window end); returns ``(seq, mu)``."""
    n_bins, n_frames = mix_mag.shape
    if not 0 <= k < n_bins:
        raise InvalidArgumentError(f"bin {k} outside [0, {n_bins - 1}]")
    if l_end < seq_len - 1:
        raise InsufficientHistoryError(f"window end {l_end} needs at least {seq_len - 1} past frames")
    if l_end >= n_frames:
        raise InvalidArgumentError(f"window end {l_end} beyond last frame {n_frames - 1}")
    frames = slice(l_end - seq_len + 1, l_end + 1)
    cols = [max(k - 1, 0), k, min(k + 1, n_bins - 1)]
    raw = np.asarray(mix_mag, dtype=np.float64)[cols, frames].T
    mu = raw[:, 1].mean()
    if mu <= 0:
        raise DegenerateInputError(f"zero mean magnitude in bin {k} window ending at {l_end}")
    return raw / mu, mu


def extract_target_sequence(gt: GroundTruthPsd | np.ndarray, k: int, l_end: int, seq_len: int, mu: float,
                            psd_floor: float = PSD_FLOOR) -> np.ndarray:
    lam = gt.lambda_u if isinstance(gt, GroundTruthPsd) else np.asarray(gt)
    if mu <= 0:
        raise DegenerateInputError("mu must be positive")
    if l_end < seq_len - 1:
        raise InsufficientHistoryError(f"window end {l_end} needs at least {seq_len - 1} past frames")
    window = np.maximum(lam[k, l_end - seq_len + 1:l_end + 1], psd_floor)
    return np.log(window / mu**2)


def windowed_inputs(mix_mag: np.ndarray, ends: np.ndarray, seq_len: int = SEQ_LEN):
    """Vectorised :func:`extract_input_sequence` over all bins and window ends.

    Returns ``(raw, mu)`` with ``raw`` of shape (K, J, T, 3) (unnormalized)
    and ``mu`` of shape (K, J).
    """
    stack = neighbour_stack(np.asarray(mix_mag, dtype=np.float64))
    starts = ends - seq_len + 1
    idx = starts[:, None] + np.arange(seq_len)[None, :]  # (J, T)
    raw = stack[:, idx, :]
    mu = raw[..., 1].mean(axis=2)
    return raw, mu


def sequences_from_mixture(mix_spec: dsp.Spectrogram, gt: GroundTruthPsd, seq_len: int = SEQ_LEN,
                           stride: int = STRIDE, psd_floor: float = PSD_FLOOR) -> SequenceBatch:
    """All (bin, window) sequence pairs of one mixture."""
    n_bins, n_frames = mix_spec.coefficients.shape
    ends = window_ends(n_frames, seq_len, stride)
    if ends.size == 0:
        log.warning("mixture of %d frames is shorter than the %d-frame sequence length; no sequences", n_frames, seq_len)
        return SequenceBatch.empty(seq_len)
    raw, mu = windowed_inputs(mix_spec.magnitude, ends, seq_len)
    keep = mu > 0
    if not keep.all():
        log.warning("dropping %d windows with zero mean magnitude", int((~keep).sum()))
    safe_mu = np.where(keep, mu, 1.0)
    inputs = raw / safe_mu[..., None, None]
    idx = (ends - seq_len + 1)[:, None] + np.arange(seq_len)[None, :]
    lam = np.maximum(gt.lambda_u[:, idx], psd_floor)  # (K, J, T)
    targets = np.log(lam / safe_mu[..., None] ** 2)
    kk, jj = np.meshgrid(np.arange(n_bins), np.arange(ends.size), indexing="ij")
    return SequenceBatch(
        inputs[keep].astype(np.float32),
        targets[keep].astype(np.float32),
        mu[keep].astype(np.float32),
        kk[keep].astype(np.uint16),
        ends[jj[keep]],
    )


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------


def condition_rng(seed: int, split: str, noise_index: int, snr_index: int) -> np.random.Generator:
    """Independent generator per (split, noise, SNR) task, stable under parallelism."""
    ss = np.random.SeedSequence(seed, spawn_key=(SPLITS.index(split), noise_index, snr_index))
    return np.random.default_rng(ss)


def synthesize_mixture(manifest: CorpusManifest, cache: AudioCache, split: str, noise_index: int,
                       snr_db: float, duration: int, rng: np.random.Generator) -> Mixture:
    """Random speech concatenation from ``split`` mixed with a random noise excerpt of the same split."""
    speech_files = manifest.speech_files.get(split, [])
    if not speech_files:
        raise ConfigurationError(f"no speech files in the {split} split")
    if duration < dsp.FFT_SIZE:
        raise InvalidArgumentError(f"mixture duration {duration} shorter than one frame")

    pieces, ids, total = [], [], 0
    while total < duration:
        i = int(rng.integers(len(speech_files)))
        x = cache.get(speech_files[i])
        ids.append(i)
        pieces.append(x)
        total += x.shape[0]
        if x.shape[0] == 0 and len(ids) > 1000:
            raise ConfigurationError("speech files are empty")
    speech = np.concatenate(pieces)[:duration]

    noise_path = manifest.noise_files[noise_index]
    noise_all = cache.get(noise_path)
    start, stop = manifest.noise_section(noise_all.shape[0], split)
    section = noise_all[start:stop]
    if section.shape[0] == 0:
        raise ConfigurationError(f"{split} section of {noise_path} is empty")
    chunks, offsets, remaining = [], [], duration
    while remaining > 0:
        n = min(remaining, section.shape[0])
        off = int(rng.integers(section.shape[0] - n + 1))
        chunks.append(section[off:off + n])
        offsets.append(start + off)
        remaining -= n
    noise = np.concatenate(chunks)

    mix, scaled = mix_at_snr(dsp.WaveBuffer(speech), dsp.WaveBuffer(noise), snr_db)
    spec = MixSpec(float(snr_db), tuple(ids), noise_index, tuple(offsets), duration)
    return Mixture(mix, dsp.WaveBuffer(speech), scaled, manifest.noise_types[noise_index], spec)


@dataclass
class ConditionSequences:
    split: str
    noise_type: str
    snr_db: float
    batch: SequenceBatch
    n_frames: int


def build_training_set(manifest: CorpusManifest, snr_list: Sequence[float] = TRAIN_SNRS,
                       seconds_per_condition: float = 500.0, seq_len: int = SEQ_LEN, stride: int = STRIDE,
                       alpha: float = ALPHA, seed: int = 0, split: str = "train",
                       threads: int = 1) -> Iterator[ConditionSequences]:
    """Yield the sequences of every (noise type, SNR) condition of ``split``.

    Output order and content do not depend on ``threads``.
    """
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if not manifest.speech_files.get(split):
        raise ConfigurationError(f"empty {split} speech split")
    if not manifest.noise_files:
        raise ConfigurationError("no noise files in manifest")
    duration = int(round(seconds_per_condition * dsp.SAMPLE_RATE))
    cache = AudioCache()
    for path in manifest.noise_files:
        cache.get(path)
    for path in manifest.speech_files[split]:
        cache.get(path)

    tasks = [(i, j, snr) for i in range(len(manifest.noise_files)) for j, snr in enumerate(snr_list)]

    def run(task):
        i, j, snr = task
        rng = condition_rng(seed, split, i, j)
        mixture = synthesize_mixture(manifest, cache, split, i, snr, duration, rng)
        mix_spec = dsp.stft(mixture.mix)
        gt = ground_truth_psd(dsp.stft(mixture.noise), alpha)
        batch = sequences_from_mixture(mix_spec, gt, seq_len, stride)
        return ConditionSequences(split, mixture.noise_type, float(snr), batch, mix_spec.n_frames)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            yield from pool.map(run, tasks)
    else:
        for task in tasks:
            yield run(task)


# ---------------------------------------------------------------------------
# NSEQ container
# ---------------------------------------------------------------------------


def _record_dtype(seq_len: int) -> np.dtype:
    return np.dtype([
        ("k", "<u2"),
        ("T", "<u2"),
        ("mu", "<f4"),
        ("input", "<f4", (seq_len, 3)),
        ("target", "<f4", (seq_len,)),
    ])


def write_sequences(path, batch: SequenceBatch) -> None:
    """Write ``NSEQ`` v1: magic, u32 version, then packed little-endian records."""
    rec = np.empty(len(batch), dtype=_record_dtype(batch.seq_len))
    rec["k"] = batch.k
    rec["T"] = batch.seq_len
    rec["mu"] = batch.mu
    rec["input"] = batch.inputs
    rec["target"] = batch.targets
    with open(path, "wb") as fh:
        fh.write(NSEQ_MAGIC)
        fh.write(struct.pack("<I", NSEQ_VERSION))
        fh.write(rec.tobytes())


def read_sequences(path) -> SequenceBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != NSEQ_MAGIC:
        raise FormatError(f"{path}: not an NSEQ container")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != NSEQ_VERSION:
        raise UnsupportedVersionError(f"{path}: NSEQ version {version} is not supported")
    payload = blob[8:]
    if not payload:
        return SequenceBatch.empty()
    if len(payload) < 4:
        raise FormatError(f"{path}: truncated record")
    (seq_len,) = struct.unpack("<H", payload[2:4])
    dtype = _record_dtype(seq_len)
    if seq_len == 0 or len(payload) % dtype.itemsize:
        raise FormatError(f"{path}: truncated or inconsistent records")
    rec = np.frombuffer(payload, dtype=dtype)
    if np.any(rec["T"] != seq_len):
        raise FormatError(f"{path}: mixed sequence lengths")
    return SequenceBatch(
        rec["input"].astype(np.float32),
        rec["target"].astype(np.float32),
        rec["mu"].astype(np.float32),
        rec["k"].astype(np.uint16),
        np.full(rec.shape[0], -1, dtype=np.int64),
    )
