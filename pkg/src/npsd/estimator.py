"""Noise PSD trackers: block-online LSTM inference and a minimum-statistics baseline."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import dsp, net
from .dataset import SEQ_LEN, window_ends, windowed_inputs
from .errors import FormatError, InsufficientHistoryError, InvalidArgumentError

MU_FLOOR = 1e-10
GRID_MAGIC = b"NPSG"


@dataclass
class NoisePsdTrack:
    """Estimated noise PSD (K, L) in linear power; NaN where no estimate exists."""

    lambda_hat: np.ndarray
    method: str
    latency_frames: int
    warmup: np.ndarray  # (L,) bool

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.lambda_hat).any(axis=0)

    @property
    def shape(self):
        return self.lambda_hat.shape

    def filled(self) -> np.ndarray:
        """Grid with undefined frames replaced by the nearest earlier estimate."""
        lam = self.lambda_hat.copy()
        ok = self.defined
        if not ok.any():
            raise InvalidArgumentError("track has no defined frames")
        idx = np.where(ok, np.arange(ok.size), -1)
        idx = np.maximum.accumulate(idx)
        idx[idx < 0] = int(np.argmax(ok))
        return lam[:, idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "l", "lambda_hat", "warmup"])
            n_bins = self.lambda_hat.shape[0]
            for l in np.flatnonzero(self.defined):
                flag = int(self.warmup[l])
                for k in range(n_bins):
                    w.writerow([k, l, repr(float(self.lambda_hat[k, l])), flag])

    def to_grid(self, path) -> None:
        """``NPSG``: magic, u32 K, u32 L, then float32 little-endian (K, L) row-major."""
        n_bins, n_frames = self.lambda_hat.shape
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<2I", n_bins, n_frames))
            fh.write(np.ascontiguousarray(self.lambda_hat, dtype="<f4").tobytes())


def read_grid(path) -> NoisePsdTrack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: not an NPSG grid")
    n_bins, n_frames = struct.unpack("<2I", blob[4:12])
    if len(blob) != 12 + 4 * n_bins * n_frames:
        raise FormatError(f"{path}: truncated grid")
    lam = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n_bins, n_frames).astype(np.float64)
    return NoisePsdTrack(lam, "grid", 0, np.zeros(n_frames, dtype=bool))


def _magnitude(mix) -> np.ndarray:
    if isinstance(mix, dsp.Spectrogram):
        return mix.magnitude
    mix = np.asarray(mix)
    return np.abs(mix) if np.iscomplexobj(mix) else mix.astype(np.float64)


def latency_for(hop_steps: int) -> int:
    return 0 if hop_steps == 1 else hop_steps


def estimate_lstm(params: net.NetworkParams, mix, seq_len: int = SEQ_LEN, hop_steps: int = 32,
                  batch_size: int = 512, max_windows_per_chunk: int = 64) -> NoisePsdTrack:
    """Sliding-window LSTM estimate over every bin of a noisy spectrogram.

    Windows of ``seq_len`` frames end at ``seq_len-1, seq_len-1+hop_steps, ...``.
    Each window is normalized by its own centre-bin mean magnitude, run from
    zero state, and its last ``hop_steps`` outputs are mapped back to power as
    ``exp(y) * mu**2``. The first window emits all of its outputs so that the
    opening frames are covered; those earlier frames are flagged as warm-up.
    Frames after the last window end stay undefined (NaN).
    """
    mag = _magnitude(mix)
    n_bins, n_frames = mag.shape
    if not 1 <= hop_steps <= seq_len:
        raise InvalidArgumentError(f"hop_steps must lie in [1, {seq_len}], got {hop_steps}")
    if n_frames < seq_len:
        raise InsufficientHistoryError(f"{n_frames} frames is fewer than the {seq_len}-frame window")
    ends = window_ends(n_frames, seq_len, hop_steps)
    lam = np.full((n_bins, n_frames), np.nan)
    for c in range(0, ends.size, max_windows_per_chunk):
        chunk = ends[c:c + max_windows_per_chunk]
        raw, mu = windowed_inputs(mag, chunk, seq_len)
        mu = np.maximum(mu, MU_FLOOR)
        inputs = (raw / mu[..., None, None]).reshape(-1, seq_len, raw.shape[-1]).astype(np.float32)
        y = net.predict(params, inputs, batch_size).reshape(n_bins, chunk.size, seq_len)
        power = np.exp(y.astype(np.float64)) * (mu**2)[..., None]
        for j, l_end in enumerate(chunk):
            emit = seq_len if l_end == seq_len - 1 else hop_steps
            lam[:, l_end - emit + 1:l_end + 1] = power[:, j, seq_len - emit:]
    warmup = np.zeros(n_frames, dtype=bool)
    warmup[:seq_len - hop_steps] = True
    return NoisePsdTrack(lam, "lstm", latency_for(hop_steps), warmup)


def estimate_min_stat(mix, beta: float = 0.9, window: int = 96, compensation: float = 1.5) -> NoisePsdTrack:
    """Compensated minimum of the recursively smoothed periodogram.

    ``P(l) = beta P(l-1) + (1-beta)|x(l)|^2`` seeded with ``P(0) = |x(0)|^2``;
    the estimate is ``compensation * min(P[l-window+1 .. l])`` with the search
    window truncated at the start of the signal.
    """
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    if not 0.0 <= beta < 1.0:
        raise InvalidArgumentError("beta must lie in [0, 1)")
    power = _magnitude(mix) ** 2
    n_bins, n_frames = power.shape
    smoothed = np.empty_like(power)
    smoothed[:, 0] = power[:, 0]
    for l in range(1, n_frames):
        smoothed[:, l] = beta * smoothed[:, l - 1] + (1.0 - beta) * power[:, l]
    padded = np.concatenate([np.full((n_bins, window - 1), np.inf), smoothed], axis=1)
    minima = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1).min(axis=2)
    warmup = np.zeros(n_frames, dtype=bool)
    warmup[:window - 1] = True
    return NoisePsdTrack(compensation * minima, "min_stat", 0, warmup)
