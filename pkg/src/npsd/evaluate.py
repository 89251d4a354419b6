"""LogErr and segmental SNR metrics, and the per-condition benchmark."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsp, enhance
from .dataset import (
    ALPHA,
    EVAL_SNRS,
    PSD_FLOOR,
    AudioCache,
    CorpusManifest,
    GroundTruthPsd,
    condition_rng,
    ground_truth_psd,
    synthesize_mixture,
)
from .errors import ConfigurationError, InvalidArgumentError, ShapeMismatchError
from .estimator import NoisePsdTrack, estimate_lstm, estimate_min_stat

log = logging.getLogger(__name__)

SNR_SEG_MIN = -10.0
SNR_SEG_MAX = 35.0
REPORT_FIELDS = ["method", "noise", "snr_db", "log_err_db", "snr_seg_db", "n_frames", "n_segments"]
EXTRA_FIELDS = ["log_err_over_db", "log_err_under_db"]


def _grid(x) -> np.ndarray:
    if isinstance(x, NoisePsdTrack):
        return x.lambda_hat
    if isinstance(x, GroundTruthPsd):
        return x.lambda_u
    return np.asarray(x, dtype=np.float64)


def log_err_parts(lambda_hat, lambda_gt, frames: np.ndarray | None = None,
                  psd_floor: float = PSD_FLOOR) -> tuple[float, float, float, int]:
    """Return ``(total, over, under, n_frames)`` in dB.

    ``total`` is the mean of ``|10 log10(est / true)|`` over all bins of the
    included frames; ``over`` and ``under`` are the means of its positive and
    negative parts, so ``total == over + under``. By default warm-up and
    undefined frames of a :class:`NoisePsdTrack` are excluded.
    """
    est, ref = _grid(lambda_hat), _grid(lambda_gt)
    if est.shape != ref.shape:
        raise ShapeMismatchError(f"estimate {est.shape} and ground truth {ref.shape} differ")
    if frames is None:
        frames = np.ones(est.shape[1], dtype=bool)
        if isinstance(lambda_hat, NoisePsdTrack):
            frames &= lambda_hat.defined & ~lambda_hat.warmup
    frames = np.asarray(frames, dtype=bool)
    if not frames.any():
        raise InvalidArgumentError("no frames left to evaluate")
    d = 10.0 * np.log10(np.maximum(est[:, frames], psd_floor) / np.maximum(ref[:, frames], psd_floor))
    return float(np.abs(d).mean()), float(np.maximum(d, 0).mean()), float(np.maximum(-d, 0).mean()), int(frames.sum())


def log_err(lambda_hat, lambda_gt, frames: np.ndarray | None = None, psd_floor: float = PSD_FLOOR) -> float:
    return log_err_parts(lambda_hat, lambda_gt, frames, psd_floor)[0]


def snr_seg_detail(clean, enhanced, sample_rate: int = dsp.SAMPLE_RATE, segment_ms: float = 10.0,
                   active_range_db: float = 40.0) -> tuple[float, int]:
    """Segmental SNR over non-overlapping segments with speech activity.

    A segment is active when its clean energy lies within ``active_range_db``
    of the loudest segment. Per-segment values are clamped to [-10, 35] dB.
    Returns ``(mean_db, n_active_segments)``.
    """
    s = clean.samples if isinstance(clean, dsp.WaveBuffer) else np.asarray(clean, dtype=np.float64)
    e = enhanced.samples if isinstance(enhanced, dsp.WaveBuffer) else np.asarray(enhanced, dtype=np.float64)
    if s.shape != e.shape:
        raise ShapeMismatchError(f"clean and enhanced lengths differ: {s.shape[0]} vs {e.shape[0]}")
    seg = int(round(sample_rate * segment_ms / 1000.0))
    n = s.shape[0] // seg
    s = s[:n * seg].reshape(n, seg)
    e = e[:n * seg].reshape(n, seg)
    energy = np.sum(s * s, axis=1)
    if n == 0 or energy.max() <= 0:
        raise InvalidArgumentError("no speech-active segments")
    active = energy >= energy.max() * 10.0 ** (-active_range_db / 10.0)
    err = np.sum((s - e) ** 2, axis=1)[active]
    with np.errstate(divide="ignore"):
        raw = 10.0 * np.log10(energy[active] / err)
    log.debug("unclamped segmental SNR mean %.3f dB over %d segments", float(np.mean(raw[np.isfinite(raw)])) if np.isfinite(raw).any() else np.inf, raw.size)
    return float(np.mean(np.clip(raw, SNR_SEG_MIN, SNR_SEG_MAX))), int(active.sum())


def snr_seg(clean, enhanced, sample_rate: int = dsp.SAMPLE_RATE) -> float:
    return snr_seg_detail(clean, enhanced, sample_rate)[0]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    noise: str
    snr_db: float
    log_err_db: float
    snr_seg_db: float
    n_frames: int
    n_segments: int
    log_err_over_db: float = float("nan")
    log_err_under_db: float = float("nan")

    def as_list(self) -> list:
        return [self.method, self.noise, self.snr_db, self.log_err_db, self.snr_seg_db, self.n_frames,
                self.n_segments, self.log_err_over_db, self.log_err_under_db]


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def snrs(self) -> list[float]:
        return list(dict.fromkeys(r.snr_db for r in self.rows))

    def average_rows(self) -> list[ReportRow]:
        """Unweighted mean over noise types, per (method, SNR)."""
        out = []
        for method in self.methods:
            for snr in self.snrs:
                sel = [r for r in self.rows if r.method == method and r.snr_db == snr]
                if not sel:
                    continue
                out.append(ReportRow(
                    method, "average", snr,
                    float(np.mean([r.log_err_db for r in sel])),
                    float(np.mean([r.snr_seg_db for r in sel])),
                    sum(r.n_frames for r in sel),
                    sum(r.n_segments for r in sel),
                    float(np.mean([r.log_err_over_db for r in sel])),
                    float(np.mean([r.log_err_under_db for r in sel])),
                ))
        return out

    def mean(self, method: str, column: str) -> float:
        return float(np.mean([getattr(r, column) for r in self.rows if r.method == method]))

    def write(self, out_dir, plot_data: bool = True) -> None:
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(os.path.join(out_dir, "report.csv"), self.rows + self.average_rows())
        _write_rows(os.path.join(out_dir, "summary.csv"), self.average_rows())
        if plot_data:
            self.write_plot_data(out_dir)

    def write_plot_data(self, out_dir) -> None:
        """Per-figure tables: LogErr per noise/SNR, and noise-averaged SNRseg per SNR."""
        methods = self.methods
        with open(os.path.join(out_dir, "plot_logerr.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["noise", "snr_db"] + methods)
            noises = list(dict.fromkeys(r.noise for r in self.rows))
            for noise in noises:
                for snr in self.snrs:
                    vals = {r.method: r.log_err_db for r in self.rows if r.noise == noise and r.snr_db == snr}
                    w.writerow([noise, snr] + [vals.get(m, "") for m in methods])
        avg = self.average_rows()
        with open(os.path.join(out_dir, "plot_snrseg.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snr_db"] + methods)
            for snr in self.snrs:
                vals = {r.method: r.snr_seg_db for r in avg if r.snr_db == snr}
                w.writerow([snr] + [vals.get(m, "") for m in methods])


def _write_rows(path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS + EXTRA_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkSettings:
    snrs: Sequence[float] = EVAL_SNRS
    seconds_per_condition: float = 90.0
    alpha: float = ALPHA
    seq_len: int = 128
    hop_steps: int = 32
    seed: int = 0
    min_stat_beta: float = 0.9
    min_stat_window: int = 96
    min_stat_compensation: float = 1.5
    dd_alpha: float = enhance.DD_ALPHA
    g_min: float = enhance.G_MIN
    with_enhancement: bool = True


def run_benchmark(manifest: CorpusManifest, methods: Sequence[str], params=None,
                  settings: BenchmarkSettings = BenchmarkSettings(), noise_types: Sequence[str] | None = None,
                  split: str = "test") -> EvalReport:
    """Score each method on freshly synthesised test mixtures.

    All methods of one condition see the same mixture and ground truth, and
    are scored on the same frames: those that are defined and outside the
    warm-up of every method.
    """
    for m in methods:
        if m not in ("lstm", "min_stat"):
            raise ConfigurationError(f"unknown method {m!r}")
    if "lstm" in methods and params is None:
        raise ConfigurationError("the lstm method needs a trained checkpoint")
    if not manifest.speech_files.get(split):
        raise ConfigurationError(f"empty {split} speech split")
    duration = int(round(settings.seconds_per_condition * dsp.SAMPLE_RATE))
    cache = AudioCache()
    report = EvalReport()
    for i, noise in enumerate(manifest.noise_types):
        if noise_types is not None and noise not in noise_types:
            continue
        for j, snr in enumerate(settings.snrs):
            rng = condition_rng(settings.seed, split, i, j)
            mixture = synthesize_mixture(manifest, cache, split, i, snr, duration, rng)
            mix_spec = dsp.stft(mixture.mix)
            gt = ground_truth_psd(dsp.stft(mixture.noise), settings.alpha)
            tracks = {}
            for m in methods:
                if m == "lstm":
                    tracks[m] = estimate_lstm(params, mix_spec, settings.seq_len, settings.hop_steps)
                else:
                    tracks[m] = estimate_min_stat(mix_spec, settings.min_stat_beta, settings.min_stat_window,
                                                  settings.min_stat_compensation)
            frames = np.ones(mix_spec.n_frames, dtype=bool)
            for t in tracks.values():
                frames &= t.defined & ~t.warmup
            for m, track in tracks.items():
                total, over, under, n_frames = log_err_parts(track, gt, frames)
                seg, n_seg = float("nan"), 0
                if settings.with_enhancement:
                    gains = enhance.wiener_gains(mix_spec, track, settings.dd_alpha, settings.g_min)
                    out = enhance.apply_and_resynthesize(mix_spec, gains, len(mixture.mix))
                    seg, n_seg = snr_seg_detail(mixture.speech, out)
                report.rows.append(ReportRow(m, noise, float(snr), total, seg, n_frames, n_seg, over, under))
                log.info("%s %s %+.0f dB: LogErr %.3f dB, SNRseg %.3f dB", m, noise, snr, total, seg)
    return report
