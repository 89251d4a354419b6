"""Noise power spectral density estimation with a per-band LSTM."""

from .dsp import Spectrogram, WaveBuffer, hamming_window, istft, periodogram, stft
from .estimator import NoisePsdTrack, estimate_lstm, estimate_min_stat
from .net import NetworkParams, count_parameters, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
