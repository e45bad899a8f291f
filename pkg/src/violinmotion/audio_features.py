"""Log-Mel spectrogram front-end feeding both neural modules.

Framing is center-free: frame t covers samples [t*hop, t*hop + window), so
the frame count is an exact function of the input length,
``T = 1 + (len - window) // hop``. The window is a periodic Hann window.

The Mel filterbank uses HTK-style spacing, ``mel(f) = 2595*log10(1+f/700)``,
with triangular filters normalized to unit area in Hz (peak height
``2 / (f_hi - f_lo)``). Output is ``log(filterbank @ |STFT|^2 + log_floor)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal.windows import hann

from .errors import ConfigError, DimensionMismatch, TooShort


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 44100
    hop: int = 1470
    window: int = 2048
    n_mels: int = 128
    fmin: float = 30.0
    fmax: float = 16000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels % 16 != 0:
            raise ConfigError(
                f"n_mels must be divisible by 16 for the classifier's "
                f"frequency pooling, got {self.n_mels}")
        if self.hop > self.window:
            raise ConfigError(f"hop {self.hop} must not exceed window {self.window}")
        if not 0 < self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 < fmin < fmax <= sample_rate/2, got "
                f"fmin={self.fmin}, fmax={self.fmax}, sr={self.sample_rate}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def config_hash(self) -> str:
        """Stable digest used to match cached features and checkpoints."""
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def n_frames(self, n_samples: int) -> int:
        """Frame count the extractor will produce for ``n_samples`` samples."""
        if n_samples < self.window:
            return 0
        return 1 + (n_samples - self.window) // self.hop


@dataclass
class MelSpectrogram:
    data: np.ndarray  # T×F log-Mel energies
    config: MelConfig

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.config.n_mels:
            raise DimensionMismatch(
                f"expected T×{self.config.n_mels}, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DimensionMismatch("log-Mel energies must all be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: MelConfig) -> np.ndarray:
    """(n_mels+2,) Hz points; filter m spans edges[m] .. edges[m+2]."""
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax),
                       config.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """(n_mels, window//2 + 1) triangular, area-normalized filterbank."""
    n_bins = config.window // 2 + 1
    bin_hz = np.arange(n_bins) * config.sample_rate / config.window
    edges = mel_band_edges(config)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bin_hz - lo) / (mid - lo)
    fall = (hi - bin_hz) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    fb *= 2.0 / (hi - lo)  # unit area in Hz
    return fb


def mel_spectrogram(wave: np.ndarray, config: MelConfig) -> MelSpectrogram:
    """Log-Mel energies of a mono waveform; T = 1 + (len - window) // hop."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise DimensionMismatch(f"expected mono 1-D waveform, got shape {wave.shape}")
    if len(wave) < config.window:
        raise TooShort(
            f"waveform of {len(wave)} samples is shorter than one "
            f"window ({config.window})")
    n_frames = config.n_frames(len(wave))
    idx = np.arange(config.window)[None, :] + \
        config.hop * np.arange(n_frames)[:, None]
    frames = wave[idx] * hann(config.window, sym=False)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    data = np.log(power @ mel_filterbank(config).T + config.log_floor)
    return MelSpectrogram(data=data, config=config)


def normalize_mel(mel: MelSpectrogram, stats) -> MelSpectrogram:
    """Whiten per frequency channel: (x - mean[f]) / sqrt(var[f]).

    ``stats`` is a NormalizationStats (anything exposing ``mel_mean`` and
    ``mel_var`` F-vectors).
    """
    mean = np.asarray(stats.mel_mean, dtype=np.float64)
    var = np.asarray(stats.mel_var, dtype=np.float64)
    if mean.shape != (mel.config.n_mels,) or var.shape != (mel.config.n_mels,):
        raise DimensionMismatch(
            f"stats have {mean.shape}/{var.shape} channels, "
            f"features have {mel.config.n_mels}")
    return MelSpectrogram(data=(mel.data - mean) / np.sqrt(var), config=mel.config)
