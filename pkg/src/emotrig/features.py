"""Log-mel filterbank features and fixed-length chunk extraction.

All models consume the same 80-bin log-mel representation; training draws a
random fixed-duration chunk of each utterance, evaluation uses the center
chunk so metrics are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import Utterance
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 80
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 20.0
    fmax: float | None = None   # None -> Nyquist
    log_floor: float = 1e-10
    chunk_s: float = 3.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 < self.hop_ms <= self.frame_len_ms:
            raise ConfigError("need 0 < hop_ms <= frame_len_ms")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be > 0")

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_ms * sample_rate / 1000.0))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def effective_fmax(self, sample_rate: int) -> float:
        nyq = sample_rate / 2.0
        fmax = nyq if self.fmax is None else self.fmax
        if not self.fmin < fmax <= nyq:
            raise ConfigError(f"need fmin < fmax <= Nyquist, got {self.fmin}/{fmax}")
        return fmax


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray   # (frames, n_mels) log energies
    frame_rate: float    # frames per second


def random_chunk(u: Utterance, cfg: FeatureConfig, seed) -> Utterance:
    """Fixed-length chunk; short inputs are cyclically tiled, offsets seeded."""
    n = len(u.waveform)
    if n < 1:
        raise DataError("empty utterance")
    target = int(round(cfg.chunk_s * u.sample_rate))
    rng = np.random.default_rng(seed)
    if n >= target:
        off = int(rng.integers(0, n - target + 1))
        wav = u.waveform[off:off + target]
    else:
        off = int(rng.integers(0, n))
        idx = (off + np.arange(target)) % n
        wav = u.waveform[idx]
    return replace(u, waveform=wav)


def center_chunk(u: Utterance, cfg: FeatureConfig) -> Utterance:
    """Deterministic chunk for evaluation: centered, tiled from 0 if short."""
    n = len(u.waveform)
    target = int(round(cfg.chunk_s * u.sample_rate))
    if n >= target:
        off = (n - target) // 2
        wav = u.waveform[off:off + target]
    else:
        wav = u.waveform[np.arange(target) % n]
    return replace(u, waveform=wav)


def power_spectrum(frame: np.ndarray) -> np.ndarray:
    """Hann-windowed magnitude-squared spectrum, length floor(n/2)+1."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1 or len(frame) < 2:
        raise DataError("frame must be a 1-D window of length >= 2")
    win = np.hanning(len(frame))
    return np.abs(np.fft.rfft(frame * win)) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    fmax = cfg.effective_fmax(sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    return pts


def mel_matrix(cfg: FeatureConfig, n_fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, centers equally spaced on the mel scale.

    Rejects configs where spectral resolution leaves any filter empty.
    """
    pts = mel_filter_centers(cfg, sample_rate)
    n_fft = 2 * (n_fft_bins - 1)
    freqs = np.arange(n_fft_bins) * sample_rate / n_fft
    weights = np.zeros((cfg.n_mels, n_fft_bins))
    for m in range(cfg.n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (freqs - lo) / (c - lo)
        falling = (hi - freqs) / (hi - c)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    sums = weights.sum(axis=1)
    if np.any(sums <= 0):
        empty = int(np.argmax(sums <= 0))
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for the spectral resolution "
            f"(filter {empty} empty); reduce n_mels or enlarge the window")
    return weights


def log_mel(u: Utterance, cfg: FeatureConfig) -> FeatureMatrix:
    """frames -> power spectra -> mel weighting -> log(energy + floor)."""
    vals = log_mel_array(np.asarray(u.waveform, dtype=np.float64), u.sample_rate, cfg)
    return FeatureMatrix(vals, frame_rate=1000.0 / cfg.hop_ms)


def log_mel_array(x: np.ndarray, sample_rate: int, cfg: FeatureConfig,
                  weights: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
    """Vectorized log-mel for a raw waveform; returns (frames, n_mels).

    dtype=float32 is a faster compute path for training loops; the default
    keeps full precision for the reference-checked contract.
    """
    flen = cfg.frame_len(sample_rate)
    hop = cfg.hop(sample_rate)
    x = np.asarray(x, dtype=dtype)
    if len(x) < flen:
        raise DataError(f"utterance shorter than one frame ({len(x)} < {flen})")
    if weights is None:
        weights = mel_matrix(cfg, flen // 2 + 1, sample_rate)
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::hop]
    spec = np.abs(np.fft.rfft(frames * np.hanning(flen).astype(dtype), axis=1)) ** 2
    return np.log(spec @ weights.T.astype(dtype) + dtype(cfg.log_floor))


def n_frames(n_samples: int, cfg: FeatureConfig, sample_rate: int) -> int:
    flen = cfg.frame_len(sample_rate)
    hop = cfg.hop(sample_rate)
    if n_samples < flen:
        raise DataError("too short for one frame")
    return 1 + (n_samples - flen) // hop


def dump_features_csv(fm: FeatureMatrix, path) -> None:
    np.savetxt(path, fm.values, delimiter=",")
