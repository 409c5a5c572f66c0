"""Preprocessing defenses applied to inference inputs.

Quantization re-grids the 16-bit integer representation with step q, the
median filter smooths with a 2k+1 window, squeezing keeps every d-th sample
and rewrites the gaps (zeros by default, linear interpolation optionally).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import LabeledDataset, PCM_SCALE, Utterance
from .errors import ConfigError, DataError
from .features import FeatureConfig
from .training import evaluate_asr, evaluate_ca


@dataclass(frozen=True)
class PreprocConfig:
    quantize_q: int = 1            # step size on the 16-bit integer grid
    median_k: int = 0              # window is 2k+1
    squeeze_factor: int = 1        # keep every d-th sample (1 = no-op)
    squeeze_mode: str = "zeros"    # or "interp"

    def __post_init__(self):
        if self.quantize_q < 1 or self.median_k < 0 or self.squeeze_factor < 1:
            raise ConfigError("bad preprocessing parameters")
        if self.squeeze_mode not in ("zeros", "interp"):
            raise ConfigError(f"unknown squeeze_mode: {self.squeeze_mode}")


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, np.floor(v + 0.5), np.ceil(v - 0.5))


def quantize(x: np.ndarray, q: int) -> np.ndarray:
    """Re-quantize with step q on the 16-bit grid; integer math throughout."""
    if q < 1:
        raise ConfigError("q must be a positive integer")
    v = np.asarray(x, dtype=np.float64) * PCM_SCALE
    s_int = _round_half_away(v).astype(np.int64)
    # round(s/q) half away from zero, exactly, in integers
    mag = (2 * np.abs(s_int) + q) // (2 * q)
    s_hat = np.sign(s_int) * q * mag
    return np.clip(s_hat.astype(np.float64) / PCM_SCALE, -1.0, 1.0)


def median_filter(x: np.ndarray, k: int) -> np.ndarray:
    """Median over each 2k+1 neighborhood with edge-replicate padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise DataError("empty signal")
    if k == 0:
        return x.copy()
    padded = np.pad(x, k, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * k + 1)
    return np.median(windows, axis=1)


def squeeze(x: np.ndarray, d: int, mode: str = "zeros") -> np.ndarray:
    """Down-sample by d then restore the original rate.

    zeros: kept samples stay, inserted positions are 0 (the literal
    zero-insertion reconstruction). interp: linear interpolation between
    kept samples instead. Output length is d * ceil(len(x) / d).
    """
    x = np.asarray(x, dtype=np.float64)
    if d < 1:
        raise ConfigError("squeeze factor must be >= 1")
    if x.size < d:
        raise DataError(f"signal shorter than squeeze factor ({x.size} < {d})")
    kept = x[::d]
    n_out = d * kept.size
    if mode == "zeros":
        out = np.zeros(n_out)
        out[::d] = kept
        return out
    if mode == "interp":
        pos = np.arange(n_out, dtype=np.float64)
        return np.interp(pos, np.arange(kept.size) * d, kept)
    raise ConfigError(f"unknown squeeze mode: {mode}")


def apply_preproc(u: Utterance, cfg: PreprocConfig) -> Utterance:
    wav = np.asarray(u.waveform, dtype=np.float64)
    if cfg.quantize_q > 1:
        wav = quantize(wav, cfg.quantize_q)
    if cfg.median_k > 0:
        wav = median_filter(wav, cfg.median_k)
    if cfg.squeeze_factor > 1:
        wav = squeeze(wav, cfg.squeeze_factor, cfg.squeeze_mode)
    return replace(u, waveform=wav.astype(np.float32))


def _transform_dataset(ds: LabeledDataset, cfg: PreprocConfig) -> LabeledDataset:
    return ds.with_utterances([apply_preproc(u, cfg) for u in ds])


# Default sweep grids; each includes its identity value so the undefended
# baseline appears as a mandated no-op row in every sweep.
DEFAULT_Q_GRID = (1, 2, 8, 32, 128, 512, 2048)
DEFAULT_K_GRID = (0, 1, 2, 4, 7)
DEFAULT_D_GRID = (1, 2, 3, 4)


def sweep_preproc(net, clean_test: LabeledDataset, poisoned_test: LabeledDataset,
                  target_speaker: int, fcfg: FeatureConfig,
                  q_grid=DEFAULT_Q_GRID, k_grid=DEFAULT_K_GRID, d_grid=DEFAULT_D_GRID,
                  squeeze_mode: str = "zeros") -> list[dict]:
    """CA/ASR after each single-defense grid point, one row per point."""
    rows = []

    def add_row(defense: str, parameter, pcfg: PreprocConfig):
        ca = evaluate_ca(net, _transform_dataset(clean_test, pcfg), fcfg)
        asr = evaluate_asr(net, _transform_dataset(poisoned_test, pcfg),
                           target_speaker, fcfg)
        rows.append({"defense": defense, "parameter": parameter, "ca": ca, "asr": asr})

    for q in q_grid:
        add_row("quantize", q, PreprocConfig(quantize_q=int(q)))
    for k in k_grid:
        add_row("median", k, PreprocConfig(median_k=int(k)))
    for d in d_grid:
        add_row("squeeze", d, PreprocConfig(squeeze_factor=int(d),
                                            squeeze_mode=squeeze_mode))
    return rows
