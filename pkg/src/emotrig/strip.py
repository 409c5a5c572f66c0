"""Perturbation-entropy trigger detection (STRIP applied to audio).

Each incoming utterance is superimposed with N clean pool utterances; the
Shannon entropy of the resulting predictions is averaged. Trigger-bearing
inputs keep steering the model to the target class, so they score low
entropy; the decision rule is entropy < threshold => flagged as poisoned.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import LabeledDataset, Utterance
from .errors import ConfigError, DataError
from .features import FeatureConfig, center_chunk, log_mel_array, mel_matrix
from .nnet import Network, forward_batch


@dataclass(frozen=True)
class StripConfig:
    n_copies: int = 20
    mix_gain: float = 1.0
    preset_frr: float = 0.05
    threshold_mode: str = "poisoned-quantile"   # or "clean-quantile"
    seed: int = 0

    def __post_init__(self):
        if self.n_copies < 2:
            raise ConfigError("n_copies must be >= 2")
        if self.mix_gain <= 0:
            raise ConfigError("mix_gain must be > 0")
        if not 0.0 < self.preset_frr < 1.0:
            raise ConfigError("preset_frr must be in (0, 1)")
        if self.threshold_mode not in ("poisoned-quantile", "clean-quantile"):
            raise ConfigError(f"unknown threshold_mode: {self.threshold_mode}")


@dataclass
class EntropyReport:
    clean_entropies: np.ndarray
    poisoned_entropies: np.ndarray
    threshold: float
    far: float
    frr: float
    preset_frr: float
    threshold_mode: str


def superimpose(x: Utterance, p: Utterance, alpha: float) -> Utterance:
    """x + alpha * p with p tiled/truncated to len(x); clamped, labels from x."""
    if x.sample_rate != p.sample_rate:
        raise DataError("sample-rate mismatch in superimpose")
    n = len(x.waveform)
    pw = np.asarray(p.waveform, dtype=np.float64)
    pw = pw[:n] if len(pw) >= n else np.resize(pw, n)
    mixed = np.clip(np.asarray(x.waveform, dtype=np.float64) + alpha * pw, -1.0, 1.0)
    return replace(x, waveform=mixed.astype(np.float32))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def shannon_entropy_bits(probs: np.ndarray) -> np.ndarray:
    """-sum p log2 p along the last axis; 0 log 0 := 0."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def strip_entropy(net, x: Utterance, pool: list[Utterance], cfg: StripConfig,
                  fcfg: FeatureConfig, seed=None) -> float:
    """Mean prediction entropy of x under N distinct pool superpositions."""
    if len(pool) < cfg.n_copies:
        raise DataError(f"perturbation pool smaller than n_copies "
                        f"({len(pool)} < {cfg.n_copies})")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    picks = rng.choice(len(pool), size=cfg.n_copies, replace=False)
    entropies = []
    weights = None
    feats = []
    for k in picks:
        mixed = center_chunk(superimpose(x, pool[int(k)], cfg.mix_gain), fcfg)
        if weights is None:
            sr = mixed.sample_rate
            weights = mel_matrix(fcfg, fcfg.frame_len(sr) // 2 + 1, sr)
        feats.append(log_mel_array(mixed.waveform, mixed.sample_rate, fcfg, weights,
                                   dtype=np.float32).T)
    if isinstance(net, Network):
        logits, _ = forward_batch(net, np.asarray(np.stack(feats), dtype=np.float32))
        entropies = shannon_entropy_bits(_softmax(logits))
    else:
        entropies = np.array([
            float(shannon_entropy_bits(_softmax(net.logits(f.T)))) for f in feats])
    return float(np.mean(entropies))


def entropy_sets(net, clean: LabeledDataset, poisoned: LabeledDataset,
                 pool: list[Utterance], cfg: StripConfig, fcfg: FeatureConfig
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance entropies for the clean and poisoned sets; pool draws are
    seeded per utterance so the report is schedule-independent."""
    def run(ds, tag):
        return np.array([
            strip_entropy(net, u, pool, cfg, fcfg,
                          seed=[cfg.seed & 0xFFFFFFFF, tag, i])
            for i, u in enumerate(ds)])
    return run(clean, 0), run(poisoned, 1)


def calibrate_threshold(entropies, preset_frr: float, mode: str) -> float:
    """Entropy threshold realizing the preset FRR.

    poisoned-quantile (paper's procedure): the (1 - FRR) quantile of
    poisoned-set entropies, so about preset_frr of poisoned samples land at
    or above it and pass as clean. clean-quantile (defender-realistic): the
    FRR quantile of clean-set entropies.
    """
    vals = np.asarray(list(entropies), dtype=np.float64)
    if vals.size == 0:
        raise DataError("empty entropy list")
    if mode == "poisoned-quantile":
        return float(np.quantile(vals, 1.0 - preset_frr))
    if mode == "clean-quantile":
        return float(np.quantile(vals, preset_frr))
    raise ConfigError(f"unknown threshold mode: {mode}")


def evaluate_far_frr(clean_entropies, poisoned_entropies, threshold: float
                     ) -> tuple[float, float]:
    """FAR = clean flagged as triggered; FRR = poisoned passed as clean."""
    ce = np.asarray(list(clean_entropies), dtype=np.float64)
    pe = np.asarray(list(poisoned_entropies), dtype=np.float64)
    if ce.size == 0 or pe.size == 0:
        raise DataError("entropy lists must be nonempty")
    far = float(np.mean(ce < threshold))
    frr = float(np.mean(pe >= threshold))
    return far, frr


def run_strip(net, clean: LabeledDataset, poisoned: LabeledDataset,
              pool: list[Utterance], cfg: StripConfig, fcfg: FeatureConfig
              ) -> EntropyReport:
    ce, pe = entropy_sets(net, clean, poisoned, pool, cfg, fcfg)
    source = pe if cfg.threshold_mode == "poisoned-quantile" else ce
    threshold = calibrate_threshold(source, cfg.preset_frr, cfg.threshold_mode)
    far, frr = evaluate_far_frr(ce, pe, threshold)
    return EntropyReport(ce, pe, threshold, far, frr, cfg.preset_frr, cfg.threshold_mode)


def entropy_histogram(report: EntropyReport, n_bins: int = 20
                      ) -> list[tuple[float, float, int, int]]:
    """Binned (lo, hi, clean_count, poisoned_count) rows for the histogram CSV."""
    all_vals = np.concatenate([report.clean_entropies, report.poisoned_entropies])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, n_bins + 1)
    c_hist, _ = np.histogram(report.clean_entropies, bins=edges)
    p_hist, _ = np.histogram(report.poisoned_entropies, bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(c_hist[i]), int(p_hist[i]))
            for i in range(n_bins)]
