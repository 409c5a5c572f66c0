"""Activation-ranked channel pruning.

Channels ("neurons" in the conv sense) with the lowest mean absolute
activation on clean inputs are masked, starting from the final conv layer
and moving backward. Two knobs: the fraction of channels removed per
selected layer and the fraction of conv layers selected. No fine-tuning
stage follows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nnet import Network, forward_batch

FINAL_ONLY = "final-only"   # sentinel conv_layer_rate: prune only the last layer


@dataclass(frozen=True)
class PruneConfig:
    pruning_rate: float
    conv_layer_rate: float | str = FINAL_ONLY

    def __post_init__(self):
        if not 0.0 <= self.pruning_rate <= 1.0:
            raise ConfigError("pruning_rate must be in [0, 1]")
        if self.conv_layer_rate != FINAL_ONLY:
            if not 0.0 < float(self.conv_layer_rate) <= 1.0:
                raise ConfigError("conv_layer_rate must be in (0, 1] or FINAL_ONLY")


@dataclass
class PruneReport:
    pruned: dict[int, list[int]]          # layer index -> masked channel indices
    mean_activations: dict[int, np.ndarray]


def select_layers(net: Network, conv_layer_rate: float | str) -> list[int]:
    """Indices of the conv layers to prune, last layer backward."""
    n_layers = len(net.cfg.conv_layers)
    if conv_layer_rate == FINAL_ONLY:
        return [n_layers - 1]
    count = int(np.ceil(float(conv_layer_rate) * n_layers))
    count = max(1, min(count, n_layers))
    return list(range(n_layers - count, n_layers))


def layer_mean_abs_activation(net: Network, ranking_feats: np.ndarray,
                              batch: int = 64) -> list[np.ndarray]:
    """Per-channel mean |post-activation| over all frames and inputs,
    for every conv layer. ranking_feats: (N, n_mels, frames)."""
    sums = [np.zeros(c[1]) for c in net.cfg.conv_layers]
    counts = [0] * len(sums)
    for s in range(0, len(ranking_feats), batch):
        _, trace = forward_batch(net, ranking_feats[s:s + batch])
        for i, act in enumerate(trace.post_acts):
            sums[i] += np.abs(act).sum(axis=1)
            counts[i] += act.shape[1]
    return [s / max(1, c) for s, c in zip(sums, counts)]


def rank_channels(net: Network, layer: int, ranking_feats: np.ndarray) -> np.ndarray:
    """Channels of one layer sorted ascending by mean absolute activation;
    ties broken by lower channel index first."""
    means = layer_mean_abs_activation(net, ranking_feats)[layer]
    return np.argsort(means, kind="stable")


def prune(net: Network, cfg: PruneConfig, ranking_feats: np.ndarray,
          precomputed_means: list[np.ndarray] | None = None
          ) -> tuple[Network, PruneReport]:
    """Mask the floor(rate * channels) lowest-ranked channels of each selected
    layer. The input network is left untouched; a pruned copy is returned.

    precomputed_means lets sweeps reuse one ranking pass across cells."""
    if cfg.pruning_rate >= 1.0:
        raise ConfigError("pruning_rate = 1 would sever the network")
    layers = select_layers(net, cfg.conv_layer_rate)
    means = precomputed_means if precomputed_means is not None \
        else layer_mean_abs_activation(net, ranking_feats)
    out = net.copy()
    pruned: dict[int, list[int]] = {}
    for li in layers:
        order = np.argsort(means[li], kind="stable")
        n_prune = int(np.floor(cfg.pruning_rate * len(order)))
        victims = [int(c) for c in order[:n_prune]]
        for c in victims:
            out.masks[li][c] = 0
        pruned[li] = victims
    report = PruneReport(pruned, {li: means[li] for li in layers})
    return out, report


def sweep_grid(pruning_rates=None, conv_layer_rates=None):
    """Default sweep axes: rates 0.1..0.9, layer rates FINAL_ONLY plus 0.1..0.5."""
    if pruning_rates is None:
        pruning_rates = [round(0.1 * i, 1) for i in range(1, 10)]
    if conv_layer_rates is None:
        conv_layer_rates = [FINAL_ONLY] + [round(0.1 * i, 1) for i in range(1, 6)]
    return [(clr, pr) for clr in conv_layer_rates for pr in pruning_rates]
