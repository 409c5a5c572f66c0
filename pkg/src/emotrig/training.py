"""Training protocol, CA/ASR metrics, and the gender comparison t-test.

Mini-batch SGD with momentum, a fresh random chunk per utterance per epoch,
warm-up before early stopping becomes active, and best-checkpoint restore.
Evaluation always uses deterministic center chunks.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import nnet
from .corpus import LabeledDataset
from .errors import ConfigError, DataError
from .features import FeatureConfig, center_chunk, log_mel_array, mel_matrix, random_chunk
from .nnet import Network, NetworkConfig, cross_entropy_batch, forward_batch


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    warmup_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 0.002
    momentum: float = 0.9
    n_repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.n_repeats < 1:
            raise ConfigError("patience and n_repeats must be >= 1")
        if self.warmup_epochs >= self.max_epochs:
            raise ConfigError("warmup_epochs must be < max_epochs")


@dataclass
class TrainResult:
    best_epoch: int
    val_loss_curve: list[float]
    seed: int
    diverged: bool = False
    wall_s: float = 0.0


@dataclass
class RunResult:
    ca: float
    asr: float
    best_epoch: int
    val_loss_curve: list[float]
    seed: int
    diverged: bool = False
    wall_s: float = 0.0


class EarlyStopper:
    """Best-loss tracking with patience; inert during the warm-up epochs."""

    def __init__(self, patience: int, warmup_epochs: int):
        self.patience = patience
        self.warmup = warmup_epochs
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_count = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record this epoch's loss; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_count = 0
            return False
        if epoch <= self.warmup:
            return False
        self.bad_count += 1
        return self.bad_count >= self.patience


def _dataset_features(ds: LabeledDataset, fcfg: FeatureConfig, weights: np.ndarray,
                      chunker, dtype=np.float64) -> np.ndarray:
    """Stack per-utterance chunk features as (N, n_mels, frames), float32."""
    feats = []
    for i, u in enumerate(ds):
        c = chunker(i, u)
        feats.append(log_mel_array(c.waveform, c.sample_rate, fcfg, weights,
                                   dtype=dtype).T)
    return np.asarray(np.stack(feats), dtype=np.float32)


def eval_features(ds: LabeledDataset, fcfg: FeatureConfig,
                  weights: np.ndarray | None = None) -> np.ndarray:
    if weights is None:
        weights = _weights_for(ds, fcfg)
    return _dataset_features(ds, fcfg, weights, lambda i, u: center_chunk(u, fcfg))


def _weights_for(ds: LabeledDataset, fcfg: FeatureConfig) -> np.ndarray:
    sr = ds[0].sample_rate
    return mel_matrix(fcfg, fcfg.frame_len(sr) // 2 + 1, sr)


def labels_of(ds: LabeledDataset) -> np.ndarray:
    return np.array([u.speaker_label for u in ds], dtype=np.int64)


def _batched_logits(net: Network, feats: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(feats), batch):
        logits, _ = forward_batch(net, feats[s:s + batch])
        out.append(logits)
    return np.concatenate(out, axis=0)


def train(net_cfg: NetworkConfig, train_set: LabeledDataset, val_set: LabeledDataset,
          cfg: TrainConfig, fcfg: FeatureConfig) -> tuple[Network, TrainResult]:
    """SGD + momentum with per-epoch random chunks and early stopping.

    The returned network carries the parameters of the best-validation epoch.
    cfg.seed determines initialization, batch order, and chunk offsets.
    """
    if not len(train_set) or not len(val_set):
        raise DataError("train and val sets must be nonempty")
    t0 = time.perf_counter()
    weights = _weights_for(train_set, fcfg)
    init_seed = int(np.random.default_rng([cfg.seed & 0xFFFFFFFF, 1]).integers(2 ** 31))
    net = Network(replace(net_cfg, init_seed=init_seed))
    order_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 2])

    val_feats = eval_features(val_set, fcfg, weights)
    val_labels = labels_of(val_set)
    train_labels = labels_of(train_set)

    velocity = {name: np.zeros_like(arr) for name, arr in net.param_items()}
    stopper = EarlyStopper(cfg.patience, cfg.warmup_epochs)
    best_params = {name: arr.copy() for name, arr in net.param_items()}
    curve: list[float] = []
    diverged = False

    for epoch in range(1, cfg.max_epochs + 1):
        feats = _dataset_features(
            train_set, fcfg, weights,
            lambda i, u: random_chunk(u, fcfg, [cfg.seed & 0xFFFFFFFF, 3, epoch, i]),
            dtype=np.float32)
        order = order_rng.permutation(len(train_set))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = nnet.batch_loss(net, feats[idx], train_labels[idx])
            if not np.isfinite(loss):
                diverged = True
                break
            for name, arr in net.param_items():
                v = velocity[name]
                v *= cfg.momentum
                v -= cfg.learning_rate * grads[name]
                arr += v
        if diverged:
            break

        logits = _batched_logits(net, val_feats)
        val_loss, _ = cross_entropy_batch(logits, val_labels)
        curve.append(float(val_loss))
        if not np.isfinite(val_loss):
            diverged = True
            break
        if val_loss < stopper.best_loss:
            best_params = {name: arr.copy() for name, arr in net.param_items()}
        if stopper.update(epoch, val_loss):
            break

    for name, arr in best_params.items():
        net.set_param(name, arr)
    result = TrainResult(best_epoch=stopper.best_epoch, val_loss_curve=curve,
                         seed=cfg.seed, diverged=diverged,
                         wall_s=time.perf_counter() - t0)
    return net, result


def predict_labels(net, ds: LabeledDataset, fcfg: FeatureConfig) -> np.ndarray:
    """Argmax speaker predictions with deterministic center-chunk features.

    Works for any object exposing .logits(feature_matrix); Network instances
    take a batched fast path.
    """
    if isinstance(net, Network):
        feats = eval_features(ds, fcfg)
        return np.argmax(_batched_logits(net, feats), axis=1)
    weights = _weights_for(ds, fcfg)
    preds = []
    for u in ds:
        c = center_chunk(u, fcfg)
        fm = log_mel_array(c.waveform, c.sample_rate, fcfg, weights)
        preds.append(int(np.argmax(net.logits(fm))))
    return np.array(preds, dtype=np.int64)


def evaluate_ca(net, clean_test: LabeledDataset, fcfg: FeatureConfig) -> float:
    """Fraction of clean test inputs classified as their true speaker."""
    if not len(clean_test):
        raise DataError("clean test set is empty")
    preds = predict_labels(net, clean_test, fcfg)
    return float(np.mean(preds == labels_of(clean_test)))


def evaluate_asr(net, poisoned_test: LabeledDataset, target_speaker: int,
                 fcfg: FeatureConfig) -> float:
    """Fraction of trigger-bearing inputs classified as the target speaker."""
    if not len(poisoned_test):
        raise DataError("poisoned test set is empty")
    preds = predict_labels(net, poisoned_test, fcfg)
    return float(np.mean(preds == target_speaker))


def ca_from_feats(net: Network, feats: np.ndarray, labels: np.ndarray) -> float:
    """CA on precomputed center-chunk features (sweep fast path)."""
    preds = np.argmax(_batched_logits(net, feats), axis=1)
    return float(np.mean(preds == labels))


def asr_from_feats(net: Network, feats: np.ndarray, target_speaker: int) -> float:
    preds = np.argmax(_batched_logits(net, feats), axis=1)
    return float(np.mean(preds == target_speaker))


# -- two-sample t-test --------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    # continued fraction for the incomplete beta (modified Lentz)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    return h


def _log_beta(a: float, b: float) -> float:
    from math import lgamma
    return lgamma(a) + lgamma(b) - lgamma(a + b)


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    from math import exp, log
    front = exp(a * log(x) + b * log(1.0 - x) - _log_beta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - exp(b * log(1.0 - x) + a * log(x) - _log_beta(b, a)) * \
        _betacf(b, a, 1.0 - x) / b


def t_test_independent(xs, ys, equal_var: bool = True) -> tuple[float, float]:
    """Two-sample Student t statistic and two-sided p-value.

    Pooled variance by default (the classic independent test); Welch's
    unequal-variance form is available via equal_var=False.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n1, n2 = len(xs), len(ys)
    if n1 < 2 or n2 < 2:
        raise DataError("both samples need at least 2 observations")
    m1, m2 = xs.mean(), ys.mean()
    v1 = xs.var(ddof=1)
    v2 = ys.var(ddof=1)
    if v1 == 0.0 and v2 == 0.0:
        if m1 == m2:
            return 0.0, 1.0
        raise DataError("zero variance in both samples with unequal means")
    if equal_var:
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2)
        t = (m1 - m2) / np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
        df = n1 + n2 - 2
    else:
        se1, se2 = v1 / n1, v2 / n2
        t = (m1 - m2) / np.sqrt(se1 + se2)
        df = (se1 + se2) ** 2 / (se1 ** 2 / (n1 - 1) + se2 ** 2 / (n2 - 1))
    if t == 0.0:
        return 0.0, 1.0
    x = df / (df + t * t)
    p = reg_inc_beta(df / 2.0, 0.5, x)
    return float(t), float(min(1.0, p))


def mean_metrics(results: list[RunResult]) -> tuple[float, float]:
    """Aggregate repeats, order-independent (sorted by seed before averaging)."""
    ordered = sorted(results, key=lambda r: r.seed)
    return (float(np.mean([r.ca for r in ordered])),
            float(np.mean([r.asr for r in ordered])))
