"""Small trainable speaker-ID network with exact manual gradients.

1-D convolutions over log-mel frames, temporal mean+std pooling, linear
embedding, and either a plain softmax cross-entropy head or an additive
angular margin head. Channel masks implement pruning: a masked channel's
activations, pooled statistics, and gradients are exactly zero.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

STD_EPS = 1e-5       # under the sqrt in statistics pooling
COS_CLIP = 1e-7      # keeps arccos off the |cos| = 1 singularity


@dataclass(frozen=True)
class NetworkConfig:
    conv_layers: tuple[tuple[int, int, int, int], ...]  # (in, out, kernel, dilation)
    embedding_dim: int = 32
    n_classes: int = 10
    head: str = "softmax"          # "softmax" | "aam"
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    init_seed: int = 0

    def __post_init__(self):
        if len(self.conv_layers) < 2:
            raise ConfigError("need at least 2 conv layers")
        for i, (cin, cout, k, dil) in enumerate(self.conv_layers):
            if cout < 4 or cin < 1 or k < 1 or dil < 1:
                raise ConfigError(f"conv layer {i}: bad shape {(cin, cout, k, dil)}")
            if i > 0 and cin != self.conv_layers[i - 1][1]:
                raise ConfigError(f"conv layer {i}: in_channels mismatch")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.head not in ("softmax", "aam"):
            raise ConfigError(f"unknown head: {self.head}")
        if self.head == "aam" and (self.aam_margin < 0 or self.aam_scale <= 0):
            raise ConfigError("need aam_margin >= 0 and aam_scale > 0")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * d for _, _, k, d in self.conv_layers)


def default_network_config(n_mels: int = 80, n_classes: int = 10,
                           head: str = "softmax", init_seed: int = 0) -> NetworkConfig:
    return NetworkConfig(
        conv_layers=((n_mels, 32, 3, 1), (32, 32, 3, 1), (32, 32, 3, 1), (32, 32, 3, 1)),
        embedding_dim=32, n_classes=n_classes, head=head, init_seed=init_seed)


@dataclass
class ForwardTrace:
    """Per-layer arrays retained for backprop and activation statistics."""
    batch: int
    times: list[int]                 # frame count entering each layer
    cols: list[np.ndarray]           # im2col inputs, (K*I, B*Tout)
    pre_acts: list[np.ndarray]       # z before ReLU/mask, (O, B*Tout)
    post_acts: list[np.ndarray]      # after ReLU and mask
    mu: np.ndarray                   # (C, B) pooled mean (masked)
    std: np.ndarray                  # (C, B) pooled std before masking
    stats: np.ndarray                # (B, 2C)
    emb: np.ndarray                  # (B, E)
    head_cache: dict


class Network:
    """Parameter container; functional forward/backward live alongside."""

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.init_seed)
        self.conv_w: list[np.ndarray] = []
        self.conv_b: list[np.ndarray] = []
        self.masks: list[np.ndarray] = []
        for cin, cout, k, _ in cfg.conv_layers:
            bound = np.sqrt(6.0 / (cin * k + cout * k))
            self.conv_w.append(rng.uniform(-bound, bound, (cout, cin, k)).astype(self.dtype))
            self.conv_b.append(np.zeros(cout, dtype=self.dtype))
            self.masks.append(np.ones(cout, dtype=self.dtype))
        c_last = cfg.conv_layers[-1][1]
        bound = np.sqrt(6.0 / (2 * c_last + cfg.embedding_dim))
        self.emb_w = rng.uniform(-bound, bound, (cfg.embedding_dim, 2 * c_last)).astype(self.dtype)
        self.emb_b = np.zeros(cfg.embedding_dim, dtype=self.dtype)
        bound = np.sqrt(6.0 / (cfg.embedding_dim + cfg.n_classes))
        self.head_w = rng.uniform(-bound, bound, (cfg.n_classes, cfg.embedding_dim)).astype(self.dtype)
        self.head_b = np.zeros(cfg.n_classes, dtype=self.dtype)

    # -- parameter plumbing -------------------------------------------------
    def param_items(self):
        for i in range(len(self.conv_w)):
            yield f"conv_w{i}", self.conv_w[i]
            yield f"conv_b{i}", self.conv_b[i]
        yield "emb_w", self.emb_w
        yield "emb_b", self.emb_b
        yield "head_w", self.head_w
        if self.cfg.head == "softmax":
            yield "head_b", self.head_b

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name.startswith("conv_w"):
            self.conv_w[int(name[6:])] = value
        elif name.startswith("conv_b"):
            self.conv_b[int(name[6:])] = value
        else:
            setattr(self, name, value)

    def copy(self) -> "Network":
        out = Network.__new__(Network)
        out.cfg = self.cfg
        out.dtype = self.dtype
        out.conv_w = [w.copy() for w in self.conv_w]
        out.conv_b = [b.copy() for b in self.conv_b]
        out.masks = [m.copy() for m in self.masks]
        out.emb_w = self.emb_w.copy()
        out.emb_b = self.emb_b.copy()
        out.head_w = self.head_w.copy()
        out.head_b = self.head_b.copy()
        return out

    def astype(self, dtype) -> "Network":
        out = self.copy()
        out.dtype = np.dtype(dtype)
        out.conv_w = [w.astype(dtype) for w in out.conv_w]
        out.conv_b = [b.astype(dtype) for b in out.conv_b]
        out.masks = [m.astype(dtype) for m in out.masks]
        out.emb_w = out.emb_w.astype(dtype)
        out.emb_b = out.emb_b.astype(dtype)
        out.head_w = out.head_w.astype(dtype)
        out.head_b = out.head_b.astype(dtype)
        return out

    def n_params(self) -> int:
        return sum(v.size for _, v in self.param_items())

    def logits(self, feature_matrix) -> np.ndarray:
        """Evaluation logits (no margin) for one (frames, n_mels) input."""
        x = _as_batch(feature_matrix, self.cfg)
        out, _ = forward_batch(self, x)
        return out[0]


def _as_batch(fm, cfg: NetworkConfig) -> np.ndarray:
    vals = getattr(fm, "values", fm)
    vals = np.asarray(vals)
    if vals.ndim == 2:     # (frames, n_mels) -> (1, n_mels, frames)
        vals = vals.T[None, :, :]
    if vals.shape[1] != cfg.conv_layers[0][0]:
        raise DataError(f"input has {vals.shape[1]} channels, "
                        f"first layer expects {cfg.conv_layers[0][0]}")
    return vals


def _im2col(h: np.ndarray, k: int, dil: int) -> tuple[np.ndarray, int]:
    # h: (I, B, T) -> (k*I, B*Tout), kernel-position-major blocks
    i_ch, b, t = h.shape
    t_out = t - (k - 1) * dil
    cols = np.empty((k * i_ch, b * t_out), dtype=h.dtype)
    for j in range(k):
        cols[j * i_ch:(j + 1) * i_ch] = h[:, :, j * dil:j * dil + t_out].reshape(i_ch, -1)
    return cols, t_out


def _w_flat(w: np.ndarray) -> np.ndarray:
    o, i, k = w.shape
    return w.transpose(0, 2, 1).reshape(o, k * i)


def forward_batch(net: Network, x: np.ndarray, true_class: np.ndarray | None = None
                  ) -> tuple[np.ndarray, ForwardTrace]:
    """Forward pass over a batch (B, n_mels, T); margin applied only when
    true_class is given and the head is angular."""
    cfg = net.cfg
    if x.shape[2] < cfg.receptive_field:
        raise DataError(f"need >= {cfg.receptive_field} frames, got {x.shape[2]}")
    b = x.shape[0]
    h = np.ascontiguousarray(x.transpose(1, 0, 2), dtype=net.dtype)  # (C, B, T)

    times, cols_l, pre_l, post_l = [], [], [], []
    t_cur = x.shape[2]
    for w, bias, mask, (_, _, k, dil) in zip(net.conv_w, net.conv_b, net.masks, cfg.conv_layers):
        times.append(t_cur)
        cols, t_cur = _im2col(h, k, dil)
        z = _w_flat(w) @ cols + bias[:, None]
        a = np.maximum(z, 0) * mask[:, None]
        cols_l.append(cols)
        pre_l.append(z)
        post_l.append(a)
        h = a.reshape(-1, b, t_cur)

    mask_last = net.masks[-1][:, None]
    mu = h.mean(axis=2)                                    # (C, B)
    var = np.mean((h - mu[:, :, None]) ** 2, axis=2)
    std = np.sqrt(var + np.asarray(STD_EPS, dtype=net.dtype))
    stats = np.concatenate([mu * mask_last, std * mask_last], axis=0).T  # (B, 2C)

    emb = stats @ net.emb_w.T + net.emb_b                  # (B, E)

    head_cache: dict = {"kind": cfg.head}
    if cfg.head == "softmax":
        logits = emb @ net.head_w.T + net.head_b
    else:
        logits, head_cache = _aam_forward(net, emb, true_class)
    trace = ForwardTrace(b, times, cols_l, pre_l, post_l, mu, std, stats, emb, head_cache)
    return logits, trace


def _aam_forward(net: Network, emb: np.ndarray, true_class: np.ndarray | None):
    m, s = net.cfg.aam_margin, net.cfg.aam_scale
    e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    w_norm = np.linalg.norm(net.head_w, axis=1, keepdims=True)
    if np.any(e_norm == 0) or np.any(w_norm == 0):
        raise DataError("zero-norm embedding or class weight in angular head")
    en = emb / e_norm
    wn = net.head_w / w_norm
    cos = np.clip(en @ wn.T, -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    cache = {"kind": "aam", "en": en, "wn": wn, "cos": cos,
             "e_norm": e_norm, "w_norm": w_norm, "true": true_class}
    adj = cos.copy()
    if true_class is not None and m > 0.0:
        rows = np.arange(len(emb))
        theta = np.arccos(cos[rows, true_class])
        adj[rows, true_class] = np.cos(theta + m)
    return (s * adj).astype(net.dtype), cache


def aam_logits(embedding: np.ndarray, class_weights: np.ndarray,
               margin: float, scale: float, true_class: int | None) -> np.ndarray:
    """Standalone angular-margin logits for one embedding vector."""
    if margin < 0 or scale <= 0:
        raise ConfigError("need margin >= 0 and scale > 0")
    e_norm = np.linalg.norm(embedding)
    w_norm = np.linalg.norm(class_weights, axis=1)
    if e_norm == 0 or np.any(w_norm == 0):
        raise DataError("zero-norm embedding or class weight")
    cos = np.clip((class_weights @ embedding) / (w_norm * e_norm),
                  -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    if true_class is not None and margin > 0:
        cos = cos.copy()
        cos[true_class] = np.cos(np.arccos(cos[true_class]) + margin)
    return scale * cos


def cross_entropy(logits: np.ndarray, true_class: int) -> tuple[float, np.ndarray]:
    """Loss -log softmax(logits)[true] and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    sum_exp = np.exp(z).sum()
    loss = np.log(sum_exp) - z[true_class]
    grad = np.exp(z) / sum_exp
    grad[true_class] -= 1.0
    return float(loss), grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch; gradient already divided by batch size."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    exp_z = np.exp(z)
    sum_exp = exp_z.sum(axis=1, keepdims=True)
    b = len(labels)
    rows = np.arange(b)
    loss = float(np.mean(np.log(sum_exp[:, 0]) - z[rows, labels]))
    grad = exp_z / sum_exp
    grad[rows, labels] -= 1.0
    return loss, (grad / b).astype(logits.dtype)


def backward_batch(net: Network, trace: ForwardTrace, dlogits: np.ndarray) -> dict:
    """Exact gradients of the (already reduced) loss w.r.t. every parameter."""
    cfg = net.cfg
    b = trace.batch
    grads: dict[str, np.ndarray] = {}

    if cfg.head == "softmax":
        grads["head_w"] = dlogits.T @ trace.emb
        grads["head_b"] = dlogits.sum(axis=0)
        demb = dlogits @ net.head_w
    else:
        demb, dhead_w = _aam_backward(net, trace.head_cache, dlogits)
        grads["head_w"] = dhead_w

    grads["emb_w"] = demb.T @ trace.stats
    grads["emb_b"] = demb.sum(axis=0)
    dstats = demb @ net.emb_w                       # (B, 2C)

    c_last = cfg.conv_layers[-1][1]
    mask_last = net.masks[-1][:, None]
    dmu = dstats[:, :c_last].T * mask_last          # (C, B)
    dstd = dstats[:, c_last:].T * mask_last
    h_last = trace.post_acts[-1].reshape(c_last, b, -1)
    t_last = h_last.shape[2]
    dvar = dstd * (0.5 / trace.std)
    dh = (dmu[:, :, None] + dvar[:, :, None] * 2.0 * (h_last - trace.mu[:, :, None])) / t_last
    da = dh.reshape(c_last, -1)

    for i in range(len(cfg.conv_layers) - 1, -1, -1):
        _, _, k, dil = cfg.conv_layers[i]
        dz = da * (trace.pre_acts[i] > 0) * net.masks[i][:, None]
        grads[f"conv_b{i}"] = dz.sum(axis=1)
        o, cin, _ = net.conv_w[i].shape
        dwf = dz @ trace.cols[i].T                   # (O, K*I)
        grads[f"conv_w{i}"] = dwf.reshape(o, k, cin).transpose(0, 2, 1)
        if i > 0:
            dcols = _w_flat(net.conv_w[i]).T @ dz    # (K*I, B*Tout)
            t_in = trace.times[i]
            t_out = t_in - (k - 1) * dil
            dh_prev = np.zeros((cin, b, t_in), dtype=net.dtype)
            d3 = dcols.reshape(k, cin, b, t_out)
            for j in range(k):
                dh_prev[:, :, j * dil:j * dil + t_out] += d3[j]
            da = dh_prev.reshape(cin, -1)
    return grads


def _aam_backward(net: Network, cache: dict, dlogits: np.ndarray):
    m, s = net.cfg.aam_margin, net.cfg.aam_scale
    en, wn, cos = cache["en"], cache["wn"], cache["cos"]
    true = cache["true"]
    dcos = s * dlogits.astype(np.float64)
    if true is not None and m > 0:
        rows = np.arange(len(en))
        c = cos[rows, true]
        sin_theta = np.sqrt(1.0 - c ** 2)
        dcos[rows, true] *= np.sin(np.arccos(c) + m) / sin_theta
    den = dcos @ wn
    dwn = dcos.T @ en
    demb = (den - np.sum(den * en, axis=1, keepdims=True) * en) / cache["e_norm"]
    dhead_w = (dwn - np.sum(dwn * wn, axis=1, keepdims=True) * wn) / cache["w_norm"]
    return demb.astype(net.dtype), dhead_w.astype(net.dtype)


def forward(net: Network, x, true_class: int | None = None):
    """Single-input forward: (frames, n_mels) -> (logits vector, trace)."""
    xb = _as_batch(x, net.cfg)
    tc = None if true_class is None else np.array([true_class])
    logits, trace = forward_batch(net, xb, tc)
    return logits[0], trace


def backward(net: Network, trace: ForwardTrace, loss_grad: np.ndarray) -> dict:
    """Single-input backward matching forward()."""
    return backward_batch(net, trace, np.asarray(loss_grad)[None, :])


def batch_loss(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    tc = labels if net.cfg.head == "aam" else None
    logits, trace = forward_batch(net, x, tc)
    loss, dlogits = cross_entropy_batch(logits, labels)
    return loss, backward_batch(net, trace, dlogits)


def grad_check(net: Network, x: np.ndarray, labels: np.ndarray,
               epsilon: float = 1e-4) -> dict:
    """Central-difference check of every parameter gradient.

    Returns {"max_rel_error", "worst_param"}; runs in float64 regardless of
    the network's compute dtype. Intended for tiny configs (<= ~2k params).
    """
    net64 = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)

    def loss_only() -> float:
        tc = labels if net64.cfg.head == "aam" else None
        logits, _ = forward_batch(net64, x, tc)
        loss, _ = cross_entropy_batch(logits, labels)
        return loss

    _, grads = batch_loss(net64, x, labels)
    worst, worst_name = 0.0, ""
    for name, arr in net64.param_items():
        g = grads[name]
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss_only()
            flat[idx] = orig - epsilon
            down = loss_only()
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = g.reshape(-1)[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{idx}]"
    return {"max_rel_error": float(worst), "worst_param": worst_name}


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path) -> None:
    arrays = {name: arr for name, arr in net.param_items()}
    arrays["head_b"] = net.head_b
    for i, mask in enumerate(net.masks):
        arrays[f"mask{i}"] = mask
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "dtype": net.dtype.name,
        "config": {
            "conv_layers": [list(l) for l in net.cfg.conv_layers],
            "embedding_dim": net.cfg.embedding_dim,
            "n_classes": net.cfg.n_classes,
            "head": net.cfg.head,
            "aam_margin": net.cfg.aam_margin,
            "aam_scale": net.cfg.aam_scale,
            "init_seed": net.cfg.init_seed,
        },
    })
    arrays["header"] = np.frombuffer(header.encode(), dtype=np.uint8)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Network:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header['version']}")
        c = header["config"]
        cfg = NetworkConfig(conv_layers=tuple(tuple(l) for l in c["conv_layers"]),
                            embedding_dim=c["embedding_dim"], n_classes=c["n_classes"],
                            head=c["head"], aam_margin=c["aam_margin"],
                            aam_scale=c["aam_scale"], init_seed=c["init_seed"])
        net = Network(cfg, dtype=np.dtype(header["dtype"]))
        for name, _ in list(net.param_items()):
            net.set_param(name, data[name].copy())
        net.head_b = data["head_b"].copy()
        net.masks = [data[f"mask{i}"].copy() for i in range(len(cfg.conv_layers))]
    return net
