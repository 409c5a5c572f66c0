import numpy as np
import pytest

from emotrig.errors import ConfigError
from emotrig.nnet import Network, NetworkConfig, forward_batch
from emotrig.prune import (
    FINAL_ONLY,
    PruneConfig,
    layer_mean_abs_activation,
    prune,
    rank_channels,
    select_layers,
    sweep_grid,
)

CFG = NetworkConfig(conv_layers=((6, 8, 3, 1), (8, 8, 3, 1), (8, 8, 3, 1), (8, 8, 3, 1)),
                    embedding_dim=6, n_classes=4, init_seed=21)


def feats(n=6, frames=20, seed=0, channels=6):
    rng = np.random.default_rng(seed)
    return rng.uniform(-2, 2, (n, channels, frames))


def fake_net(n_layers):
    layers = tuple((6 if i == 0 else 8, 8, 3, 1) for i in range(n_layers))
    if n_layers < 2:
        layers = ((6, 8, 3, 1),) * 1
        cfg = NetworkConfig.__new__(NetworkConfig)   # bypass >=2 check for law test
        object.__setattr__(cfg, "conv_layers", layers)
        object.__setattr__(cfg, "embedding_dim", 6)
        object.__setattr__(cfg, "n_classes", 4)
        object.__setattr__(cfg, "head", "softmax")
        object.__setattr__(cfg, "aam_margin", 0.2)
        object.__setattr__(cfg, "aam_scale", 30.0)
        object.__setattr__(cfg, "init_seed", 0)
        net = Network.__new__(Network)
        net.cfg = cfg
        return net
    return Network(NetworkConfig(conv_layers=layers, embedding_dim=6, n_classes=4))


def test_select_layers_rate():
    net = fake_net(10)
    assert select_layers(net, 0.3) == [7, 8, 9]


def test_select_layers_final_only():
    net = fake_net(4)
    assert select_layers(net, FINAL_ONLY) == [3]


def test_select_layers_small_net_degeneracy():
    net = fake_net(4)
    assert select_layers(net, 0.4) == select_layers(net, 0.5) == [2, 3]


def test_select_layers_ceiling_law():
    for n_layers in range(1, 9):
        net = fake_net(n_layers)
        for r in (0.1, 0.2, 0.3, 0.4, 0.5):
            expect = max(1, min(n_layers, int(np.ceil(r * n_layers))))
            got = select_layers(net, r)
            assert len(got) == expect
            assert got == list(range(n_layers - expect, n_layers))


def test_rank_zero_weight_channel_first():
    net = Network(CFG, dtype=np.float64)
    net.conv_w[0][3] = 0.0
    net.conv_b[0][3] = 0.0
    order = rank_channels(net, 0, feats(seed=1))
    assert order[0] == 3


def test_rank_matches_hand_sorted_means():
    net = Network(CFG, dtype=np.float64)
    means = layer_mean_abs_activation(net, feats(seed=2))[1]
    order = rank_channels(net, 1, feats(seed=2))
    assert np.array_equal(order, np.argsort(means, kind="stable"))
    # the spec's worked ordering on fixed means
    sample = np.array([0.1, 0.5, 0.3, 0.01])
    assert list(np.argsort(sample, kind="stable")) == [3, 0, 2, 1]


def test_rank_ties_break_low_index_first():
    net = Network(CFG, dtype=np.float64)
    for c in (2, 5):
        net.conv_w[0][c] = 0.0
        net.conv_b[0][c] = 0.0
    order = rank_channels(net, 0, feats(seed=3))
    assert list(order[:2]) == [2, 5]


def test_rank_scale_invariance_zero_bias():
    net = Network(CFG, dtype=np.float64)
    for b in net.conv_b:
        b[:] = 0.0
    x = feats(seed=4)
    a = rank_channels(net, 2, x)
    b = rank_channels(net, 2, 2.0 * x)
    assert np.array_equal(a, b)


def test_prune_rate_zero_bit_identity():
    net = Network(CFG, dtype=np.float64)
    x = feats(seed=5)
    pruned, report = prune(net, PruneConfig(0.0, FINAL_ONLY), x)
    la, _ = forward_batch(net, x)
    lb, _ = forward_batch(pruned, x)
    assert np.array_equal(la, lb)
    assert report.pruned == {3: []}


def test_prune_counts_and_original_untouched():
    net = Network(CFG, dtype=np.float64)
    x = feats(seed=6)
    pruned, report = prune(net, PruneConfig(0.5, FINAL_ONLY), x)
    assert len(report.pruned[3]) == 4            # floor(0.5 * 8)
    assert np.sum(pruned.masks[3] == 0) == 4
    assert np.all(net.masks[3] == 1)             # input network unmodified


def test_prune_masked_channels_silent():
    net = Network(CFG, dtype=np.float64)
    x = feats(seed=7)
    pruned, report = prune(net, PruneConfig(0.4, 0.5), x)
    for s in range(0, len(x), 4):
        _, trace = forward_batch(pruned, x[s:s + 4])
        for li, victims in report.pruned.items():
            act = trace.post_acts[li]
            for c in victims:
                assert np.all(act[c] == 0.0)


def test_prune_rejects_full_rate():
    net = Network(CFG)
    with pytest.raises(ConfigError):
        prune(net, PruneConfig(1.0, FINAL_ONLY), feats())


def test_prune_mask_monotonicity():
    net = Network(CFG, dtype=np.float64)
    x = feats(seed=8)
    previous: set = set()
    for rate in [0.1 * i for i in range(1, 10)]:
        pruned, report = prune(net, PruneConfig(round(rate, 1), 0.5), x)
        current = {(li, c) for li, cs in report.pruned.items() for c in cs}
        assert previous <= current
        previous = current


def test_sweep_grid_shape():
    grid = sweep_grid()
    assert len(grid) == 9 * 6
    assert (FINAL_ONLY, 0.1) in grid
    assert (0.5, 0.9) in grid
