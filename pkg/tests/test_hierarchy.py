import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsparse.events import LAYER, SENSOR, EventStream
from evsparse.hierarchy import (EmptyBranchError, LayerConfig, NetworkConfig, TrainedLayerPair,
                                TrainedNetwork, encode_layer, evolve_config, load_network,
                                merge_signed, run_network, save_network, subseed, train_network)
from evsparse.sparse import Dictionary, SparseParams, infer_coefficients, train_dictionary
from evsparse.surface import stream_surfaces

from oracles import layer_trace, merge_trace, unit_rows

EXACT = SparseParams(lam=0.0, sigma=1.0)
FAST = SparseParams(epochs_max=5, max_train_surfaces=400)


def sensor_stream(rng, n, w=8, h=6, t_max=2000):
    return EventStream(w, h, 2, SENSOR, rng.integers(0, w, n), rng.integers(0, h, n),
                       np.sort(rng.integers(0, t_max, n)), rng.choice([-1, 1], n))


def indicator(dim, index, sign=1.0):
    v = np.zeros(dim)
    v[index] = sign
    return v


# ---------------------------------------------------------------------------
# configuration

def test_evolve_identity_tau():
    cfg = evolve_config((10_000, 2, 6), (1, 1, 1), 3)
    assert [lc.tau for lc in cfg.layers] == [10_000, 10_000, 10_000]


def test_evolve_doubling_centers():
    cfg = evolve_config((10_000, 2, 8), (1, 1, 2), 3)
    assert [lc.n_atoms for lc in cfg.layers] == [8, 16, 32]


def test_evolve_rounding_and_validation():
    cfg = evolve_config((1000, 1, 3), (1.5, 1.5, 1.5), 4)
    assert [lc.radius for lc in cfg.layers] == [1, 2, 3, 5]
    assert [lc.n_atoms for lc in cfg.layers] == [3, 5, 8, 12]
    assert [lc.tau for lc in cfg.layers] == [1000, 1500, 2250, 3375]
    with pytest.raises(ValueError):
        evolve_config((1000, 1, 3), (0.5, 1, 1), 2)


def test_explicit_three_layer_configuration():
    cfg = NetworkConfig.explicit([10_000, 15_000, 20_000], 2, [6, 9, 12])
    assert [lc.n_atoms for lc in cfg.layers] == [6, 9, 12]
    assert [lc.radius for lc in cfg.layers] == [2, 2, 2]
    # unset alpha spans the consuming layer's window
    assert [lc.alpha for lc in cfg.layers] == [15_000, 20_000, 20_000]
    assert cfg.final_feature_count == 24
    assert [cfg.input_channels(i) for i in (1, 2, 3)] == [2, 6, 18]


@pytest.mark.parametrize("kw", [dict(tau=0, radius=1, n_atoms=1), dict(tau=1, radius=0, n_atoms=1),
                                dict(tau=1, radius=1, n_atoms=0),
                                dict(tau=1, radius=1, n_atoms=1, alpha=-1)])
def test_layer_config_validation(kw):
    with pytest.raises(ValueError):
        LayerConfig(**kw)


# ---------------------------------------------------------------------------
# encode_layer

def test_encode_hand_trace():
    # atoms: phi1 = -(ON plane, left neighbour), phi2 = OFF plane centre
    d = Dictionary([indicator(18, 9 + 3, -1.0), indicator(18, 4)], 2, 1)
    cfg = LayerConfig(tau=50, radius=1, n_atoms=2, alpha=40, sparse=EXACT)
    s = EventStream.from_events([(1, 1, 100, 1), (2, 1, 130, -1)], 4, 3, 2)
    pos, neg, stats = encode_layer(s, d, cfg)
    # a(e2, phi1) = -exp(-30/50): delay round(40 * (1 - 0.5488)) = 18
    assert list(pos) == [(2, 1, 130, 2), (1, 1, 140, 1), (1, 1, 140, 2)]
    assert list(neg) == [(2, 1, 148, 1)]
    assert (pos.channel_count, pos.semantics) == (2, LAYER)
    assert (stats.n_in, stats.n_pos, stats.n_neg) == (2, 3, 1)


def test_encode_amplification_and_endpoints():
    rng = np.random.default_rng(0)
    s = sensor_stream(rng, 300)
    d = Dictionary(unit_rows(rng.normal(size=(5, 18))), 2, 1)
    cfg = LayerConfig(tau=300, radius=1, n_atoms=5, alpha=100)
    pos, neg, _ = encode_layer(s, d, cfg)
    assert len(pos) + len(neg) == 5 * len(s)


def test_encode_zero_coefficient_routes_positive_with_full_delay():
    # atom orthogonal to every surface this stream can produce
    d = Dictionary([indicator(50, 0)], 2, 2)
    s = EventStream.from_events([(2, 2, 10, 1)], 5, 5, 2)
    pos, neg, _ = encode_layer(s, d, LayerConfig(tau=10, radius=2, n_atoms=1, alpha=77, sparse=EXACT))
    assert list(pos) == [(2, 2, 87, 1)] and len(neg) == 0


def test_encode_unit_coefficient_has_no_delay():
    d = Dictionary([indicator(18, 9 + 4)], 2, 1)
    s = EventStream.from_events([(2, 2, 10, 1)], 5, 5, 2)
    pos, _, _ = encode_layer(s, d, LayerConfig(tau=10, radius=1, n_atoms=1, alpha=500, sparse=EXACT))
    assert list(pos) == [(2, 2, 10, 1)]


def test_encode_dimension_mismatch():
    s = EventStream.from_events([(2, 2, 10, 1)], 5, 5, 2)
    with pytest.raises(ValueError, match="dimension"):
        encode_layer(s, Dictionary(np.ones((2, 18))), LayerConfig(tau=10, radius=2, n_atoms=2))


def test_delay_properties_large_random():
    """>= 10^4 random events; times spaced beyond alpha so outputs map back
    to their input event by timestamp alone."""
    rng = np.random.default_rng(7)
    n, alpha, gap = 12_000, 90.0, 100
    s = EventStream(16, 16, 2, SENSOR, rng.integers(0, 16, n), rng.integers(0, 16, n),
                    np.arange(n, dtype=np.int64) * gap, rng.choice([-1, 1], n))
    d = Dictionary(unit_rows(rng.normal(size=(4, 50))), 2, 2)
    cfg = LayerConfig(tau=5_000, radius=2, n_atoms=4, alpha=alpha)
    pos, neg, _ = encode_layer(s, d, cfg)
    a = infer_coefficients(stream_surfaces(s, 2, 5_000), d, cfg.sparse)
    seen = np.zeros((n, 4), dtype=int)
    for out, sign in ((pos, 1), (neg, -1)):
        assert np.all(np.diff(out.t) >= 0)
        src = out.t // gap
        assert np.all(out.t - s.t[src] >= 0) and np.all(out.t - s.t[src] <= alpha)
        assert np.array_equal(out.x, s.x[src]) and np.array_equal(out.y, s.y[src])
        assert out.p.min() >= 1 and out.p.max() <= 4
        coef = a[src, out.p - 1]
        assert np.all(coef >= 0) if sign > 0 else np.all(coef < 0)
        np.testing.assert_array_equal(out.t - s.t[src],
                                      np.floor(alpha * (1 - np.abs(coef)) + 0.5))
        np.add.at(seen, (src, out.p - 1), 1)
    assert (seen == 1).all()
    # stronger match never fires later
    delay = np.floor(alpha * (1 - np.abs(a)) + 0.5)
    order = np.argsort(-np.abs(a), axis=1, kind="stable")
    assert np.all(np.diff(np.take_along_axis(delay, order, axis=1), axis=1) >= 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 200), alpha=st.floats(0, 500))
def test_encode_properties_with_ties(seed, n, alpha):
    rng = np.random.default_rng(seed)
    s = sensor_stream(rng, n, t_max=50)
    d = Dictionary(unit_rows(rng.normal(size=(3, 18))), 2, 1)
    pos, neg, st_ = encode_layer(s, d, LayerConfig(tau=40, radius=1, n_atoms=3, alpha=alpha))
    assert len(pos) + len(neg) == 3 * n == st_.n_out
    for out in (pos, neg):
        assert np.all(np.diff(out.t) >= 0)
        if len(out):
            assert out.t.min() >= s.t.min() and out.t.max() <= s.t.max() + alpha


# ---------------------------------------------------------------------------
# merge

def layer_stream(events, c, w=6, h=6):
    return EventStream.from_events(events, w, h, c, LAYER)


def test_merge_with_empty_b():
    a = layer_stream([(0, 0, 5, 1), (1, 0, 9, 3)], 3)
    empty = layer_stream([], 3)
    pos, neg = merge_signed(a, empty, empty, empty, 3)
    assert pos.channel_count == 6 and list(pos) == list(a)
    assert len(neg) == 0


def test_merge_offset_rule():
    a = layer_stream([(0, 0, 7, 2)], 3)
    b = layer_stream([(1, 1, 4, 2)], 3)
    e = layer_stream([], 3)
    pos, _ = merge_signed(a, e, b, e, 3)
    assert list(pos) == [(1, 1, 4, 5), (0, 0, 7, 2)]


def test_merge_geometry_mismatch():
    a = layer_stream([], 2)
    with pytest.raises(ValueError, match="geometry"):
        merge_signed(a, a, layer_stream([], 2, w=7), a, 2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_merge_matches_concatenate_and_sort(seed):
    rng = np.random.default_rng(seed)

    def rand(k):
        return layer_stream(sorted(((int(rng.integers(6)), int(rng.integers(6)),
                                     int(rng.integers(0, 30)), int(rng.integers(1, 5)))
                                    for _ in range(k)), key=lambda e: e[2]), 4)
    parts = [rand(int(rng.integers(0, 20))) for _ in range(4)]
    pos, neg = merge_signed(*parts, 4)
    want_pos, want_neg = merge_trace(*(list(p) for p in parts), 4)
    assert list(pos) == want_pos and list(neg) == want_neg
    assert len(pos) == len(parts[0]) + len(parts[2])


# ---------------------------------------------------------------------------
# networks

@pytest.fixture(scope="module")
def streams():
    rng = np.random.default_rng(11)
    return [sensor_stream(rng, 60, t_max=5000) for _ in range(3)]


def test_depth_one_equals_plain_training(streams):
    cfg = NetworkConfig.explicit([500], 1, [3], sparse=FAST)
    net = train_network(streams, cfg, seed=4)
    assert len(net.layers) == 1 and net.layers[0].neg is None
    X = np.concatenate([stream_surfaces(s, 1, 500) for s in streams])
    d, _ = train_dictionary(X, 3, FAST, subseed(4, "layer-1"), 2, 1)
    assert net.layers[0].pos == d
    pos, neg, _ = run_network(streams[0], net)
    assert pos.channel_count == 3 and len(pos) + len(neg) == 3 * len(streams[0])


def test_three_layer_training_shapes_and_determinism(streams):
    cfg = NetworkConfig.explicit([500, 800, 1200], 1, [2, 3, 4], sparse=FAST)
    net = train_network(streams, cfg, seed=9)
    assert net.final_feature_count == 8
    assert net.layers[1].pos.dim == 2 * 9 and net.layers[2].pos.dim == 6 * 9
    assert net == train_network(streams, cfg, seed=9)
    pos, neg, stats = run_network(streams[0], net)
    assert pos.channel_count == neg.channel_count == 8
    assert len(pos) + len(neg) == len(streams[0]) * 2 * 3 * 4
    assert [sum(s.n_out for s in st) for st in stats] == [len(streams[0]) * k for k in (2, 6, 24)]


def test_six_nine_twelve_feature_count(streams):
    cfg = NetworkConfig.explicit([10_000, 15_000, 20_000], 2, [6, 9, 12],
                                 sparse=SparseParams(epochs_max=2, max_train_surfaces=200))
    net = train_network(streams[:1], cfg, seed=0)
    assert net.final_feature_count == 24
    pos, neg, _ = run_network(streams[0], net)
    assert len(pos) + len(neg) == len(streams[0]) * 6 * 9 * 12


def test_run_empty_stream(streams):
    cfg = NetworkConfig.explicit([500, 800], 1, [2, 3], sparse=FAST)
    net = train_network(streams, cfg, seed=1)
    pos, neg, stats = run_network(EventStream(8, 6, 2), net)
    assert len(pos) == len(neg) == 0
    assert all(s.n_out == 0 for st in stats for s in st)


def test_run_rejects_wrong_geometry(streams):
    net = train_network(streams, NetworkConfig.explicit([500], 1, [2], sparse=FAST), seed=1)
    with pytest.raises(ValueError, match="geometry"):
        run_network(EventStream(9, 6, 2), net)


def test_empty_branch_is_reported():
    # a single atom on two identical surfaces: every coefficient has one sign
    s = EventStream.from_events([(2, 2, 10, 1), (2, 2, 20, 1)], 5, 5, 2)
    cfg = NetworkConfig.explicit([100, 100], 1, [1, 1], sparse=SparseParams(epochs_max=1))
    with pytest.raises(EmptyBranchError) as exc:
        train_network([s], cfg, seed=0)
    assert exc.value.depth == 2 and exc.value.sign in ("pos", "neg")


def test_two_layer_hand_network_matches_trace():
    w, h = 5, 4
    l1 = [indicator(18, 9 + 3, -1.0), indicator(18, 4)]            # -ON left, OFF centre
    l2_pos = [indicator(18, 4), indicator(18, 9 + 5, -1.0)]        # ch1 centre, -(ch2 right)
    l2_neg = [indicator(18, 9 + 4, -1.0), indicator(18, 1)]        # -(ch2 centre), ch1 above
    cfg = NetworkConfig((LayerConfig(50, 1, 2, 40, EXACT), LayerConfig(60, 1, 2, 30, EXACT)))
    net = TrainedNetwork(cfg, [
        TrainedLayerPair(1, Dictionary(l1, 2, 1), None, EXACT),
        TrainedLayerPair(2, Dictionary(l2_pos, 2, 1), Dictionary(l2_neg, 2, 1), EXACT, EXACT),
    ], geometry=(w, h))
    events = [(1, 1, 100, 1), (2, 1, 130, -1), (2, 1, 131, 1), (3, 2, 150, -1)]
    s = EventStream.from_events(events, w, h, 2)
    leaf_pos, leaf_neg, _ = run_network(s, net)

    p1, n1 = layer_trace(events, 2, lambda p: (p + 1) // 2, l1, 50, 1, 40, w, h)
    pa, na = layer_trace(p1, 2, lambda p: p - 1, l2_pos, 60, 1, 30, w, h)
    pb, nb = layer_trace(n1, 2, lambda p: p - 1, l2_neg, 60, 1, 30, w, h)
    want_pos, want_neg = merge_trace(pa, na, pb, nb, 2)
    assert len(n1) > 0 and len(want_neg) > 0
    assert list(leaf_pos) == want_pos
    assert list(leaf_neg) == want_neg
    assert len(leaf_pos) + len(leaf_neg) == len(events) * 4


def test_network_save_load_round_trip(streams, tmp_path):
    cfg = NetworkConfig.explicit([500, 800], 1, [2, 3], sparse=FAST)
    net = train_network(streams, cfg, seed=2)
    save_network(net, tmp_path / "net")
    names = sorted(p.name for p in (tmp_path / "net").iterdir())
    assert names == ["L1.dict", "L2_neg.dict", "L2_pos.dict", "network.meta"]
    back = load_network(tmp_path / "net")
    assert back == net
    a, b = run_network(streams[1], net), run_network(streams[1], back)
    assert a[0] == b[0] and a[1] == b[1]
