"""Multi-layer network of sparse-coding layers.

Each layer turns every input event into one output event per atom, at the
same pixel, delayed by ``alpha * (1 - |a_j|)`` and labelled with the atom
index ``j``. Events from non-negative coefficients feed the positive
branch and the rest the negative one. From depth 2 on, every depth holds two
sub-layers (one per branch); their four outputs are merged by sign, with
the negative sub-layer's channels shifted by ``N``, to form the next
depth's branch inputs.
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import __version__
from .events import LAYER, SENSOR, EventStream
from .sparse import Dictionary, SparseParams, TrainingReport, infer_coefficients, train_dictionary
from .surface import iter_surfaces, stream_surfaces


class EmptyBranchError(RuntimeError):
    def __init__(self, depth: int, sign: str):
        super().__init__(f"depth {depth} branch '{sign}' received no events; cannot train")
        self.depth = depth
        self.sign = sign


def subseed(seed: int, name: str) -> int:
    """Stable named child seed, so partial reruns keep their randomness."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class LayerConfig:
    tau: float          # decay constant, microseconds
    radius: int
    n_atoms: int
    alpha: float | None = None  # delay scale in microseconds; None: resolved by NetworkConfig
    sparse: SparseParams = field(default_factory=SparseParams)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.radius < 1 or self.n_atoms < 1:
            raise ValueError("radius and n_atoms must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class NetworkConfig:
    """Per-layer settings; ``alpha`` left unset takes the next layer's tau
    (the last layer uses its own)."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        resolved = []
        for i, lc in enumerate(layers):
            if lc.alpha is None:
                nxt = layers[i + 1] if i + 1 < len(layers) else lc
                lc = replace(lc, alpha=float(nxt.tau))
            resolved.append(lc)
        object.__setattr__(self, "layers", tuple(resolved))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @classmethod
    def explicit(cls, taus: Sequence[float], radii, n_atoms: Sequence[int],
                 alphas=None, sparse: SparseParams | None = None) -> "NetworkConfig":
        L = len(n_atoms)
        radii = [radii] * L if np.isscalar(radii) else list(radii)
        alphas = [None] * L if alphas is None else list(alphas)
        if not len(taus) == len(radii) == len(alphas) == L:
            raise ValueError("per-layer lists differ in length")
        sparse = sparse or SparseParams()
        return cls(tuple(LayerConfig(float(t), int(r), int(n), a, sparse)
                         for t, r, n, a in zip(taus, radii, n_atoms, alphas)))

    def input_channels(self, depth: int) -> int:
        """Channel count of the streams entering 1-based ``depth``."""
        if depth == 1:
            return 2
        if depth == 2:
            return self.layers[0].n_atoms
        return 2 * self.layers[depth - 2].n_atoms

    @property
    def final_feature_count(self) -> int:
        n = self.layers[-1].n_atoms
        return n if self.depth == 1 else 2 * n


def evolve_config(init: tuple[float, int, int], factors: tuple[float, float, float],
                  depth: int, sparse: SparseParams | None = None) -> NetworkConfig:
    """Geometric growth ``tau *= K_tau``, ``R = round(K_R R)``, ``N = round(K_N N)``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if min(factors) < 1:
        raise ValueError("evolution factors must be >= 1")
    tau, r, n = float(init[0]), int(init[1]), int(init[2])
    k_tau, k_r, k_n = factors
    taus, radii, ns = [], [], []
    for _ in range(depth):
        taus.append(tau)
        radii.append(r)
        ns.append(n)
        tau = k_tau * tau
        r = max(1, int(_round_half_up(k_r * r)))
        n = max(1, int(_round_half_up(k_n * n)))
    return NetworkConfig.explicit(taus, radii, ns, sparse=sparse)


# ---------------------------------------------------------------------------
# encoding

@dataclass
class LayerStats:
    n_in: int = 0
    n_pos: int = 0
    n_neg: int = 0
    coef_hist: np.ndarray = field(default_factory=lambda: np.zeros(20, np.int64))

    @property
    def n_out(self) -> int:
        return self.n_pos + self.n_neg

    def __iadd__(self, other: "LayerStats") -> "LayerStats":
        self.n_in += other.n_in
        self.n_pos += other.n_pos
        self.n_neg += other.n_neg
        self.coef_hist = self.coef_hist + other.coef_hist
        return self


HIST_EDGES = np.linspace(-1.0, 1.0, 21)


def encode_layer(stream: EventStream, d: Dictionary, cfg: LayerConfig,
                 params: SparseParams | None = None):
    """Project every event's surface on ``d`` and emit the delayed events.

    Returns ``(pos, neg, stats)``; both streams are sorted by output time,
    then input order, then atom index.
    """
    params = params or cfg.sparse
    n = d.n_atoms
    expected = stream.channel_count * (2 * cfg.radius + 1) ** 2
    if d.dim != expected:
        raise ValueError(f"dictionary dimension {d.dim} does not match input "
                         f"({stream.channel_count} channels, R={cfg.radius}: {expected})")
    alpha = float(cfg.alpha if cfg.alpha is not None else cfg.tau)
    m = len(stream)
    coefs = np.empty((m, n))
    for idx, surf in iter_surfaces(stream, cfg.radius, cfg.tau):
        coefs[idx] = infer_coefficients(surf, d, params)

    # capped so a fractional alpha never rounds past t_in + alpha
    delay = np.minimum(_round_half_up(alpha * (1.0 - np.abs(coefs))), int(np.floor(alpha)))
    t_out = stream.t[:, None] + delay
    t_flat = t_out.ravel()
    x_flat = np.repeat(stream.x, n)
    y_flat = np.repeat(stream.y, n)
    p_flat = np.tile(np.arange(1, n + 1, dtype=np.int32), m)
    positive = (coefs >= 0.0).ravel()

    def branch(mask):
        sel = np.flatnonzero(mask)
        order = sel[np.argsort(t_flat[sel], kind="stable")]
        return EventStream(stream.width, stream.height, n, LAYER,
                           x_flat[order], y_flat[order], t_flat[order], p_flat[order])

    pos, neg = branch(positive), branch(~positive)
    stats = LayerStats(m, len(pos), len(neg),
                       np.histogram(coefs, bins=HIST_EDGES)[0].astype(np.int64))
    return pos, neg, stats


def _time_merge(a: EventStream, b: EventStream, offset: int, channel_count: int) -> EventStream:
    t = np.concatenate([a.t, b.t])
    order = np.argsort(t, kind="stable")
    return EventStream(
        a.width, a.height, channel_count, LAYER,
        np.concatenate([a.x, b.x])[order], np.concatenate([a.y, b.y])[order],
        t[order], np.concatenate([a.p, b.p + offset])[order])


def merge_signed(pos_a: EventStream, neg_a: EventStream, pos_b: EventStream,
                 neg_b: EventStream, n: int):
    """Merge the outputs of sub-layers A (+) and B (-) of one depth by sign.

    B's channels move to ``n+1..2n``; at equal timestamps A's events come
    first.
    """
    geoms = {s.geometry for s in (pos_a, neg_a, pos_b, neg_b)}
    if len(geoms) != 1:
        raise ValueError(f"geometry mismatch: {sorted(geoms)}")
    return (_time_merge(pos_a, pos_b, n, 2 * n),
            _time_merge(neg_a, neg_b, n, 2 * n))


# ---------------------------------------------------------------------------
# training and running

@dataclass(frozen=True, eq=False)
class TrainedLayerPair:
    """Sub-layers of one depth; depth 1 has only ``pos``."""

    depth: int
    pos: Dictionary
    neg: Dictionary | None = None
    pos_params: SparseParams = field(default_factory=SparseParams)
    neg_params: SparseParams | None = None

    def __post_init__(self):
        if self.neg is not None and self.neg.atoms.shape != self.pos.atoms.shape:
            raise ValueError("sub-layer dictionaries differ in shape")


@dataclass(eq=False)
class TrainedNetwork:
    config: NetworkConfig
    layers: list
    seed: int = 0
    geometry: tuple = (0, 0)
    reports: dict = field(default_factory=dict)

    @property
    def final_feature_count(self) -> int:
        return self.config.final_feature_count

    def __eq__(self, other):
        if not isinstance(other, TrainedNetwork):
            return NotImplemented
        return (self.config == other.config and self.seed == other.seed
                and tuple(self.geometry) == tuple(other.geometry)
                and len(self.layers) == len(other.layers)
                and all(a.pos == b.pos and a.neg == b.neg and a.pos_params == b.pos_params
                        and a.neg_params == b.neg_params
                        for a, b in zip(self.layers, other.layers)))

    __hash__ = None


def _collect(streams: list, cfg: LayerConfig, rng_seed: int) -> np.ndarray:
    """Surfaces of every event of ``streams``, optionally subsampled."""
    counts = np.array([len(s) for s in streams])
    total = int(counts.sum())
    cap = cfg.sparse.max_train_surfaces
    if cap is not None and total > cap:
        chosen = np.zeros(total, dtype=bool)
        chosen[np.random.default_rng(rng_seed).choice(total, cap, replace=False)] = True
    else:
        chosen = np.ones(total, dtype=bool)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    parts = [stream_surfaces(s, cfg.radius, cfg.tau, chosen[bounds[i]:bounds[i + 1]])
             for i, s in enumerate(streams)]
    return np.concatenate(parts)


def _train_branch(streams, cfg, channels, depth, sign, seed):
    name = f"layer-{depth}" if sign is None else f"layer-{depth}-{sign}"
    if sum(len(s) for s in streams) == 0:
        raise EmptyBranchError(depth, sign or "+")
    X = _collect(streams, cfg, subseed(seed, name + "-sample"))
    d, report = train_dictionary(X, cfg.n_atoms, cfg.sparse, subseed(seed, name),
                                 channel_count=channels, radius=cfg.radius)
    return d, report


def _step(pair: TrainedLayerPair, cfg: LayerConfig, pos: EventStream, neg: EventStream | None):
    """Encode one depth; depth 1 takes the raw stream in ``pos``."""
    if pair.neg is None:
        p, n, st = encode_layer(pos, pair.pos, cfg, pair.pos_params)
        return p, n, [st]
    pa, na, sa = encode_layer(pos, pair.pos, cfg, pair.pos_params)
    pb, nb, sb = encode_layer(neg, pair.neg, cfg, pair.neg_params)
    p, n = merge_signed(pa, na, pb, nb, cfg.n_atoms)
    return p, n, [sa, sb]


def train_network(streams: Sequence[EventStream], config: NetworkConfig,
                  seed: int = 0) -> TrainedNetwork:
    """Train depths one after the other on the outputs of the trained prefix."""
    streams = list(streams)
    if not streams:
        raise ValueError("no training streams")
    geoms = {s.geometry for s in streams}
    if len(geoms) != 1:
        raise ValueError(f"training streams differ in geometry: {sorted(geoms)}")
    net = TrainedNetwork(config, [], seed, geoms.pop())
    cfg1 = config.layers[0]
    d, rep = _train_branch(streams, cfg1, 2, 1, None, seed)
    net.layers.append(TrainedLayerPair(1, d, None, rep.params, None))
    net.reports[(1, "+")] = rep
    inputs = [_step(net.layers[0], cfg1, s, None)[:2] for s in streams]
    for depth in range(2, config.depth + 1):
        cfg = config.layers[depth - 1]
        ch = config.input_channels(depth)
        dp, rp = _train_branch([p for p, _ in inputs], cfg, ch, depth, "pos", seed)
        dn, rn = _train_branch([n for _, n in inputs], cfg, ch, depth, "neg", seed)
        pair = TrainedLayerPair(depth, dp, dn, rp.params, rn.params)
        net.layers.append(pair)
        net.reports[(depth, "+")] = rp
        net.reports[(depth, "-")] = rn
        if depth < config.depth:
            inputs = [_step(pair, cfg, p, n)[:2] for p, n in inputs]
    return net


def run_network(stream: EventStream, net: TrainedNetwork):
    """Encode ``stream`` through every depth.

    Returns ``(leaf_pos, leaf_neg, stats)`` where ``stats[i]`` lists the
    :class:`LayerStats` of the sub-layers at depth ``i+1``.
    """
    if net.geometry and tuple(net.geometry) != stream.geometry:
        raise ValueError(f"stream geometry {stream.geometry} != network {tuple(net.geometry)}")
    if stream.semantics != SENSOR:
        raise ValueError("network input must be a sensor stream")
    pos, neg = stream, None
    stats = []
    for pair, cfg in zip(net.layers, net.config.layers):
        pos, neg, st = _step(pair, cfg, pos, neg)
        stats.append(st)
    return pos, neg, stats


# ---------------------------------------------------------------------------
# persistence

_SPARSE_KEYS = ("lam", "sigma", "eta", "eps_smooth", "max_cg_iters", "cg_tol",
                "epochs_max", "epoch_tol", "max_train_surfaces")


def _fmt(v) -> str:
    if v is None:
        return "none"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _sparse_lines(prefix: str, p: SparseParams) -> list:
    return [f"{prefix}.{k}={_fmt(getattr(p, k))}" for k in _SPARSE_KEYS]


def _sparse_from(meta: dict, prefix: str) -> SparseParams:
    kw = {}
    for k in _SPARSE_KEYS:
        raw = meta[f"{prefix}.{k}"]
        if raw == "none":
            kw[k] = None
        elif k in ("max_cg_iters", "epochs_max", "max_train_surfaces"):
            kw[k] = int(raw)
        else:
            kw[k] = float(raw)
    return SparseParams(**kw)


def dict_filename(depth: int, sign: str | None) -> str:
    return f"L{depth}.dict" if sign is None else f"L{depth}_{sign}.dict"


def meta_text(net: TrainedNetwork) -> str:
    lines = ["# network v1", f"version={__version__}", f"seed={net.seed}",
             f"depth={net.config.depth}",
             f"geometry={net.geometry[0]}x{net.geometry[1]}",
             "sensor_channels=2 (p=-1 -> 1, p=+1 -> 2)",
             "layer_channels=1..N per sub-layer; merged negative sub-layer shifted by N",
             f"final_features={net.final_feature_count}"]
    for i, (cfg, pair) in enumerate(zip(net.config.layers, net.layers), 1):
        lines += [f"layer.{i}.tau={_fmt(float(cfg.tau))}",
                  f"layer.{i}.radius={cfg.radius}",
                  f"layer.{i}.n_atoms={cfg.n_atoms}",
                  f"layer.{i}.alpha={_fmt(float(cfg.alpha))}",
                  f"layer.{i}.input_channels={net.config.input_channels(i)}"]
        lines += _sparse_lines(f"layer.{i}.config", cfg.sparse)
        lines += _sparse_lines(f"layer.{i}.pos", pair.pos_params)
        if pair.neg is not None:
            lines += _sparse_lines(f"layer.{i}.neg", pair.neg_params)
    return "\n".join(lines) + "\n"


def save_network(net: TrainedNetwork, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "network.meta"), "w") as fh:
        fh.write(meta_text(net))
    for pair in net.layers:
        if pair.neg is None:
            files = [(dict_filename(pair.depth, None), pair.pos)]
        else:
            files = [(dict_filename(pair.depth, "pos"), pair.pos),
                     (dict_filename(pair.depth, "neg"), pair.neg)]
        for name, d in files:
            with open(os.path.join(directory, name), "w") as fh:
                fh.write(d.dumps())


def load_network(directory) -> TrainedNetwork:
    with open(os.path.join(directory, "network.meta")) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "# network v1":
        raise ValueError(f"{directory}: not a network directory")
    meta = dict(line.split("=", 1) for line in lines[1:])
    depth = int(meta["depth"])
    w, h = (int(v) for v in meta["geometry"].split("x"))
    layers, pairs = [], []

    def read(name):
        with open(os.path.join(directory, name)) as fh:
            return Dictionary.loads(fh.read())

    for i in range(1, depth + 1):
        layers.append(LayerConfig(float(meta[f"layer.{i}.tau"]), int(meta[f"layer.{i}.radius"]),
                                  int(meta[f"layer.{i}.n_atoms"]), float(meta[f"layer.{i}.alpha"]),
                                  _sparse_from(meta, f"layer.{i}.config")))
        pos_params = _sparse_from(meta, f"layer.{i}.pos")
        if i == 1:
            pairs.append(TrainedLayerPair(1, read(dict_filename(1, None)), None, pos_params))
        else:
            pairs.append(TrainedLayerPair(i, read(dict_filename(i, "pos")),
                                          read(dict_filename(i, "neg")), pos_params,
                                          _sparse_from(meta, f"layer.{i}.neg")))
    return TrainedNetwork(NetworkConfig(tuple(layers)), pairs, int(meta["seed"]), (w, h))
