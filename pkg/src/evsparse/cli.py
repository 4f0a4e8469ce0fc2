"""Command-line front end.

Configuration comes from built-in defaults, then an optional ``key=value``
file (``--config``), then ``--set key=value`` and the dedicated flags;
later sources win. Every command writes the fully resolved configuration
to ``run.cfg`` next to its outputs (file and directory paths excepted).
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .classifier import Signature, SignatureBank, classify, evaluate, format_report, signature
from .events import read_events, save_events
from .hierarchy import (EmptyBranchError, NetworkConfig, evolve_config, load_network,
                        run_network, save_network, subseed, train_network)
from .scenes import DatasetSpec, build_dataset
from .sparse import SparseParams, select_dictionary_size
from .surface import stream_surfaces

DEFAULTS = {
    "seed": "0",
    "out": "out",
    "metric": "both",
    "format": "text",
    # dataset
    "classes": "club,diamond,heart,spade",
    "n_train": "7",
    "n_test": "3",
    "width": "32",
    "height": "24",
    "duration_us": "20000",
    "travel_px": "12",
    "jitter_px": "2",
    "sample_rate": "0.01",
    "noise_rate": "1",
    # network: explicit lists, or geometric when n0 is set
    "n_atoms": "6,9,12",
    "taus": "10000,15000,20000",
    "radii": "2",
    "alphas": "",
    "depth": "",
    "tau0": "",
    "r0": "",
    "n0": "",
    "k_tau": "1",
    "k_r": "1",
    "k_n": "1",
    # sparse coding
    "lam": "0.1",
    "sigma": "",
    "eta": "0.05",
    "eps_smooth": "1e-6",
    "max_cg_iters": "100",
    "cg_tol": "1e-6",
    "epochs_max": "200",
    "epoch_tol": "1e-4",
    "max_train_surfaces": "",
    # paths
    "train_manifest": "",
    "test_manifest": "",
    "manifest": "",
    "network": "",
    "bank": "",
    "input": "",
    # sweep
    "candidates": "2,4,8,16",
}

_PATH_KEYS = ("out", "network", "bank", "input", "manifest", "train_manifest",
              "test_manifest")
_FLAG_KEYS = ("seed", "out", "metric", "network", "bank", "input", "manifest",
              "train_manifest", "test_manifest", "candidates", "format")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def read_config_file(path) -> dict:
    cfg = {}
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError("config", f"{path}:{no}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise CliError("config", f"{path}:{no}: unknown key {k!r}")
            cfg[k] = v
    return cfg


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for item in args.set or ():
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in DEFAULTS:
            raise CliError("config", f"unknown key {k!r}")
        cfg[k] = v
    for k in _FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = str(v)
    return cfg


def config_text(cfg: dict, command: str) -> str:
    lines = [f"# evsparse {__version__} {command}"]
    # paths are left out so identical runs in different places match byte for byte
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg) if k not in _PATH_KEYS]
    return "\n".join(lines) + "\n"


def _ints(s: str) -> list:
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s: str) -> list:
    return [float(v) for v in s.split(",") if v.strip()]


def _opt(s: str, cast):
    return cast(s) if s not in ("", "none") else None


def sparse_params(cfg: dict) -> SparseParams:
    return SparseParams(lam=float(cfg["lam"]), sigma=_opt(cfg["sigma"], float),
                        eta=float(cfg["eta"]), eps_smooth=float(cfg["eps_smooth"]),
                        max_cg_iters=int(cfg["max_cg_iters"]), cg_tol=float(cfg["cg_tol"]),
                        epochs_max=int(cfg["epochs_max"]), epoch_tol=float(cfg["epoch_tol"]),
                        max_train_surfaces=_opt(cfg["max_train_surfaces"], int))


def network_config(cfg: dict) -> NetworkConfig:
    sp = sparse_params(cfg)
    if cfg["n0"]:
        return evolve_config((float(cfg["tau0"]), int(cfg["r0"]), int(cfg["n0"])),
                             (float(cfg["k_tau"]), float(cfg["k_r"]), float(cfg["k_n"])),
                             int(cfg["depth"] or 1), sp)
    ns = _ints(cfg["n_atoms"])
    radii = _ints(cfg["radii"])
    radii = radii[0] if len(radii) == 1 else radii
    alphas = _floats(cfg["alphas"]) or None
    return NetworkConfig.explicit(_floats(cfg["taus"]), radii, ns, alphas, sp)


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(classes=tuple(c for c in cfg["classes"].split(",") if c),
                       n_train=int(cfg["n_train"]), n_test=int(cfg["n_test"]),
                       width=int(cfg["width"]), height=int(cfg["height"]),
                       duration_us=int(cfg["duration_us"]), travel_px=float(cfg["travel_px"]),
                       jitter_px=float(cfg["jitter_px"]), sample_rate=float(cfg["sample_rate"]),
                       noise_rate=float(cfg["noise_rate"]))


def read_manifest(path) -> list:
    """``[(label, absolute path)]`` from ``label,relative/path`` lines."""
    if not path:
        raise CliError("missing", "manifest path not given")
    if not os.path.exists(path):
        raise CliError("missing", f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path) as fh:
        for no, line in enumerate(fh.read().splitlines(), 1):
            if not line:
                continue
            if "," not in line:
                raise CliError("manifest", f"{path}:{no}: expected label,path")
            label, rel = line.split(",", 1)
            items.append((label, os.path.join(base, rel)))
    return items


def _write(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _load_net(cfg):
    if not cfg["network"] or not os.path.exists(os.path.join(cfg["network"], "network.meta")):
        raise CliError("missing", f"network not found: {cfg['network'] or '(unset)'}")
    return load_network(cfg["network"])


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: dict) -> None:
    out = cfg["out"]
    ds = dataset_spec(cfg)
    seed = subseed(int(cfg["seed"]), "dataset")
    train, test = build_dataset(ds, seed)
    os.makedirs(out, exist_ok=True)
    for split, items in (("train", train), ("test", test)):
        lines = []
        for label, stream, rel in items:
            path = os.path.join(out, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            save_events(stream, path, cfg["format"])
            lines.append(f"{label},{rel}\n")
        _write(os.path.join(out, f"{split}.manifest"), "".join(lines))
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "generate"))


def _load_streams(manifest):
    return [(label, read_events(path), path) for label, path in read_manifest(manifest)]


def cmd_train(cfg: dict) -> None:
    out = cfg["out"]
    items = _load_streams(cfg["train_manifest"] or cfg["manifest"])
    if not items:
        raise CliError("empty", "training manifest lists no examples")
    config = network_config(cfg)
    t0 = time.perf_counter()
    net = train_network([s for _, s, _ in items], config, int(cfg["seed"]))
    wall = time.perf_counter() - t0
    save_network(net, out)
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "train"))
    lines = [f"# seed={cfg['seed']} examples={len(items)}",
             "layer\tsign\tn_atoms\tsurfaces\tepochs\tconverged\tlam\tsigma\teta\tfinal_energy"]
    energy = ["layer\tsign\tepoch\tmean_energy"]
    for (depth, sign), rep in sorted(net.reports.items()):
        p = rep.params
        lines.append(f"{depth}\t{sign}\t{rep.n_atoms}\t{rep.n_surfaces}\t{len(rep.epoch_energy)}\t"
                     f"{rep.converged}\t{p.lam!r}\t{p.sigma!r}\t{p.eta!r}\t{rep.epoch_energy[-1]!r}")
        energy += [f"{depth}\t{sign}\t{i}\t{e!r}" for i, e in enumerate(rep.epoch_energy, 1)]
    _write(os.path.join(out, "train_report.txt"), "\n".join(lines) + "\n")
    _write(os.path.join(out, "energy.tsv"), "\n".join(energy) + "\n")
    _write(os.path.join(out, "train_timing.txt"), f"wall_seconds={wall:.3f}\n")


@dataclass
class Encoded:
    label: str
    path: str
    signature: Signature
    n_input: int
    per_depth: list     # output events of every depth
    leaves: tuple

    @property
    def spikes(self) -> int:
        return self.per_depth[-1]


def _encode_all(net, items) -> list:
    rows = []
    for label, stream, path in items:
        pos, neg, stats = run_network(stream, net)
        rows.append(Encoded(label, path, signature(pos, neg, net.final_feature_count),
                            len(stream), [sum(s.n_out for s in st) for st in stats],
                            (pos, neg)))
    return rows


def _inputs(cfg):
    if cfg["input"]:
        return [("?", read_events(cfg["input"]), cfg["input"])]
    return _load_streams(cfg["manifest"] or cfg["test_manifest"])


def cmd_encode(cfg: dict) -> None:
    out = cfg["out"]
    net = _load_net(cfg)
    rows = _encode_all(net, _inputs(cfg))
    os.makedirs(out, exist_ok=True)
    bank = SignatureBank()
    counts = ["example\tlabel\tinput\t" + "\t".join(f"depth{i}" for i in range(1, net.config.depth + 1))]
    for row in rows:
        stem = os.path.splitext(os.path.basename(row.path))[0]
        save_events(row.leaves[0], os.path.join(out, f"{stem}.pos.evs"), "binary")
        save_events(row.leaves[1], os.path.join(out, f"{stem}.neg.evs"), "binary")
        bank.append((row.label, row.signature))
        counts.append(f"{stem}\t{row.label}\t{row.n_input}\t" + "\t".join(map(str, row.per_depth)))
    _write(os.path.join(out, "signatures.bank"), bank.dumps())
    _write(os.path.join(out, "spikes.tsv"), "\n".join(counts) + "\n")
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "encode"))


def _bank_from(cfg, net) -> SignatureBank:
    if cfg["bank"]:
        if not os.path.exists(cfg["bank"]):
            raise CliError("missing", f"bank not found: {cfg['bank']}")
        with open(cfg["bank"]) as fh:
            return SignatureBank.loads(fh.read())
    rows = _encode_all(net, _load_streams(cfg["train_manifest"]))
    return SignatureBank((r.label, r.signature) for r in rows)


def cmd_classify(cfg: dict) -> None:
    out = cfg["out"]
    net = _load_net(cfg)
    bank = _bank_from(cfg, net)
    metrics = ("euclidean", "bhattacharyya") if cfg["metric"] == "both" else (cfg["metric"],)
    lines = ["example\tmetric\tpredicted\tpos_vote\tneg_vote"]
    for row in _encode_all(net, _inputs(cfg)):
        for m in metrics:
            pred, detail = classify(row.signature, bank, m)
            lines.append(f"{os.path.basename(row.path)}\t{m}\t{pred}\t{detail['pos'][0]}\t{detail['neg'][0]}")
    text = "\n".join(lines) + "\n"
    _write(os.path.join(out, "predictions.tsv"), text)
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "classify"))
    sys.stdout.write(text)


def cmd_evaluate(cfg: dict) -> str:
    out = cfg["out"]
    net = _load_net(cfg)
    train_rows = _encode_all(net, _load_streams(cfg["train_manifest"]))
    test_rows = _encode_all(net, _load_streams(cfg["test_manifest"]))
    if not train_rows or not test_rows:
        raise CliError("empty", "evaluation needs non-empty train and test manifests")
    bank = SignatureBank((r.label, r.signature) for r in train_rows)
    results = evaluate([(r.label, r.signature) for r in test_rows], bank, cfg["metric"])
    spikes = sum(r.spikes for r in test_rows)
    per_depth = np.sum([r.per_depth for r in test_rows], axis=0).tolist()
    header = [f"{k}={cfg[k]}" for k in sorted(cfg) if k not in _PATH_KEYS]
    header.append(f"test_examples={len(test_rows)} "
                  f"input_events={sum(r.n_input for r in test_rows)}")
    report = format_report(results, [lc.n_atoms for lc in net.config.layers], spikes, per_depth, header)
    _write(os.path.join(out, "report.txt"), report)
    _write(os.path.join(out, "bank.txt"), bank.dumps())
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "evaluate"))
    sys.stdout.write(report)
    return report


def cmd_sweep(cfg: dict) -> None:
    out = cfg["out"]
    items = _load_streams(cfg["train_manifest"] or cfg["manifest"])
    if not items:
        raise CliError("empty", "sweep manifest lists no examples")
    layer = network_config(cfg).layers[0]
    X = np.concatenate([stream_surfaces(s, layer.radius, layer.tau) for _, s, _ in items])
    sp = layer.sparse
    if sp.max_train_surfaces is not None and X.shape[0] > sp.max_train_surfaces:
        rng = np.random.default_rng(subseed(int(cfg["seed"]), "sweep-sample"))
        X = X[np.sort(rng.choice(X.shape[0], sp.max_train_surfaces, replace=False))]
    best, table = select_dictionary_size(X, _ints(cfg["candidates"]), sp,
                                         subseed(int(cfg["seed"]), "sweep"))
    lines = [f"# seed={cfg['seed']} surfaces={X.shape[0]} best_n={best}",
             "n\treconstruction_error\tfinal_epoch_energy\tepochs"]
    lines += [f"{n}\t{err!r}\t{e!r}\t{ep}" for n, err, e, ep in table]
    text = "\n".join(lines) + "\n"
    _write(os.path.join(out, "sweep.tsv"), text)
    _write(os.path.join(out, "run.cfg"), config_text(cfg, "sweep"))
    sys.stdout.write(text)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "encode": cmd_encode,
            "classify": cmd_classify, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evsparse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--metric", choices=("euclidean", "bhattacharyya", "both"))
        p.add_argument("--format", choices=("text", "binary"), help="event file format")
        p.add_argument("--network", help="network directory")
        p.add_argument("--bank", help="signature bank file")
        p.add_argument("--input", help="single event file")
        p.add_argument("--manifest")
        p.add_argument("--train-manifest", dest="train_manifest")
        p.add_argument("--test-manifest", dest="test_manifest")
        p.add_argument("--candidates", help="comma-separated dictionary sizes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error code={exc.code} message={exc}", file=sys.stderr)
        return 2
    except EmptyBranchError as exc:
        print(f"error code=empty_branch depth={exc.depth} sign={exc.sign} message={exc}",
              file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error code={type(exc).__name__} message={exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
