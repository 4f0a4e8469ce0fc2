"""Histogram signatures and nearest-signature classification."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import EventStream

BC_FLOOR = 1e-300
METRICS = ("euclidean", "bhattacharyya")
SUBLAYERS = ("pos", "neg")


@dataclass(frozen=True, eq=False)
class Signature:
    """Per-feature response counts of the two leaf streams."""

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        for name in SUBLAYERS:
            v = np.asarray(getattr(self, name), dtype=np.int64)
            if v.ndim != 1 or (v < 0).any():
                raise ValueError("signature counts must be a non-negative vector")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def totals(self) -> tuple[int, int]:
        return int(self.pos.sum()), int(self.neg.sum())

    def part(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __eq__(self, other):
        if not isinstance(other, Signature):
            return NotImplemented
        return np.array_equal(self.pos, other.pos) and np.array_equal(self.neg, other.neg)

    __hash__ = None


def _counts(stream: EventStream, n_features: int) -> np.ndarray:
    if len(stream) and (stream.p.min() < 1 or stream.p.max() > n_features):
        raise ValueError(f"channel out of range 1..{n_features}")
    return np.bincount(stream.p - 1, minlength=n_features).astype(np.int64)


def signature(leaf_pos: EventStream, leaf_neg: EventStream, n_features: int) -> Signature:
    return Signature(_counts(leaf_pos, n_features), _counts(leaf_neg, n_features))


def _pair(h1, h2):
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"histogram lengths differ: {h1.shape} vs {h2.shape}")
    return h1, h2


def euclidean(h1, h2) -> float:
    h1, h2 = _pair(h1, h2)
    return float(np.sqrt(np.sum((h1 - h2) ** 2)))


def bhattacharyya(h1, h2) -> float:
    """``-ln(sum sqrt(p q))`` of the normalised histograms; the coefficient
    is clamped to ``[1e-300, 1]`` so disjoint supports stay finite."""
    h1, h2 = _pair(h1, h2)
    s1, s2 = h1.sum(), h2.sum()
    if s1 <= 0 or s2 <= 0:
        raise ValueError("Bhattacharyya distance undefined for an empty histogram")
    bc = float(np.sum(np.sqrt((h1 / s1) * (h2 / s2))))
    return -math.log(min(1.0, max(BC_FLOOR, bc)))


def distance(metric: str):
    try:
        return {"euclidean": euclidean, "bhattacharyya": bhattacharyya}[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


class SignatureBank(list):
    """``(label, Signature)`` pairs, one per learning example."""

    @property
    def labels(self) -> list:
        return sorted({lab for lab, _ in self})

    def dumps(self) -> str:
        return "".join(f"{lab};{','.join(map(str, s.pos.tolist()))};"
                       f"{','.join(map(str, s.neg.tolist()))}\n" for lab, s in self)

    @classmethod
    def loads(cls, text: str) -> "SignatureBank":
        bank = cls()
        for no, line in enumerate(text.splitlines(), 1):
            parts = line.split(";")
            if len(parts) != 3 or not parts[0]:
                raise ValueError(f"bank line {no}: malformed {line!r}")
            try:
                pos, neg = ([int(v) for v in p.split(",")] for p in parts[1:])
            except ValueError:
                raise ValueError(f"bank line {no}: malformed counts") from None
            bank.append((parts[0], Signature(pos, neg)))
        return bank


def classify(test: Signature, bank: Sequence, metric: str = "euclidean"):
    """1-nearest-example vote per leaf sub-layer, then majority.

    Vote ties go to the label whose winning example has the smallest
    distance summed over sub-layers, then to the smallest label.
    Returns ``(label, detail)``; ``detail[sub]`` is
    ``(label, distance, example index)``.
    """
    if not bank:
        raise ValueError("empty signature bank")
    dist = distance(metric)
    detail = {}
    for sub in SUBLAYERS:
        h = test.part(sub)
        best = None
        for i, (lab, sig) in enumerate(bank):
            key = (dist(h, sig.part(sub)), lab, i)
            if best is None or key < best:
                best = key
        detail[sub] = (best[1], best[0], best[2])
    votes = Counter(lab for lab, _, _ in detail.values())
    top = max(votes.values())
    tied = [lab for lab, v in votes.items() if v == top]
    if len(tied) == 1:
        return tied[0], detail

    def summed(lab):
        return min(sum(dist(test.part(s), bank[i][1].part(s)) for s in SUBLAYERS)
                   for sub_lab, _, i in detail.values() if sub_lab == lab)

    return min(tied, key=lambda lab: (summed(lab), lab)), detail


@dataclass
class Evaluation:
    metric: str
    labels: list
    confusion: np.ndarray  # rows: true label, columns: predicted
    predictions: list

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def rate(self) -> float:
        return self.correct / self.total if self.total else 0.0


def evaluate(test_set: Sequence, bank: Sequence, metric: str = "euclidean") -> dict:
    """Recognition rate and confusion matrix; ``metric="both"`` runs each."""
    if not test_set or not bank:
        raise ValueError("evaluation needs non-empty test set and bank")
    metrics = METRICS if metric == "both" else (metric,)
    labels = sorted({lab for lab, _ in bank} | {lab for lab, _ in test_set})
    index = {lab: i for i, lab in enumerate(labels)}
    out = {}
    for m in metrics:
        conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
        preds = []
        for truth, sig in test_set:
            pred, _ = classify(sig, bank, m)
            conf[index[truth], index[pred]] += 1
            preds.append((truth, pred))
        out[m] = Evaluation(m, labels, conf, preds)
    return out


def format_report(results: dict, centers: Sequence[int], spikes: int,
                  layer_spikes: Sequence[int], header: Sequence[str] = ()) -> str:
    """Text report shaped like a results table: centers, rate, spike count."""
    lines = [f"# {h}" for h in header]
    lines.append("metric\tcenters\trecognition_rate\tcorrect\ttotal\tspikes")
    centers_s = "-".join(str(n) for n in centers)
    for m, ev in results.items():
        lines.append(f"{m}\t{centers_s}\t{100 * ev.rate:.2f}%\t{ev.correct}\t{ev.total}\t{spikes}")
    lines.append("")
    lines.append("layer\tspikes_out")
    for i, n in enumerate(layer_spikes, 1):
        lines.append(f"{i}\t{n}")
    for m, ev in results.items():
        lines.append("")
        lines.append(f"confusion[{m}] (rows=true, cols=predicted)")
        lines.append("\t" + "\t".join(ev.labels))
        for lab, row in zip(ev.labels, ev.confusion):
            lines.append(lab + "\t" + "\t".join(str(v) for v in row))
    return "\n".join(lines) + "\n"
