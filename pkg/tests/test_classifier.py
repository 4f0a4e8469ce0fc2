import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsparse.classifier import (Signature, SignatureBank, bhattacharyya, classify, distance,
                                 euclidean, evaluate, format_report, signature)
from evsparse.events import LAYER, EventStream

from oracles import bhattacharyya_scalar


def _leaf(channels, n):
    k = len(channels)
    return EventStream(4, 4, n, LAYER, np.zeros(k, np.int32), np.zeros(k, np.int32),
                       np.arange(k, dtype=np.int64), np.asarray(channels, np.int32))


def test_signature_counts():
    s = signature(_leaf([1, 1, 3], 3), _leaf([], 3), 3)
    assert s.pos.tolist() == [2, 0, 1]
    assert s.neg.tolist() == [0, 0, 0]
    assert s.totals == (3, 0)
    with pytest.raises(ValueError):
        signature(_leaf([4], 4), _leaf([], 4), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), max_size=60))
def test_signature_matches_naive_count(chs):
    s = signature(_leaf(chs, 5), _leaf(chs[::-1], 5), 5)
    naive = [sum(1 for c in chs if c == j) for j in range(1, 6)]
    assert s.pos.tolist() == naive == s.neg.tolist()


def test_euclidean_hand_case():
    assert euclidean((3, 0), (0, 4)) == 5.0
    assert euclidean((1, 2, 3), (1, 2, 3)) == 0.0
    with pytest.raises(ValueError):
        euclidean((1, 2), (1, 2, 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(*[st.lists(st.integers(0, 50), min_size=n,
                                                                  max_size=n)] * 3)))
def test_euclidean_metric_axioms(hs):
    a, b, c = hs
    assert euclidean(a, b) == euclidean(b, a)
    assert euclidean(a, c) <= euclidean(a, b) + euclidean(b, c) + 1e-9


def test_bhattacharyya_hand_case():
    # BC = 2 * sqrt(3/16) = sqrt(3)/2
    assert bhattacharyya((3, 1), (1, 3)) == pytest.approx(0.143841036, abs=1e-6)
    assert bhattacharyya((3, 1), (1, 3)) == pytest.approx(bhattacharyya_scalar((3, 1), (1, 3)),
                                                          abs=1e-12)
    assert bhattacharyya((2, 5), (2, 5)) == pytest.approx(0.0, abs=1e-12)


def test_bhattacharyya_disjoint_and_empty():
    assert bhattacharyya((1, 0), (0, 1)) == pytest.approx(-math.log(1e-300))
    with pytest.raises(ValueError):
        bhattacharyya((0, 0), (1, 2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=8), st.data())
def test_bhattacharyya_scale_invariant(h1, data):
    h2 = data.draw(st.lists(st.integers(1, 40), min_size=len(h1), max_size=len(h1)))
    k = data.draw(st.integers(2, 9))
    d = bhattacharyya(h1, h2)
    assert d >= -1e-12
    assert bhattacharyya([k * v for v in h1], h2) == pytest.approx(d, abs=1e-12)
    assert d == pytest.approx(bhattacharyya_scalar(h1, h2), abs=1e-12)


def test_unknown_metric():
    with pytest.raises(ValueError):
        distance("cosine")


def _sig(pos, neg):
    return Signature(np.array(pos), np.array(neg))


def test_self_match():
    bank = SignatureBank([("a", _sig([5, 1], [2, 2])), ("b", _sig([1, 5], [0, 3]))])
    for metric in ("euclidean", "bhattacharyya"):
        for lab, s in bank:
            assert classify(s, bank, metric)[0] == lab


def test_vote_tie_goes_to_smaller_summed_distance():
    bank = SignatureBank([("b", _sig([10, 0], [0, 9])), ("a", _sig([0, 10], [0, 0]))])
    test = _sig([0, 9], [0, 8])
    label, detail = classify(test, bank, "euclidean")
    assert detail["pos"][0] == "a" and detail["neg"][0] == "b"
    # summed distances: a -> 1 + 8 = 9, b -> sqrt(181) + 1 ~ 14.45
    assert label == "a"


def test_vote_tie_breaks_by_label_when_distances_equal():
    bank = SignatureBank([("b", _sig([2, 0], [0, 3])), ("a", _sig([0, 3], [2, 0]))])
    test = _sig([1, 0], [1, 0])
    label, detail = classify(test, bank, "euclidean")
    assert {detail["pos"][0], detail["neg"][0]} == {"a", "b"}
    assert label == "a"


def _oracle_classify(test, bank):
    votes = {}
    winners = {}
    for sub in ("pos", "neg"):
        scored = sorted((euclidean(getattr(test, sub), getattr(s, sub)), lab, i)
                        for i, (lab, s) in enumerate(bank))
        _, lab, i = scored[0]
        votes[lab] = votes.get(lab, 0) + 1
        tot = sum(euclidean(getattr(test, s), getattr(bank[i][1], s)) for s in ("pos", "neg"))
        winners[lab] = min(winners.get(lab, math.inf), tot)
    top = max(votes.values())
    return min((winners[lab], lab) for lab, v in votes.items() if v == top)[1]


def test_classify_exhaustive_small_oracle():
    # every test signature over a small grid against a fixed 2-class bank
    bank = SignatureBank([("a", _sig([3, 0], [0, 2])), ("a", _sig([2, 1], [1, 1])),
                          ("b", _sig([0, 3], [2, 0]))])
    for p0, p1, n0, n1 in itertools.product(range(4), repeat=4):
        t = _sig([p0, p1], [n0, n1])
        assert classify(t, bank, "euclidean")[0] == _oracle_classify(t, bank)


def test_evaluate_perfect_and_mislabelled():
    bank = SignatureBank([("a", _sig([9, 1], [8, 1])), ("b", _sig([1, 9], [1, 8]))])
    good = [("a", _sig([8, 2], [7, 1])), ("b", _sig([2, 8], [1, 7]))]
    res = evaluate(good, bank, "both")
    for ev in res.values():
        assert ev.rate == 1.0 and ev.correct == 2 and ev.total == 2
    bad = [("b", s) for _, s in good[:1]] + [("a", s) for _, s in good[1:]]
    ev = evaluate(bad, bank, "euclidean")["euclidean"]
    assert ev.rate == 0.0
    assert ev.confusion.tolist() == [[0, 1], [1, 0]]
    with pytest.raises(ValueError):
        evaluate([], bank)
    with pytest.raises(ValueError):
        classify(good[0][1], SignatureBank())


def test_bhattacharyya_rejects_zero_total_example():
    bank = SignatureBank([("a", _sig([0, 0], [1, 1]))])
    with pytest.raises(ValueError):
        classify(_sig([1, 1], [1, 1]), bank, "bhattacharyya")


def test_bank_round_trip_and_malformed():
    bank = SignatureBank([("club", _sig([1, 0, 7], [2, 2, 2])), ("spade", _sig([0, 0, 0], [5, 0, 1]))])
    text = bank.dumps()
    assert text.splitlines()[0] == "club;1,0,7;2,2,2"
    again = SignatureBank.loads(text)
    assert [lab for lab, _ in again] == ["club", "spade"]
    assert all(s1 == s2 for (_, s1), (_, s2) in zip(bank, again))
    for broken in ("club;1,2", "club;1,x;3", ";1;1"):
        with pytest.raises(ValueError):
            SignatureBank.loads(broken)


def test_report_format():
    bank = SignatureBank([("a", _sig([9, 1], [8, 1])), ("b", _sig([1, 9], [1, 8]))])
    res = evaluate([("a", _sig([8, 2], [7, 1]))], bank, "euclidean")
    text = format_report(res, [6, 9, 12], 1234, [10, 20, 1234], header=["seed=0"])
    lines = text.splitlines()
    assert lines[0] == "# seed=0"
    assert lines[2] == "euclidean\t6-9-12\t100.00%\t1\t1\t1234"
    assert "confusion[euclidean] (rows=true, cols=predicted)" in lines
