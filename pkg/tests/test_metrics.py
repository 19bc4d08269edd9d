"""Edit distance and corpus-level error rate."""

import numpy as np
import pytest

from warmadapt import metrics

from oracles import edit_distance_recursive


def test_edit_distance_known_cases():
    assert metrics.edit_distance("kitten", "sitting") == 3
    assert metrics.edit_distance("flaw", "lawn") == 2
    assert metrics.edit_distance("", "abc") == 3
    assert metrics.edit_distance("abc", "") == 3
    assert metrics.edit_distance("abc", "abc") == 0
    assert metrics.edit_distance([1, 2, 3], [1, 3]) == 1


def test_edit_distance_matches_recursive_oracle():
    rng = np.random.default_rng(77)
    for _ in range(200):
        a = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
        b = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
        assert metrics.edit_distance(a, b) == edit_distance_recursive(a, b)


def test_edit_distance_axioms():
    rng = np.random.default_rng(78)
    for _ in range(60):
        a = rng.integers(0, 3, size=rng.integers(0, 7)).tolist()
        b = rng.integers(0, 3, size=rng.integers(0, 7)).tolist()
        c = rng.integers(0, 3, size=rng.integers(0, 7)).tolist()
        dab = metrics.edit_distance(a, b)
        assert dab == metrics.edit_distance(b, a)
        assert (dab == 0) == (a == b)
        assert dab <= metrics.edit_distance(a, c) + metrics.edit_distance(c, b)
        assert abs(len(a) - len(b)) <= dab <= max(len(a), len(b))


def test_cer_pools_edits_not_rates():
    # 1 edit over 4 chars + 0 edits over 1 char: pooled 1/5, mean would be 1/8
    pairs = [("abcd", "abcx"), ("e", "e")]
    assert metrics.cer(pairs) == pytest.approx(1 / 5)


def test_cer_can_exceed_one_and_rejects_empty():
    assert metrics.cer([("a", "xyz")]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        metrics.cer([])
    with pytest.raises(ValueError):
        metrics.cer([("", "abc")])


def test_eval_report_from_pairs():
    rep = metrics.EvalReport.from_pairs("xx", "test", [("abcd", "abcx"), ("e", "e")])
    assert rep.n_utts == 2
    assert rep.edits == 1
    assert rep.ref_len == 5
    assert rep.cer == pytest.approx(0.2)
    with pytest.raises(ValueError):
        metrics.EvalReport.from_pairs("xx", "test", [("", "a")])


def test_write_eval_csv_round_trips_exactly(tmp_path):
    reports = [
        metrics.EvalReport("aa", "test", 3, 2, 21),
        metrics.EvalReport("bb", "dev", 1, 0, 7),
    ]
    p = tmp_path / "eval.csv"
    metrics.write_eval_csv(p, reports)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(metrics.EVAL_FIELDS)
    assert lines[1].startswith("aa,test,3,2,21,")
    assert float(lines[1].split(",")[-1]) == reports[0].cer
    # repr-serialized floats survive a write/parse/write cycle unchanged
    assert repr(float(lines[1].split(",")[-1])) == lines[1].split(",")[-1]
