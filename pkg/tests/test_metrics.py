import json

import numpy as np
import pytest
from sklearn.metrics import davies_bouldin_score

from tbps.errors import PreconditionError
from tbps.geometry import Box, iou
from tbps.metrics import (QueryResult, average_precision, cmc_at_k, davies_bouldin, is_correct,
                          mean_average_precision, read_predictions, relevance, summarize,
                          write_metrics, write_predictions)

from oracles import naive_ap, naive_davies_bouldin, naive_first_hit

GT = Box(0.1, 0.1, 0.3, 0.5)
FAR = Box(0.6, 0.6, 0.9, 0.9)


def test_is_correct_examples():
    assert is_correct(GT, [GT])
    assert not is_correct(FAR, [GT])
    half = Box(0.0, 0.0, 0.5, 0.5), Box(0.0, 0.0, 0.5, 0.25)  # IoU == 0.5 exactly
    assert is_correct(half[1], [half[0]])
    with pytest.raises(PreconditionError):
        is_correct(GT, [GT], iou_threshold=0.0)


def test_ap_examples():
    assert average_precision(QueryResult("q", [("a", GT, 0.9)], [("a", GT)])) == 1.0
    r = QueryResult("q", [("b", FAR, 0.9), ("a", GT, 0.4)], [("a", GT)])
    assert average_precision(r) == 0.5 == naive_ap([False, True], 1)
    assert average_precision(QueryResult("q", [("a", FAR, 0.9)], [("a", GT)])) == 0.0
    with pytest.raises(PreconditionError):
        average_precision(QueryResult("q", [("a", GT, 0.9)], []))


def test_ground_truth_credited_once():
    r = QueryResult("q", [("a", GT, 0.9), ("a", GT, 0.8)], [("a", GT)])
    assert relevance(r).tolist() == [True, False]
    assert average_precision(r) == 1.0


def test_ranking_sorted_with_gallery_tie_break():
    r = QueryResult("q", [("b", GT, 0.5), ("a", FAR, 0.5), ("c", GT, 0.7)], [])
    assert [g for g, _, _ in r.ranked] == ["c", "a", "b"]
    with pytest.raises(PreconditionError):
        QueryResult("q", [("a", GT, float("nan"))], [])


def _query(first_rank, n=6):
    ranked = [(f"x{k}", FAR, 1.0 - k / 10) for k in range(n)]
    if first_rank is not None:
        ranked[first_rank - 1] = ("t", GT, 1.0 - (first_rank - 1) / 10)
    return QueryResult("q", ranked, [("t", GT)])


def test_cmc_examples():
    assert cmc_at_k([_query(1), _query(1)], 1) == 1.0
    qs = [_query(1), _query(3)]
    assert cmc_at_k(qs, 1) == 0.5
    assert cmc_at_k(qs, 5) == 1.0
    assert [naive_first_hit(relevance(q)) for q in qs] == [1, 3]
    with pytest.raises(PreconditionError):
        cmc_at_k(qs, 0)


def _random_result(rng, images=6):
    gt = [(f"g{i}", Box.from_array(b)) for i, b in enumerate(_boxes(rng, int(rng.integers(1, 4))))]
    ranked = []
    for _ in range(int(rng.integers(0, 12))):
        img = f"g{int(rng.integers(0, images))}"
        if rng.random() < 0.4 and any(g == img for g, _ in gt):
            b = next(b for g, b in gt if g == img).as_array()
            b = np.clip(b + rng.normal(scale=0.03, size=4), 0, 1)
            if b[0] >= b[2] or b[1] >= b[3]:
                continue
        else:
            b = _boxes(rng, 1)[0]
        ranked.append((img, Box.from_array(b), float(rng.integers(0, 5)) / 4))
    return QueryResult("q", ranked, gt)


def _boxes(rng, n):
    lo = rng.uniform(0, 0.6, (n, 2))
    return np.hstack([lo, lo + rng.uniform(0.1, 0.35, (n, 2))])


def _naive_hits(result):
    """O(n^2) relevance: scan every earlier hit for the same ground truth."""
    hits, used = [], []
    for gid, box, _ in result.ranked:
        found = False
        for k, (g, gb) in enumerate(result.ground_truth):
            if g == gid and k not in used and iou(box, gb) >= 0.5:
                used.append(k)
                found = True
                break
        hits.append(found)
    return hits


def test_metrics_match_naive_reference():
    rng = np.random.default_rng(0)
    results = [_random_result(rng) for _ in range(1000)]
    for r in results:
        assert average_precision(r) == pytest.approx(naive_ap(_naive_hits(r), len(r.ground_truth)),
                                                     abs=1e-12)
    ref_map = np.mean([naive_ap(_naive_hits(r), len(r.ground_truth)) for r in results])
    assert mean_average_precision(results) == pytest.approx(ref_map, abs=1e-12)
    firsts = [naive_first_hit(_naive_hits(r)) for r in results]
    prev = 0.0
    for k in (1, 5, 10):
        ref = np.mean([f is not None and f <= k for f in firsts])
        assert cmc_at_k(results, k) == pytest.approx(ref, abs=1e-12)
        assert cmc_at_k(results, k) >= prev
        prev = cmc_at_k(results, k)


def test_davies_bouldin_examples():
    assert davies_bouldin([[0.0], [1.0]], [0, 1]) == 0.0
    assert davies_bouldin([[-0.1], [0.1], [0.9], [1.1]], [0, 0, 1, 1]) == pytest.approx(0.2)
    pts = np.array([[-0.2], [0.2], [0.8], [1.2]])
    values = [davies_bouldin(pts * [[s]] + [[0], [0], [1 - s], [1 - s]], [0, 0, 1, 1])
              for s in (1.0, 0.5, 0.25)]
    assert values[0] > values[1] > values[2]
    with pytest.raises(PreconditionError):
        davies_bouldin([[0.0], [0.0]], [0, 1])
    with pytest.raises(PreconditionError):
        davies_bouldin([[0.0], [1.0]], [0, 0])


def test_davies_bouldin_matches_independent_implementations():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, 20)])
        pts = rng.normal(size=(len(labels), d)) + 3 * rng.normal(size=(k, d))[labels]
        ours = davies_bouldin(pts, labels)
        assert ours == pytest.approx(davies_bouldin_score(pts, labels), abs=1e-9)
        assert ours == pytest.approx(naive_davies_bouldin(pts, labels), abs=1e-9)


def test_prediction_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    results = [_random_result(rng) for _ in range(20)]
    results = [QueryResult(i, r.ranked, r.ground_truth) for i, r in enumerate(results)]
    path = tmp_path / "pred.jsonl"
    write_predictions(path, results)
    again = read_predictions(path)
    assert summarize(again) == summarize(results)
    s = summarize(results)
    write_metrics(tmp_path / "m.csv", tmp_path / "m.json", s)
    assert json.loads((tmp_path / "m.json").read_text())["mAP"] == s["mAP"]
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "mAP,top1,top5,top10,n_queries"
