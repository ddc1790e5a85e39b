import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damvd.data import build_vocab, generate_dataset
from damvd.encoders import collate, encode
from damvd.evaluation import (
    MetricsReport, build_report, distinct_n, metrics_from_rankings, ndcg, rank_candidates, rank_examples,
    rank_from_scores, repetition_rate, retrieval_metrics,
)
from damvd.model import DamModel, ModelConfig
from oracles import brute_ndcg, brute_order, brute_rank, brute_retrieval, random_instance


def test_single_candidate():
    assert rank_from_scores([-3.0], 0, [1.0]).gt_rank == 1


def test_ties_keep_input_order():
    res = rank_from_scores([0.5] * 4, 2, [0, 0, 1, 0])
    assert res.order == [0, 1, 2, 3] and res.gt_rank == 3


def test_empty_candidates():
    with pytest.raises(ValueError):
        rank_from_scores([], 0, [])


@settings(max_examples=60)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=8), st.integers(-3, 3), st.data())
def test_adding_distractor_never_improves_gt(scores, extra, data):
    gt = data.draw(st.integers(0, len(scores) - 1))
    before = rank_from_scores(scores, gt, [0] * len(scores)).gt_rank
    pos = data.draw(st.integers(0, len(scores)))
    grown = scores[:pos] + [extra] + scores[pos:]
    after = rank_from_scores(grown, gt + (pos <= gt), [0] * len(grown)).gt_rank
    assert after >= before


def test_rank_candidates_with_model():
    ds = generate_dataset(1, 2, 1, 5)
    vocab = build_vocab(ds)
    model = DamModel.init(ModelConfig(len(vocab), 4, 5), seed=0)
    ex = ds.examples()[0]
    kb = encode(model, collate([ex], vocab))
    cands = [vocab.encode(c) for c in ex.rnd.candidates]
    res = rank_candidates(model, kb, cands, ex.rnd.gt_index, ex.rnd.relevance)
    assert sorted(res.ranks) == list(range(1, 6))
    assert res.gt_rank == rank_examples(model, [ex], vocab)[0].gt_rank
    with pytest.raises(ValueError):
        rank_candidates(model, kb, [])


def test_retrieval_examples():
    assert retrieval_metrics([1]) == {"mrr": 1.0, "r_at_1": 1.0, "r_at_5": 1.0, "r_at_10": 1.0, "mean_rank": 1.0}
    four = retrieval_metrics([4])
    assert (four["mrr"], four["r_at_1"], four["r_at_5"], four["r_at_10"]) == (0.25, 0.0, 1.0, 1.0)
    two = retrieval_metrics([1, 2])
    assert two["mrr"] == 0.75 and two["mean_rank"] == 1.5
    with pytest.raises(ValueError):
        retrieval_metrics([])


def test_ndcg_examples():
    assert ndcg([0, 1, 2], [1, 0, 0]) == 1.0
    # frozen: DCG = 1/log2(3), IDCG = 1 + 0.5/log2(3)
    assert ndcg([2, 0, 1], [1.0, 0.5, 0.0]) == pytest.approx(0.47963, abs=1e-5)
    with pytest.raises(ValueError):
        ndcg([0, 1], [0, 0])
    with pytest.raises(ValueError):
        ndcg([0], [1, 0])


def test_ndcg_ignores_order_below_cutoff():
    rel = [1.0, 0.5, 0.0, 0.0, 0.0]
    assert ndcg([1, 0, 2, 3, 4], rel) == ndcg([1, 0, 4, 2, 3], rel)


@settings(max_examples=100)
@given(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0]), min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_ndcg_bounds_and_oracle(rel, rnd):
    if not any(r > 0 for r in rel):
        rel[0] = 1.0
    order = list(range(len(rel)))
    rnd.shuffle(order)
    value = ndcg(order, rel)
    assert 0.0 <= value <= 1.0 + 1e-12
    assert value == pytest.approx(brute_ndcg(order, rel), abs=1e-9)


def test_repetition_examples():
    assert repetition_rate([["a", "red", "red", "circle"]]) == 1.0
    assert repetition_rate([["no"]]) == 0.0
    assert repetition_rate([["on", "the", "table", "on", "the", "table"]]) == 1.0
    assert repetition_rate([["yes"], ["a", "a"]]) == 0.5
    assert repetition_rate([]) == 0.0


def test_distinct_examples():
    assert distinct_n([["a", "b", "a"]], 1) == pytest.approx(2 / 3)
    assert distinct_n([["a"], ["a"]], 1) == 0.5
    assert distinct_n([["a", "b"]], 3) == 0.0
    with pytest.raises(ValueError):
        distinct_n([["a"]], 0)


@settings(max_examples=100)
@given(st.lists(st.lists(st.sampled_from("abc"), max_size=6), max_size=5), st.integers(1, 3))
def test_text_metric_bounds(responses, n):
    assert 0.0 <= repetition_rate(responses) <= 1.0
    assert 0.0 <= distinct_n(responses, n) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    results, ranks, ndcgs = [], [], []
    for _ in range(int(rng.integers(1, 6))):
        scores, gt, rel = random_instance(rng)
        res = rank_from_scores(scores, gt, rel)
        assert res.gt_rank == brute_rank(scores, gt)
        assert res.order == brute_order(scores)
        results.append(res)
        ranks.append(brute_rank(scores, gt))
        ndcgs.append(brute_ndcg(brute_order(scores), rel))
    got = metrics_from_rankings(results)
    want = brute_retrieval(ranks)
    want["ndcg"] = sum(ndcgs) / len(ndcgs)
    for k, v in want.items():
        assert abs(got[k] - v) < 1e-9, k
    # aggregation does not depend on round order
    shuffled = metrics_from_rankings(results[::-1])
    assert all(math.isclose(shuffled[k], got[k], abs_tol=1e-12) for k in got)


def test_perfect_model_report():
    rankings = [rank_from_scores([0.0, -1.0, -2.0], 0, [1.0, 0.5, 0.0]) for _ in range(3)]
    report = build_report(rankings, [[1, 2], [3]])
    assert isinstance(report, MetricsReport)
    assert report.mrr == 1.0 and report.ndcg == 1.0 and report.mean_rank == 1.0
    assert set(report.to_json()) == {
        "mrr", "r_at_1", "r_at_5", "r_at_10", "mean_rank", "ndcg", "repetition_rate", "distinct_1", "distinct_2",
    }
