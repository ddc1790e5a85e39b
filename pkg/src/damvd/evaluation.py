"""Candidate ranking by model likelihood and the retrieval / richness metrics."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, Example, Vocabulary
from .decoder import MAX_LEN, StepTrace, greedy_decode, sequence_scores, teacher_forced_hits
from .encoders import KnowledgeBase, collate, encode
from .model import DamModel
from .training import batches


@dataclass
class RankingResult:
    scores: np.ndarray
    order: list[int]  # candidate indices, best first
    ranks: list[int]  # 1-based rank of each candidate
    gt_rank: int
    relevance: list[float]


@dataclass
class MetricsReport:
    mrr: float
    r_at_1: float
    r_at_5: float
    r_at_10: float
    mean_rank: float
    ndcg: float
    repetition_rate: float
    distinct_1: float
    distinct_2: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def rank_from_scores(scores: Sequence[float], gt_index: int, relevance: Sequence[float]) -> RankingResult:
    """Sort by descending score; equal scores keep candidate order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("rank: empty candidate list")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(order)
    for pos, i in enumerate(order):
        ranks[i] = pos + 1
    return RankingResult(scores, order, ranks, ranks[gt_index], list(relevance))


def rank_candidates(
    model: DamModel,
    kb: KnowledgeBase,
    candidates: Sequence[Sequence[int]],
    gt_index: int = 0,
    relevance: Sequence[float] | None = None,
    length_normalize: bool = False,
) -> RankingResult:
    """Rank one round's candidates by teacher-forced log-likelihood."""
    if not candidates:
        raise ValueError("rank_candidates: empty candidate list")
    scores = sequence_scores(model, kb.repeat(len(candidates)), candidates, length_normalize=length_normalize)
    rel = [0.0] * len(candidates) if relevance is None else relevance
    return rank_from_scores(scores, gt_index, rel)


def retrieval_metrics(gt_ranks: Sequence[int]) -> dict[str, float]:
    if len(gt_ranks) == 0:
        raise ValueError("retrieval_metrics: no results")
    ranks = np.asarray(gt_ranks, dtype=np.float64)
    return {
        "mrr": float(np.mean(1.0 / ranks)),
        "r_at_1": float(np.mean(ranks <= 1)),
        "r_at_5": float(np.mean(ranks <= 5)),
        "r_at_10": float(np.mean(ranks <= 10)),
        "mean_rank": float(np.mean(ranks)),
    }


def ndcg(order: Sequence[int], relevance: Sequence[float]) -> float:
    """NDCG truncated at the number of candidates with positive relevance.

    ``order`` lists candidate indices best first.
    """
    rel = np.asarray(relevance, dtype=np.float64)
    if len(order) != len(rel):
        raise ValueError(f"ndcg: ranking of {len(order)} items vs {len(rel)} relevance scores")
    k = int((rel > 0).sum())
    if k == 0:
        raise ValueError("ndcg: relevance has no positive entry")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((rel[np.asarray(order[:k])] * discounts).sum())
    idcg = float((np.sort(rel)[::-1][:k] * discounts).sum())
    return dcg / idcg


def _is_repetitive(tokens: Sequence) -> bool:
    tokens = list(tokens)
    if any(a == b for a, b in zip(tokens, tokens[1:])):
        return True
    bigrams = list(zip(tokens, tokens[1:]))
    return len(set(bigrams)) < len(bigrams)


def repetition_rate(responses: Sequence[Sequence]) -> float:
    """Share of responses with an immediate token repeat or a repeated bigram."""
    if not responses:
        return 0.0
    return sum(_is_repetitive(r) for r in responses) / len(responses)


def distinct_n(responses: Sequence[Sequence], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across responses."""
    if n < 1:
        raise ValueError("distinct_n: n must be >= 1")
    grams = [tuple(r[i : i + n]) for r in responses for i in range(len(r) - n + 1)]
    return len(set(grams)) / len(grams) if grams else 0.0


def decode_examples(
    model: DamModel, examples: Sequence[Example], vocab: Vocabulary, max_len: int = MAX_LEN, batch_size: int = 32
) -> tuple[list[list[int]], list[list[StepTrace]]]:
    responses, traces = [], []
    for chunk in batches(examples, batch_size):
        kb = encode(model, collate(chunk, vocab))
        toks, tr = greedy_decode(model, kb, max_len=max_len)
        responses += toks
        traces += tr
    return responses, traces


def token_accuracy(model: DamModel, examples: Sequence[Example], vocab: Vocabulary, batch_size: int = 32) -> float:
    """Share of teacher-forced answer tokens (end token included) predicted by argmax."""
    hits = total = 0
    for chunk in batches(examples, batch_size):
        b = collate(chunk, vocab)
        h, mask = teacher_forced_hits(model, encode(model, b), b.answers)
        hits += int(h.sum())
        total += int(mask.sum())
    return hits / total


def exact_match(responses: Sequence[Sequence[int]], examples: Sequence[Example], vocab: Vocabulary) -> float:
    """Share of greedy responses identical to the ground-truth answer."""
    if len(responses) != len(examples):
        raise ValueError(f"exact_match: {len(responses)} responses for {len(examples)} examples")
    return sum(list(r) == vocab.encode(ex.answer) for r, ex in zip(responses, examples)) / len(examples)


def rank_examples(
    model: DamModel,
    examples: Sequence[Example],
    vocab: Vocabulary,
    length_normalize: bool = False,
    batch_size: int = 16,
) -> list[RankingResult]:
    """Rank every example's candidates; each round is scored independently."""
    results = []
    for chunk in batches(examples, batch_size):
        kb = encode(model, collate(chunk, vocab))
        rows, seqs = [], []
        for b, ex in enumerate(chunk):
            rows += [b] * len(ex.rnd.candidates)
            seqs += [vocab.encode(c) for c in ex.rnd.candidates]
        scores = sequence_scores(model, kb.select(rows), seqs, length_normalize=length_normalize)
        start = 0
        for ex in chunk:
            n = len(ex.rnd.candidates)
            results.append(rank_from_scores(scores[start : start + n], ex.rnd.gt_index, ex.rnd.relevance))
            start += n
    return results


def metrics_from_rankings(results: Sequence[RankingResult]) -> dict[str, float]:
    out = retrieval_metrics([r.gt_rank for r in results])
    out["ndcg"] = float(np.mean([ndcg(r.order, r.relevance) for r in results]))
    return out


def build_report(rankings: Sequence[RankingResult], responses: Sequence[Sequence[int]]) -> MetricsReport:
    report = MetricsReport(
        **metrics_from_rankings(rankings),
        repetition_rate=repetition_rate(responses),
        distinct_1=distinct_n(responses, 1),
        distinct_2=distinct_n(responses, 2),
    )
    for k, v in report.to_json().items():
        if not math.isfinite(v):
            raise FloatingPointError(f"evaluate: metric {k} is not finite")
    return report


def evaluate(
    model: DamModel,
    dataset: Dataset,
    vocab: Vocabulary,
    length_normalize: bool = False,
    max_len: int = MAX_LEN,
) -> MetricsReport:
    examples = dataset.examples()
    rankings = rank_examples(model, examples, vocab, length_normalize)
    responses, _ = decode_examples(model, examples, vocab, max_len)
    return build_report(rankings, responses)
