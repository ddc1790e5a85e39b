"""Simplified LF, MN and DualVD encoders producing a :class:`KnowledgeBase`.

Everything is batched: per-example lists (history utterances, image regions,
captions) are padded into (B, n, H) tensors with boolean masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import Example, Vocabulary
from .model import DamModel
from .recurrent import encode_padded

_MASK_FILL = -1e9


@dataclass
class AttentionResult:
    weights: Tensor
    summary: Tensor


@dataclass
class KnowledgeBase:
    """Encoder output for a batch of B examples.

    ``H_utts`` has the caption as utterance 0.  ``M_captions`` is only
    populated by the DualVD encoder.
    """

    K: Tensor
    Q_embed: Tensor
    H_utts: Tensor
    H_mask: np.ndarray
    I_regions: Tensor
    I_mask: np.ndarray
    M_captions: Tensor | None
    M_mask: np.ndarray | None
    variant: str
    attention: dict[str, np.ndarray] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def batch(self) -> int:
        return self.K.shape[0]

    @property
    def hidden(self) -> int:
        return self.K.shape[-1]

    def _mask(self, kind: str) -> np.ndarray:
        return {"H": self.H_mask, "I": self.I_mask, "M": self.M_mask}[kind]

    def bias(self, kind: str) -> Tensor | None:
        """Additive score mask for attention over ``kind`` (None if nothing is padded)."""
        key = ("bias", kind)
        if key not in self._cache:
            mask = self._mask(kind)
            self._cache[key] = None if mask.all() else Tensor(np.where(mask, 0.0, _MASK_FILL).astype(self.K.dtype))
        return self._cache[key]

    def mean(self, kind: str) -> Tensor:
        key = ("mean", kind)
        if key not in self._cache:
            values = {"H": self.H_utts, "I": self.I_regions, "M": self.M_captions}[kind]
            mask = self._mask(kind).astype(self.K.dtype)
            self._cache[key] = ad.weighted_sum(Tensor(mask / mask.sum(axis=1, keepdims=True)), values)
        return self._cache[key]

    def repeat(self, n: int) -> "KnowledgeBase":
        """Tile a single-example knowledge base ``n`` times (inference only)."""
        if self.batch != 1:
            raise ValueError("KnowledgeBase.repeat: only single-example knowledge bases can be tiled")

        def rep(t):
            return None if t is None else Tensor(np.repeat(t.data, n, axis=0))

        def rep_mask(m):
            return None if m is None else np.repeat(m, n, axis=0)

        return KnowledgeBase(
            rep(self.K), rep(self.Q_embed), rep(self.H_utts), rep_mask(self.H_mask),
            rep(self.I_regions), rep_mask(self.I_mask), rep(self.M_captions), rep_mask(self.M_mask),
            self.variant,
        )

    def select(self, rows: Sequence[int]) -> "KnowledgeBase":
        """Sub-batch of rows (inference only)."""
        idx = np.asarray(rows)

        def sel(t):
            return None if t is None else Tensor(t.data[idx])

        def sel_mask(m):
            return None if m is None else m[idx]

        return KnowledgeBase(
            sel(self.K), sel(self.Q_embed), sel(self.H_utts), sel_mask(self.H_mask),
            sel(self.I_regions), sel_mask(self.I_mask), sel(self.M_captions), sel_mask(self.M_mask),
            self.variant,
        )


def attend(query: Tensor, keys, w: Tensor, b: Tensor | None = None, bias: Tensor | None = None) -> AttentionResult:
    """Softmax attention with scores ``w . (query * key_i) + b``.

    ``keys`` is a (B, n, H) tensor for a (B, H) query, or a list of (H,)
    tensors for a single (H,) query.  ``w`` is (1, H).  ``bias`` is an
    additive (B, n) score mask for padded keys.
    """
    single = isinstance(keys, (list, tuple))
    if single:
        if not keys:
            raise ValueError("attend: empty key list")
        keys = ad.reshape(ad.stack(list(keys), axis=0), (1, len(keys), query.shape[-1]))
        query = ad.reshape(query, (1, query.shape[-1]))
    B, n, H = keys.shape
    if n == 0:
        raise ValueError("attend: empty key list")
    if query.shape != (B, H):
        raise ShapeError(f"attend: query shape {query.shape} does not match keys {keys.shape}")
    prod = ad.mul(keys, ad.reshape(query, (B, 1, H)))
    scores = ad.reshape(ad.linear(prod, w, b), (B, n))
    if bias is not None:
        scores = ad.add(scores, bias)
    weights = ad.softmax(scores)
    summary = ad.weighted_sum(weights, keys)
    if single:
        return AttentionResult(ad.reshape(weights, (n,)), ad.reshape(summary, (H,)))
    return AttentionResult(weights, summary)


def gate_fusion(a: Tensor, b: Tensor, model: DamModel, prefix: str) -> tuple[Tensor, Tensor]:
    """``proj(sigmoid(W[a, b] + c) * [a, b])``; returns (fused, gate)."""
    ab = ad.concat([a, b])
    gate = ad.sigmoid(ad.linear(ab, model[f"{prefix}.gate.W"], model[f"{prefix}.gate.b"]))
    fused = ad.linear(ad.mul(gate, ab), model[f"{prefix}.proj.W"], model[f"{prefix}.proj.b"])
    return fused, gate


def _att(model: DamModel, prefix: str, query: Tensor, keys: Tensor, bias) -> AttentionResult:
    return attend(query, keys, model[f"{prefix}.W"], None, bias)


# ---------------------------------------------------------------------------
# batching


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.zeros((len(seqs), max(int(lengths.max()), 1)), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _index_groups(groups: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Map consecutive groups of flat rows to a padded (B, n_max) index + mask."""
    n_max = max(groups)
    index = np.zeros((len(groups), n_max), dtype=np.int64)
    mask = np.zeros((len(groups), n_max), dtype=bool)
    start = 0
    for b, n in enumerate(groups):
        index[b, :n] = np.arange(start, start + n)
        mask[b, :n] = True
        start += n
    return index, mask


@dataclass
class Batch:
    examples: list[Example]
    q_ids: np.ndarray
    q_len: np.ndarray
    utt_ids: np.ndarray
    utt_len: np.ndarray
    h_index: np.ndarray
    h_mask: np.ndarray
    regions: np.ndarray
    i_mask: np.ndarray
    cap_ids: np.ndarray
    cap_len: np.ndarray
    m_index: np.ndarray
    m_mask: np.ndarray
    answers: list[list[int]]

    def __len__(self) -> int:
        return len(self.examples)


def collate(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    if not examples:
        raise ValueError("collate: empty batch")
    questions, utts, groups, caps, cap_groups = [], [], [], [], []
    for ex in examples:
        if not ex.question:
            raise ValueError(f"encode: empty question (dialogue {ex.dialogue}, round {ex.round})")
        if not ex.image.regions:
            raise ValueError(f"encode: image {ex.image.id} has no regions")
        questions.append(vocab.encode(ex.question))
        history = [h for h in ex.history if h]
        utts += [vocab.encode(h) for h in history]
        groups.append(len(history))
        captions = [c for c in ex.image.captions if c]
        caps += [vocab.encode(c) for c in captions]
        cap_groups.append(len(captions))
    if min(groups) == 0:
        raise ValueError("encode: empty dialogue history")
    q_ids, q_len = _pad(questions)
    utt_ids, utt_len = _pad(utts)
    h_index, h_mask = _index_groups(groups)
    if min(cap_groups) == 0:
        cap_ids, cap_len = np.zeros((0, 1), np.int64), np.zeros(0, np.int64)
        m_index = m_mask = None
    else:
        cap_ids, cap_len = _pad(caps)
        m_index, m_mask = _index_groups(cap_groups)
    n_reg = max(len(ex.image.regions) for ex in examples)
    dim = len(examples[0].image.regions[0])
    regions = np.zeros((len(examples), n_reg, dim))
    i_mask = np.zeros((len(examples), n_reg), dtype=bool)
    for b, ex in enumerate(examples):
        regions[b, : len(ex.image.regions)] = ex.image.regions
        i_mask[b, : len(ex.image.regions)] = True
    answers = [vocab.encode(ex.answer) for ex in examples]
    return Batch(
        list(examples), q_ids, q_len, utt_ids, utt_len, h_index, h_mask,
        regions, i_mask, cap_ids, cap_len, m_index, m_mask, answers,
    )


# ---------------------------------------------------------------------------
# encoders


def _encode_inputs(model: DamModel, batch: Batch, with_captions: bool) -> KnowledgeBase:
    embed = model["embed"]
    q = encode_padded(batch.q_ids, batch.q_len, embed, model.lstm("enc.q_lstm"))
    h_lstm = model.lstm("enc.h_lstm")
    utt = encode_padded(batch.utt_ids, batch.utt_len, embed, h_lstm)
    H_utts = ad.take(utt, batch.h_index)
    regions = Tensor(batch.regions.astype(model.dtype))
    I = ad.tanh(ad.linear(regions, model["enc.region.W"], model["enc.region.b"]))
    M = M_mask = None
    if with_captions:
        if batch.m_index is None:
            raise ValueError("encode_dualvd: every image needs at least one caption")
        cap = encode_padded(batch.cap_ids, batch.cap_len, embed, h_lstm)
        M = ad.take(cap, batch.m_index)
        M_mask = batch.m_mask
    return KnowledgeBase(q, q, H_utts, batch.h_mask, I, batch.i_mask, M, M_mask, model.config.variant)


def _finish(kb: KnowledgeBase, K: Tensor, variant: str) -> KnowledgeBase:
    kb.K = K
    kb.variant = variant
    return kb


def encode_lf(model: DamModel, batch: Batch) -> KnowledgeBase:
    kb = _encode_inputs(model, batch, with_captions=False)
    fused = ad.concat([kb.Q_embed, kb.mean("I"), kb.mean("H")])
    K = ad.tanh(ad.linear(fused, model["enc.fuse.W"], model["enc.fuse.b"]))
    return _finish(kb, K, "lf")


def encode_mn(model: DamModel, batch: Batch) -> KnowledgeBase:
    kb = _encode_inputs(model, batch, with_captions=False)
    query = ad.linear(ad.concat([kb.Q_embed, kb.mean("I")]), model["enc.query.W"], model["enc.query.b"])
    att = _att(model, "enc.att_h", query, kb.H_utts, kb.bias("H"))
    kb.attention["history"] = att.weights.data
    return _finish(kb, ad.add(query, att.summary), "mn")


def encode_dualvd(model: DamModel, batch: Batch) -> KnowledgeBase:
    kb = _encode_inputs(model, batch, with_captions=True)
    hist = _att(model, "enc.att_h", kb.Q_embed, kb.H_utts, kb.bias("H"))
    query, _ = gate_fusion(kb.Q_embed, hist.summary, model, "enc.qfuse")
    vis = _att(model, "enc.att_v", query, kb.I_regions, kb.bias("I"))
    sem = _att(model, "enc.att_m", query, kb.M_captions, kb.bias("M"))
    image, _ = gate_fusion(vis.summary, sem.summary, model, "enc.ifuse")
    K = ad.tanh(ad.linear(ad.concat([kb.Q_embed, hist.summary, image]), model["enc.fuse.W"], model["enc.fuse.b"]))
    kb.attention.update(history=hist.weights.data, visual=vis.weights.data, semantic=sem.weights.data)
    return _finish(kb, K, "dualvd")


ENCODERS = {"lf": encode_lf, "mn": encode_mn, "dualvd": encode_dualvd}


def encode(model: DamModel, batch: Batch) -> KnowledgeBase:
    return ENCODERS[model.config.variant](model, batch)
