"""Two-level DAM decoder: RSL and WDL branches fused by the Memory Unit.

One decode step, in order:

    r      = LSTM_r(x_prev, s_r)
    n      = LSTM_d([x_prev, K_cur], s_d)
    Q_new  = W_1(sigmoid(W_q[Q_cur, n] + b_q) * [Q_cur, n])      (deliberation)
    K_new  = encoder-specific re-reading of the knowledge base    (deliberation)
    d      = sigmoid(W_a[n, K_new] + b_a) * [n, K_new]            (abandon)
    o      = sigmoid(W_m[r, d] + b_m) * [r, d]                    (memory)
    P      = softmax(w_o o + b_o)

Units that are switched off are replaced by plain concatenation, which gives
the 2LSTM / 2L-M / 2L-DM / 2L-DAM ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import END_ID, START_ID
from .encoders import KnowledgeBase, _att, gate_fusion
from .model import DamModel, UnitConfig
from .recurrent import LstmState, lstm_step

MAX_LEN = 20


@dataclass
class DecoderState:
    s_r: LstmState
    s_d: LstmState
    Q_cur: Tensor
    K_cur: Tensor
    step: int = 0


@dataclass
class StepTrace:
    """Gate activity for one decode step; arrays have a leading batch axis."""

    gate_q: np.ndarray | None
    gate_a: np.ndarray | None
    gate_m: np.ndarray | None
    attention: dict[str, np.ndarray]
    ratio_rsl: np.ndarray | None
    ratio_wdl: np.ndarray | None
    k_cur: np.ndarray
    token: np.ndarray | None = None

    def row(self, b: int) -> "StepTrace":
        def pick(a):
            return None if a is None else a[b]

        return StepTrace(
            pick(self.gate_q), pick(self.gate_a), pick(self.gate_m),
            {k: v[b] for k, v in self.attention.items()},
            pick(self.ratio_rsl), pick(self.ratio_wdl), self.k_cur[b], pick(self.token),
        )


def _units(model: DamModel, config: UnitConfig | None) -> UnitConfig:
    if config is None:
        return model.units
    if config != model.units:
        raise ValueError(f"unit configuration {config.name} does not match model built for {model.units.name}")
    return config


def _token_ids(model: DamModel, x_prev) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(x_prev, dtype=np.int64))
    vocab = model.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id outside vocabulary of size {vocab}")
    return ids


def _rows(param: Tensor, batch: int) -> Tensor:
    # broadcast a learned (H,) vector over the batch, keeping its gradient
    return ad.add(Tensor(np.zeros((batch, param.shape[0]), param.dtype)), param)


def init_state(model: DamModel, kb: KnowledgeBase) -> DecoderState:
    if kb.K.shape[-1] != model.hidden:
        raise ShapeError(f"init_state: knowledge vector shape {kb.K.shape} vs hidden {model.hidden}")
    B = kb.batch
    s_r = LstmState(kb.K, _rows(model["dec.init.c_r"], B))
    s_d = LstmState(_rows(model["dec.init.h_d"], B), _rows(model["dec.init.c_d"], B))
    return DecoderState(s_r, s_d, kb.Q_embed, kb.K, 0)


def rsl_step(model: DamModel, x_prev, s_r: LstmState) -> tuple[Tensor, LstmState]:
    x = ad.embedding(model.decoder_embed(), _token_ids(model, x_prev))
    return lstm_step(x, s_r, model.lstm("dec.lstm_r"))


def wdl_lstm_step(model: DamModel, x_prev, K_prev: Tensor, s_d: LstmState) -> tuple[Tensor, LstmState]:
    x = ad.embedding(model.decoder_embed(), _token_ids(model, x_prev))
    return lstm_step(ad.concat([x, K_prev]), s_d, model.lstm("dec.lstm_d"))


def question_update(model: DamModel, Q_prev: Tensor, n: Tensor) -> tuple[Tensor, Tensor]:
    """Word-guided question update; returns (Q_new, gate)."""
    qn = ad.concat([Q_prev, n])
    gate = ad.sigmoid(ad.linear(qn, model["dec.qgate.W"], model["dec.qgate.b"]))
    return ad.linear(ad.mul(gate, qn), model["dec.qproj.W"]), gate


def deliberate(model: DamModel, kb: KnowledgeBase, Q_new: Tensor) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Re-read the knowledge base under the updated question; returns (K_new, attention weights)."""
    variant = model.config.variant
    if kb.variant != variant:
        raise ValueError(f"deliberate: knowledge base from {kb.variant!r} encoder, decoder built for {variant!r}")
    p = "dec.delib"
    if variant == "lf":
        fused = ad.concat([Q_new, kb.mean("I"), kb.mean("H")])
        return ad.tanh(ad.linear(fused, model[f"{p}.fuse.W"], model[f"{p}.fuse.b"])), {}
    if variant == "mn":
        query = ad.linear(ad.concat([Q_new, kb.mean("I")]), model[f"{p}.query.W"], model[f"{p}.query.b"])
        hist = _att(model, f"{p}.att_h", query, kb.H_utts, kb.bias("H"))
        K_new = ad.tanh(ad.linear(ad.concat([Q_new, hist.summary]), model[f"{p}.fuse.W"], model[f"{p}.fuse.b"]))
        return K_new, {"history": hist.weights.data}
    hist = _att(model, f"{p}.att_h", Q_new, kb.H_utts, kb.bias("H"))
    query, _ = gate_fusion(Q_new, hist.summary, model, f"{p}.qfuse")
    vis = _att(model, f"{p}.att_v", query, kb.I_regions, kb.bias("I"))
    sem = _att(model, f"{p}.att_m", query, kb.M_captions, kb.bias("M"))
    image, _ = gate_fusion(vis.summary, sem.summary, model, f"{p}.ifuse")
    fused = ad.concat([Q_new, hist.summary, image])
    K_new = ad.tanh(ad.linear(fused, model[f"{p}.fuse.W"], model[f"{p}.fuse.b"]))
    return K_new, {"history": hist.weights.data, "visual": vis.weights.data, "semantic": sem.weights.data}


def abandon(model: DamModel, n: Tensor, K_new: Tensor) -> tuple[Tensor, Tensor]:
    """Gate-filter [n, K_new] into the word-level embedding; returns (d, gate)."""
    nk = ad.concat([n, K_new])
    gate = ad.sigmoid(ad.linear(nk, model["dec.abandon.W"], model["dec.abandon.b"]))
    return ad.mul(gate, nk), gate


def memory_fuse(model: DamModel, r: Tensor, d: Tensor) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Gate-fuse [r, d]; returns (o, gate, ratio_rsl, ratio_wdl).

    The ratios are each branch's share of the total gate mass.
    """
    rd = ad.concat([r, d])
    gate = ad.sigmoid(ad.linear(rd, model["dec.memory.W"], model["dec.memory.b"]))
    g = gate.data
    H = r.shape[-1]
    total = g.sum(axis=-1)
    ratio_rsl = g[..., :H].sum(axis=-1) / total
    return ad.mul(gate, rd), gate, ratio_rsl, 1.0 - ratio_rsl


def output_logits(model: DamModel, o: Tensor) -> Tensor:
    return ad.linear(o, model["dec.out.W"], model["dec.out.b"])


def output_distribution(model: DamModel, o: Tensor) -> Tensor:
    return ad.softmax(output_logits(model, o))


def _step(model, x_prev, state: DecoderState, kb: KnowledgeBase, units: UnitConfig):
    r, s_r = rsl_step(model, x_prev, state.s_r)
    n, s_d = wdl_lstm_step(model, x_prev, state.K_cur, state.s_d)
    gate_q = gate_a = gate_m = ratio_rsl = ratio_wdl = None
    attention: dict[str, np.ndarray] = {}
    Q_cur, K_cur = state.Q_cur, state.K_cur
    if units.enable_deliberation:
        Q_cur, gq = question_update(model, Q_cur, n)
        K_cur, attention = deliberate(model, kb, Q_cur)
        gate_q = gq.data
    if units.enable_abandon:
        d, ga = abandon(model, n, K_cur)
        gate_a = ga.data
    else:
        d = ad.concat([n, K_cur])
    if units.enable_memory:
        o, gm, ratio_rsl, ratio_wdl = memory_fuse(model, r, d)
        gate_m = gm.data
    else:
        o = ad.concat([r, n])
    logits = output_logits(model, o)
    trace = StepTrace(gate_q, gate_a, gate_m, attention, ratio_rsl, ratio_wdl, K_cur.data)
    return logits, DecoderState(s_r, s_d, Q_cur, K_cur, state.step + 1), trace


def decode_step(
    model: DamModel, x_prev, state: DecoderState, kb: KnowledgeBase, config: UnitConfig | None = None
) -> tuple[Tensor, DecoderState, StepTrace]:
    logits, new_state, trace = _step(model, x_prev, state, kb, _units(model, config))
    return ad.softmax(logits), new_state, trace


def baseline_init(model: DamModel, kb: KnowledgeBase) -> LstmState:
    return LstmState(kb.K, _rows(model["dec.init.c_r"], kb.batch))


def baseline_step(model: DamModel, x_prev, s_r: LstmState) -> tuple[Tensor, LstmState]:
    """Single-LSTM decoder step: softmax(w_p a + b_p) over the LSTM output a."""
    if "dec.base.W" not in model:
        raise ValueError("baseline_step: model was built without the baseline output layer")
    a, s_r = rsl_step(model, x_prev, s_r)
    return ad.softmax(ad.linear(a, model["dec.base.W"], model["dec.base.b"])), s_r


# ---------------------------------------------------------------------------
# sequence-level entry points


def greedy_decode(
    model: DamModel, kb: KnowledgeBase, config: UnitConfig | None = None, max_len: int = MAX_LEN
) -> tuple[list[list[int]], list[list[StepTrace]]]:
    """Argmax decoding for every row of ``kb`` (ties go to the lowest id).

    Returns per-row token lists (without start/end tokens) and per-row step
    traces; a row's trace includes the step that emitted the end token.
    """
    if max_len < 1:
        raise ValueError("greedy_decode: max_len must be >= 1")
    units = _units(model, config)
    B = kb.batch
    state = init_state(model, kb)
    x = np.full(B, START_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(B)]
    traces: list[list[StepTrace]] = [[] for _ in range(B)]
    for _ in range(max_len):
        logits, state, trace = _step(model, x, state, kb, units)
        x = np.argmax(logits.data, axis=-1)
        trace.token = x
        for b in np.flatnonzero(~done):
            traces[b].append(trace.row(b))
            if x[b] == END_ID:
                done[b] = True
            else:
                tokens[b].append(int(x[b]))
        if done.all():
            break
    return tokens, traces


def _targets(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded (inputs, targets, mask) for teacher forcing; targets end with the end token."""
    lengths = np.array([len(s) + 1 for s in seqs])
    T = int(lengths.max())
    inputs = np.zeros((len(seqs), T), dtype=np.int64)
    targets = np.zeros((len(seqs), T), dtype=np.int64)
    for b, s in enumerate(seqs):
        inputs[b, : len(s) + 1] = [START_ID, *s]
        targets[b, : len(s) + 1] = [*s, END_ID]
    return inputs, targets, np.arange(T)[None, :] < lengths[:, None]


def _teacher_forced(model, kb: KnowledgeBase, seqs: Sequence[Sequence[int]], units: UnitConfig):
    """Log-probabilities of each target (tokens then end) under teacher forcing.

    Returns a (B, T) tensor and the (B, T) validity mask.
    """
    if len(seqs) != kb.batch:
        raise ShapeError(f"{len(seqs)} target sequences for a knowledge base of batch {kb.batch}")
    inputs, targets, mask = _targets(seqs)
    state = init_state(model, kb)
    picked = []
    for t in range(inputs.shape[1]):
        logits, state, _ = _step(model, inputs[:, t], state, kb, units)
        picked.append(ad.pick(ad.log_softmax(logits), targets[:, t]))
    return ad.stack(picked, axis=1), mask


def teacher_forced_hits(
    model: DamModel, kb: KnowledgeBase, seqs: Sequence[Sequence[int]], config: UnitConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Whether the argmax prediction matches each target token under teacher forcing.

    Returns (hits, mask), both (B, T) booleans; the end token counts as a target.
    """
    if len(seqs) != kb.batch:
        raise ShapeError(f"{len(seqs)} target sequences for a knowledge base of batch {kb.batch}")
    units = _units(model, config)
    inputs, targets, mask = _targets(seqs)
    state = init_state(model, kb)
    hits = np.zeros(targets.shape, dtype=bool)
    for t in range(inputs.shape[1]):
        logits, state, _ = _step(model, inputs[:, t], state, kb, units)
        hits[:, t] = np.argmax(logits.data, axis=-1) == targets[:, t]
    return hits & mask, mask


def nll_loss(model: DamModel, kb: KnowledgeBase, gt: Sequence[Sequence[int]], config: UnitConfig | None = None) -> Tensor:
    """Sum over the batch of each example's mean per-token negative log-likelihood."""
    if any(len(s) == 0 for s in gt):
        raise ValueError("nll_loss: empty ground-truth answer")
    logp, mask = _teacher_forced(model, kb, gt, _units(model, config))
    weights = -(mask / mask.sum(axis=1, keepdims=True))
    return ad.total(ad.mul(logp, Tensor(weights.astype(model.dtype))))


def sequence_scores(
    model: DamModel,
    kb: KnowledgeBase,
    seqs: Sequence[Sequence[int]],
    config: UnitConfig | None = None,
    length_normalize: bool = False,
) -> np.ndarray:
    """Teacher-forced log-likelihood of each row's sequence, end token included."""
    logp, mask = _teacher_forced(model, kb, seqs, _units(model, config))
    scores = (logp.data.astype(np.float64) * mask).sum(axis=1)
    if length_normalize:
        scores = scores / mask.sum(axis=1)
    return scores


def score_response(
    model: DamModel, kb: KnowledgeBase, tokens: Sequence[int], config: UnitConfig | None = None,
    length_normalize: bool = False,
) -> float:
    if len(tokens) == 0:
        raise ValueError("score_response: empty response")
    return float(sequence_scores(model, kb, [tokens], config, length_normalize)[0])
