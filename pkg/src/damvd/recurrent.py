"""LSTM cell and the sequence encoders built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, embedding, record
from .autodiff import _sigmoid


@dataclass
class LstmParams:
    """Gate weights stacked in (input, forget, candidate, output) order.

    ``W_x`` is (4H, input_dim), ``W_h`` is (4H, H) and ``b`` holds the four
    bias vectors back to back.
    """

    W_x: Tensor
    W_h: Tensor
    b: Tensor

    def __post_init__(self):
        four_h = self.W_x.shape[0]
        if four_h % 4 or self.W_h.shape != (four_h, four_h // 4) or self.b.shape != (four_h,):
            raise ShapeError(
                f"LstmParams: inconsistent shapes W_x={self.W_x.shape} W_h={self.W_h.shape} b={self.b.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_h.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b}

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float32) -> "LstmParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        W_x = rng.uniform(-bound, bound, size=(4 * hidden_dim, input_dim))
        W_h = rng.uniform(-bound, bound, size=(4 * hidden_dim, hidden_dim))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim : 2 * hidden_dim] = 1.0
        return cls(
            Tensor(W_x.astype(dtype), requires_grad=True),
            Tensor(W_h.astype(dtype), requires_grad=True),
            Tensor(b.astype(dtype), requires_grad=True),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, dtype=np.float64) -> "LstmParams":
        return cls(
            Tensor(np.zeros((4 * hidden_dim, input_dim), dtype), requires_grad=True),
            Tensor(np.zeros((4 * hidden_dim, hidden_dim), dtype), requires_grad=True),
            Tensor(np.zeros(4 * hidden_dim, dtype), requires_grad=True),
        )


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"LstmState: hidden {self.hidden.shape} vs cell {self.cell.shape}")

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None, dtype=np.float32) -> "LstmState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


def lstm_step(x: Tensor, state: LstmState, params: LstmParams, mask=None) -> tuple[Tensor, LstmState]:
    """One LSTM update; returns ``(h', LstmState(h', c'))``.

    Works on a single vector or a (B, dim) batch.  Rows where ``mask`` is
    false keep their previous state unchanged, which is how padded
    sequences are unrolled.
    """
    H = params.hidden_dim
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"lstm_step: input shape {x.shape} does not match W_x shape {params.W_x.shape}")
    if state.hidden.shape[-1] != H or state.hidden.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"lstm_step: state shape {state.hidden.shape} does not match input {x.shape} / hidden {H}")

    out_shape = state.hidden.shape
    xd = x.data.reshape(-1, x.shape[-1])
    hd = state.hidden.data.reshape(-1, H)
    cd = state.cell.data.reshape(-1, H)
    Wx, Wh = params.W_x.data, params.W_h.data

    z = xd @ Wx.T + hd @ Wh.T + params.b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H : 2 * H])
    g = np.tanh(z[:, 2 * H : 3 * H])
    o = _sigmoid(z[:, 3 * H :])
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    keep = None
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1, 1)
        h_new = np.where(keep, h_new, hd)
        c_new = np.where(keep, c_new, cd)

    def backward(gh, gc):
        gh = np.zeros_like(hd) if gh is None else gh.reshape(-1, H)
        gc = np.zeros_like(cd) if gc is None else gc.reshape(-1, H)
        if keep is not None:
            gh_pass = np.where(keep, 0.0, gh)
            gc_pass = np.where(keep, 0.0, gc)
            gh = np.where(keep, gh, 0.0)
            gc = np.where(keep, gc, 0.0)
        gct = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gct * g * i * (1.0 - i),
                gct * cd * f * (1.0 - f),
                gct * i * (1.0 - g * g),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dx = dz @ Wx
        dh = dz @ Wh
        dc = gct * f
        if keep is not None:
            dh = dh + gh_pass
            dc = dc + gc_pass
        return (
            dx.reshape(x.shape),
            dh.reshape(out_shape),
            dc.reshape(out_shape),
            dz.T @ xd,
            dz.T @ hd,
            dz.sum(axis=0),
        )

    h_t, c_t = record(
        "lstm_step",
        (x, state.hidden, state.cell, params.W_x, params.W_h, params.b),
        (h_new.reshape(out_shape), c_new.reshape(out_shape)),
        backward,
    )
    return h_t, LstmState(h_t, c_t)


def encode_sequence(tokens: Sequence[int], table: Tensor, params: LstmParams) -> tuple[Tensor, list[Tensor]]:
    """Unroll an LSTM over one token sequence from the zero state."""
    if len(tokens) == 0:
        raise ValueError("encode_sequence: empty token sequence")
    vocab = table.shape[0]
    for t in tokens:
        if not 0 <= int(t) < vocab:
            raise IndexError(f"encode_sequence: token id {t} outside vocabulary of size {vocab}")
    state = LstmState.zeros(params.hidden_dim, dtype=table.dtype)
    hiddens = []
    for t in tokens:
        h, state = lstm_step(embedding(table, int(t)), state, params)
        hiddens.append(h)
    return hiddens[-1], hiddens


def encode_padded(ids: np.ndarray, lengths: np.ndarray, table: Tensor, params: LstmParams) -> Tensor:
    """Final hidden state for each row of a right-padded (B, T) id matrix."""
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths)
    if ids.ndim != 2 or ids.shape[0] != len(lengths):
        raise ShapeError(f"encode_padded: ids {ids.shape} vs lengths {lengths.shape}")
    if (lengths < 1).any():
        raise ValueError("encode_padded: empty sequence in batch")
    state = LstmState.zeros(params.hidden_dim, batch=ids.shape[0], dtype=table.dtype)
    for step in range(int(lengths.max())):
        active = lengths > step
        _, state = lstm_step(embedding(table, ids[:, step]), state, params, mask=active)
    return state.hidden
