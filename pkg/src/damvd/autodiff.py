"""Dense tensors with tape-based reverse-mode differentiation.

Every operation works on numpy arrays whose trailing axis is the feature
axis; any leading axes are treated as batch axes.  Operations executed while
a :class:`Tape` is active, and with at least one input that requires a
gradient, are recorded on that tape.  Outside a tape nothing is recorded,
which is how inference and finite-difference probes run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """An immutable array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[..., Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; nesting is allowed and only the innermost
    tape records.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(op: str, inputs: Sequence[Tensor], out_arrays: Sequence[np.ndarray], backward) -> tuple[Tensor, ...]:
    """Wrap forward results as tensors and record the op on the active tape.

    ``backward`` receives one upstream gradient per output (``None`` for
    outputs that received no gradient) and returns one gradient per input.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(a, requires_grad=track) for a in out_arrays)
    if track:
        tape.nodes.append(Node(tuple(inputs), outs, backward, op))
    return outs


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# primitives


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` applied over the trailing axis of ``x``."""
    if W.data.ndim != 2 or x.shape[-1:] != W.shape[1:]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != W.shape[:1]:
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    xd, Wd = x.data, W.data

    def backward(g):
        gx = g @ Wd
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return record("linear", inputs, (out,), backward)[0]


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", (x,), (s,), lambda g: (g * s * (1.0 - s),))[0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh identity; never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record("tanh", (x,), (t,), lambda g: (g * (1.0 - t * t),))[0]


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record("log", (x,), (np.log(xd),), lambda g: (g / xd,))[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return record(
        "add", (a, b), (a.data + b.data,), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )[0]


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return record(
        "sub", (a, b), (a.data - b.data,), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )[0]


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record(
        "mul",
        (a, b),
        (ad * bd,),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )[0]


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", (x,), (x.data * c,), lambda g: (g * c,))[0]


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; all other axes must agree."""
    if not tensors:
        raise ShapeError("concat: no operands")
    ax = axis % tensors[0].data.ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record("concat", tuple(tensors), (out,), lambda g: tuple(np.split(g, bounds, axis=ax)))[0]


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> tuple[Tensor, ...]:
    """Inverse of :func:`concat`."""
    ax = axis % x.data.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]}")
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(x.data, bounds, axis=ax)

    def backward(*gs):
        full = [np.zeros_like(p) if gi is None else gi for p, gi in zip(parts, gs)]
        return (np.concatenate(full, axis=ax),)

    return record("split", (x,), parts, backward)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", (z,), (s,), backward)[0]


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (z,), (out,), backward)[0]


def take(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` along axis 0 for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range [0, {n})")
    out = x.data[idx]
    row_shape = x.shape[1:]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape((-1,) + row_shape))
        return (gx,)

    return record("take", (x,), (out,), backward)[0]


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of a (vocab, dim) table."""
    try:
        return take(table, ids)
    except IndexError:
        raise IndexError(f"embedding: token id out of range [0, {table.shape[0]})") from None


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record("reshape", (x,), (x.data.reshape(shape),), lambda g: (g.reshape(src),))[0]


def pick(x: Tensor, ids) -> Tensor:
    """Select ``x[..., ids]`` per row: (B, V) with (B,) ids gives (B,)."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return record("pick", (x,), (out,), backward)[0]


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = x.shape
    return record("sum", (x,), (np.asarray(x.data.sum()),), lambda g: (np.broadcast_to(g, shape).copy(),))[0]


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Contract (B, n) weights with (B, n, d) values into (B, d)."""
    if weights.shape != values.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    w, v = weights.data, values.data
    out = np.einsum("bn,bnd->bd", w, v)

    def backward(g):
        return np.einsum("bd,bnd->bn", g, v), w[..., None] * g[:, None, :]

    return record("weighted_sum", (weights, values), (out,), backward)[0]


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("stack: no operands")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: shapes {ref} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record(
        "stack", tuple(tensors), (out,), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )[0]


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Row selection: ``a`` where ``mask`` is true, else ``b``; mask shape (B,)."""
    if a.shape != b.shape:
        raise ShapeError(f"where: shapes {a.shape} and {b.shape} differ")
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.data.ndim - 1))
    out = np.where(m, a.data, b.data)
    return record("where", (a, b), (out,), lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))[0]


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor on ``tape`` that ``loss`` depends on.

    Gradients add into any existing ``.grad``; call ``zero_grad`` between
    steps.  Nodes are visited in exact reverse tape order, so accumulation
    order (and hence the floating-point result) is fixed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        upstream = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in upstream):
            continue
        if len(upstream) == 1:
            in_grads = node.backward(upstream[0])
        else:
            in_grads = node.backward(*upstream)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                seen[key] = t
    for key, t in seen.items():
        g = np.asarray(grads[key], dtype=t.data.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name:<40s} {err:.3e}  ({self.checked[name]} entries) {flag}")
        return out


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and must read the current contents of
    ``params``.  Entries are perturbed in place and restored.  With
    ``max_entries`` set, that many entries per tensor are sampled
    (seeded); otherwise every entry is probed.

    The error per tensor is ``max|analytic - numeric|`` over the probed
    entries divided by ``max(max|analytic|, max|numeric|, 1e-8)``.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
    if not math.isfinite(loss.item()):
        raise FloatingPointError("finite_diff_check: function value is not finite")
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        a = analytic.reshape(-1)[idx]
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"finite_diff_check: non-finite value perturbing {name}")
            num[k] = (fp - fm) / (2.0 * step)
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        errors[name] = float(np.abs(a - num).max(initial=0.0) / denom)
        checked[name] = len(idx)
    return GradCheckReport(errors, tolerance, checked)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
