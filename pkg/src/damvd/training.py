"""Teacher-forced maximum-likelihood training, Adam with cosine annealing, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, Example, Vocabulary, build_vocab
from .decoder import nll_loss
from .encoders import collate, encode
from .model import DamModel, ModelConfig, UnitConfig

log = logging.getLogger(__name__)

CKPT_SCHEMA = "dam-ckpt/1"


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    lr_init: float = 1e-3
    lr_final: float = 3.4e-4
    grad_clip_norm: float = 5.0
    seed: int = 1
    hidden: int = 64
    embed_dim: int = 64
    variant: str = "dualvd"
    units: str = "2l-dam"
    min_freq: int = 0
    share_embedding: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("TrainConfig: batch_size must be >= 1")
        if self.lr_final > self.lr_init:
            raise ValueError("TrainConfig: lr_final must not exceed lr_init")
        UnitConfig.named(self.units)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale settings (hidden 512, 16 epochs, batch 15, min_freq 5)."""
        base = dict(epochs=16, batch_size=15, hidden=512, embed_dim=300, min_freq=5)
        base.update(overrides)
        return cls(**base)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size, self.embed_dim, self.hidden, self.variant, self.units,
            share_embedding=self.share_embedding,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState, lr: float
) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step: gradient shape {g.shape} for {name} with shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(grads: Mapping[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    present = [g for g in grads.values() if g is not None]
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in present))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in present:
            g *= scale
    return norm


def batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]


def dataset_loss(model: DamModel, examples: Sequence[Example], vocab: Vocabulary, batch_size: int = 32) -> float:
    """Mean per-example teacher-forced loss, no gradients."""
    total = 0.0
    for chunk in batches(examples, batch_size):
        b = collate(chunk, vocab)
        total += nll_loss(model, encode(model, b), b.answers).item()
    return total / len(examples)


def train(
    dataset: Dataset,
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[DamModel, list[float], Vocabulary]:
    """Train a fresh model; returns (model, per-epoch mean loss, vocabulary).

    The loss log records, per epoch, the mean over examples of each
    example's per-token negative log-likelihood during that epoch.
    """
    examples = dataset.examples()
    if not examples:
        raise ValueError("train: empty dataset")
    vocab = vocab or build_vocab(dataset, config.min_freq)
    model = DamModel.init(config.model_config(len(vocab)), seed=config.seed)
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * per_epoch
    state = AdamState()
    losses = []
    step = 0
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for chunk in batches(examples, config.batch_size, rng):
            b = collate(chunk, vocab)
            with ad.Tape() as tape:
                loss = nll_loss(model, encode(model, b), b.answers)
            model.zero_grad()
            ad.backward(tape, loss)
            grads = {k: p.grad for k, p in model.params.items()}
            clip_grad_norm(grads, config.grad_clip_norm)
            adam_step(model.params, grads, state, cosine_lr(step, total_steps, config.lr_init, config.lr_final))
            step += 1
            epoch_loss += loss.item()
        losses.append(epoch_loss / len(examples))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
    model.zero_grad()
    return model, losses, vocab


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> list[float]:
    # float32 values go through their shortest float32 decimal
    if a.dtype == np.float32:
        return [float(s) for s in a.ravel().astype(str)]
    return a.ravel().tolist()


def save_checkpoint(
    path: str | Path, model: DamModel, vocab: Vocabulary, train_config: TrainConfig | None = None,
    extra: dict | None = None,
) -> None:
    obj = {
        "schema": CKPT_SCHEMA,
        "config": {
            "model": model.config.to_json(),
            "train": None if train_config is None else train_config.to_json(),
            "dtype": str(model.dtype),
            **(extra or {}),
        },
        "vocab": vocab.to_json(),
        "tensors": {k: {"shape": list(p.shape), "data": _encode_array(p.data)} for k, p in model.params.items()},
    }
    Path(path).write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[DamModel, Vocabulary, dict]:
    """Restore (model, vocab, stored config).

    If ``config`` is given the tensors must fit it exactly, otherwise the
    stored model configuration is used.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(obj, dict) or obj.get("schema") != CKPT_SCHEMA:
        found = obj.get("schema") if isinstance(obj, dict) else None
        raise CheckpointError(f"{path}: unsupported checkpoint schema {found!r} (expected {CKPT_SCHEMA!r})")
    try:
        stored = obj["config"]
        mcfg = config or ModelConfig(**stored["model"])
        dtype = np.dtype(stored.get("dtype", "float32"))
        tensors = {}
        for name, t in obj["tensors"].items():
            arr = np.asarray(t["data"], dtype=dtype)
            shape = tuple(t["shape"])
            if arr.size != math.prod(shape):
                raise CheckpointError(f"{path}: tensor {name!r} has {arr.size} values for shape {shape}")
            tensors[name] = Tensor(arr.reshape(shape), requires_grad=True)
        vocab = Vocabulary.from_json(obj["vocab"])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing field {e.args[0]!r}") from None
    try:
        model = DamModel(mcfg, tensors)
    except ValueError as e:
        raise CheckpointError(f"{path}: tensor-shape mismatch against configuration: {e}") from None
    return model, vocab, stored
