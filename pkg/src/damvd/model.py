"""Model configuration and the named parameter store shared by encoder and decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .data import REGION_DIM
from .recurrent import LstmParams

VARIANTS = ("lf", "mn", "dualvd")


@dataclass(frozen=True)
class UnitConfig:
    """Which decoder units are switched on.

    The units nest: Abandon needs Deliberation, which needs Memory.
    """

    enable_memory: bool = True
    enable_deliberation: bool = True
    enable_abandon: bool = True

    def __post_init__(self):
        if self.enable_abandon and not self.enable_deliberation:
            raise ValueError("UnitConfig: abandon requires deliberation")
        if self.enable_deliberation and not self.enable_memory:
            raise ValueError("UnitConfig: deliberation requires memory")

    @classmethod
    def named(cls, name: str) -> "UnitConfig":
        try:
            return cls(*_LADDER[name.lower()])
        except KeyError:
            raise ValueError(f"unknown unit configuration {name!r}; expected one of {sorted(_LADDER)}") from None

    @property
    def name(self) -> str:
        flags = (self.enable_memory, self.enable_deliberation, self.enable_abandon)
        return next(k for k, v in _LADDER.items() if v == flags)


_LADDER = {
    "2lstm": (False, False, False),
    "2l-m": (True, False, False),
    "2l-dm": (True, True, False),
    "2l-dam": (True, True, True),
}
UNIT_NAMES = tuple(_LADDER)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden: int = 64
    variant: str = "dualvd"
    units: str = "2l-dam"
    region_dim: int = REGION_DIM
    share_embedding: bool = True
    baseline: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        UnitConfig.named(self.units)

    @property
    def unit_config(self) -> UnitConfig:
        return UnitConfig.named(self.units)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _linear_init(rng, out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor the configuration needs, in canonical order."""
    V, E, H, R = cfg.vocab_size, cfg.embed_dim, cfg.hidden, cfg.region_dim
    units = cfg.unit_config
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, E)}

    def lstm(prefix, in_dim):
        shapes[f"{prefix}.W_x"] = (4 * H, in_dim)
        shapes[f"{prefix}.W_h"] = (4 * H, H)
        shapes[f"{prefix}.b"] = (4 * H,)

    def lin(prefix, out_dim, in_dim, bias=True):
        shapes[f"{prefix}.W"] = (out_dim, in_dim)
        if bias:
            shapes[f"{prefix}.b"] = (out_dim,)

    def att(prefix):
        # no score bias: softmax is shift-invariant, so it would be inert
        lin(prefix, 1, H, bias=False)

    def gate_fusion(prefix):
        lin(f"{prefix}.gate", 2 * H, 2 * H)
        lin(f"{prefix}.proj", H, 2 * H)

    def variant_block(prefix):
        if cfg.variant == "lf":
            lin(f"{prefix}.fuse", H, 3 * H)
        elif cfg.variant == "mn":
            lin(f"{prefix}.query", H, 2 * H)
            att(f"{prefix}.att_h")
            if prefix.startswith("dec"):
                lin(f"{prefix}.fuse", H, 2 * H)
        else:
            att(f"{prefix}.att_h")
            gate_fusion(f"{prefix}.qfuse")
            att(f"{prefix}.att_v")
            att(f"{prefix}.att_m")
            gate_fusion(f"{prefix}.ifuse")
            lin(f"{prefix}.fuse", H, 3 * H)

    lstm("enc.q_lstm", E)
    lstm("enc.h_lstm", E)
    lin("enc.region", H, R)
    variant_block("enc")

    if not cfg.share_embedding:
        shapes["dec.embed"] = (V, E)
    lstm("dec.lstm_r", E)
    lstm("dec.lstm_d", E + H)
    shapes["dec.init.c_r"] = (H,)
    shapes["dec.init.h_d"] = (H,)
    shapes["dec.init.c_d"] = (H,)
    if units.enable_deliberation:
        lin("dec.qgate", 2 * H, 2 * H)
        lin("dec.qproj", H, 2 * H, bias=False)
        variant_block("dec.delib")
    if units.enable_abandon:
        lin("dec.abandon", 2 * H, 2 * H)
    if units.enable_memory:
        lin("dec.memory", 3 * H, 3 * H)
        lin("dec.out", V, 3 * H)
    else:
        lin("dec.out", V, 2 * H)
    if cfg.baseline:
        lin("dec.base", V, H)
    return shapes


class DamModel:
    """Encoder plus DAM decoder parameters under one flat, ordered namespace."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        missing = [k for k in expected if k not in params]
        extra = [k for k in params if k not in expected]
        if missing or extra:
            raise ValueError(f"DamModel: parameter set mismatch (missing={missing}, unexpected={extra})")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"DamModel: tensor {k!r} has shape {params[k].shape}, config needs {shape}")
        self.config = config
        self.params = {k: params[k] for k in expected}
        for k, p in self.params.items():
            p.name = k

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "DamModel":
        rng = np.random.default_rng(seed)
        H = config.hidden
        params = {}
        for name, shape in param_shapes(config).items():
            if name in params:
                continue
            if name.endswith(".W_x"):
                prefix = name[: -len(".W_x")]
                lp = LstmParams.init(shape[1], H, rng, dtype)
                params.update({f"{prefix}.{k}": t for k, t in lp.tensors().items()})
                continue
            if name in ("embed", "dec.embed"):
                arr = rng.normal(0.0, 0.1, size=shape)
            elif name.startswith("dec.init."):
                arr = rng.uniform(-1.0 / np.sqrt(H), 1.0 / np.sqrt(H), size=shape)
            elif name.endswith(".W"):
                arr = _linear_init(rng, *shape)[0]
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["embed"].dtype

    @property
    def hidden(self) -> int:
        return self.config.hidden

    @property
    def units(self) -> UnitConfig:
        return self.config.unit_config

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def lstm(self, prefix: str) -> LstmParams:
        return LstmParams(self.params[f"{prefix}.W_x"], self.params[f"{prefix}.W_h"], self.params[f"{prefix}.b"])

    def decoder_embed(self) -> Tensor:
        return self.params["embed"] if self.config.share_embedding else self.params["dec.embed"]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def astype(self, dtype) -> "DamModel":
        return DamModel(
            self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        )

    def copy(self) -> "DamModel":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def with_units(self, units: str) -> "DamModel":
        """Same weights under another unit configuration (shapes must agree)."""
        return DamModel(dataclasses.replace(self.config, units=units), self.params)
