"""Adam with coupled L2 weight decay and per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor

PRETRAIN_LR = 1e-4
CLASSIFICATION_LR = 1e-4
COMPRESSION_LR = 1e-5


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("adam.lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("adam.eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("adam.weight_decay must be >= 0")


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    config: AdamConfig
    # ids of parameters that receive weight decay; None means all of them
    decay: set[int] | None = None


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(groups: list[ParamGroup], state: AdamState) -> None:
    """One in-place Adam update of every parameter in ``groups``."""
    for group in groups:
        for p in group.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or id(p)} has no gradient")
    state.t += 1
    t = state.t
    for group in groups:
        c = group.config
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for p in group.params:
            key = id(p)
            g = p.grad
            if c.weight_decay and (group.decay is None or key in group.decay):
                g = g + c.weight_decay * p.data
            m = state.m.get(key)
            if m is None:
                m = state.m[key] = np.zeros_like(p.data)
                state.v[key] = np.zeros_like(p.data)
            v = state.v[key]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _decays(name: str) -> bool:
    return name.endswith(".weight") or name.endswith(".gamma")


def make_groups(
    compression: dict[str, Tensor] | None,
    classification: dict[str, Tensor] | None = None,
    mode: str = "finetune",
    base: AdamConfig = AdamConfig(),
    pretrain_decay: bool = False,
) -> list[ParamGroup]:
    """Partition named parameters into optimizer groups.

    ``finetune`` gives two groups (compression at 1e-5, classification at
    1e-4); ``pretrain`` gives a single compression group at 1e-4 with weight
    decay disabled unless ``pretrain_decay`` is set.
    """
    compression = compression or {}
    classification = classification or {}
    if not compression and not classification:
        raise ContractError("no parameters to optimize")
    seen = set()
    for named in (compression, classification):
        for n, p in named.items():
            if id(p) in seen:
                raise ContractError(f"parameter {n} assigned to more than one group")
            seen.add(id(p))

    def group(name, named, lr, decay_on=True):
        cfg = replace(base, lr=lr, weight_decay=base.weight_decay if decay_on else 0.0)
        return ParamGroup(
            name=name,
            params=list(named.values()),
            config=cfg,
            decay={id(p) for n, p in named.items() if _decays(n)},
        )

    if mode == "pretrain":
        if classification:
            raise ContractError("pretraining optimizes the compression part only")
        return [group("compression", compression, PRETRAIN_LR, pretrain_decay)]
    if mode != "finetune":
        raise ConfigError(f"unknown optimizer mode {mode!r}")
    if not compression or not classification:
        raise ContractError("fine-tuning needs both compression and classification parameters")
    return [
        group("compression", compression, COMPRESSION_LR),
        group("classification", classification, CLASSIFICATION_LR),
    ]
