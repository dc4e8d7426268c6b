"""SGD and Adam over lists of parameter tensors, plus epoch-level LR schedules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ContractViolation
from .tensor import Tensor


@dataclass(frozen=True)
class LRSchedule:
    """``constant`` or ``halve_every`` (lr halves every ``every`` epochs)."""

    kind: str = "constant"
    every: int = 10

    def __post_init__(self):
        if self.kind not in ("constant", "halve_every"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if self.kind == "halve_every" and self.every < 1:
            raise ConfigError("halve_every needs every >= 1")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        if self.kind == "constant":
            return base_lr
        return base_lr * 0.5 ** (epoch // self.every)

    @classmethod
    def parse(cls, text: str | None) -> "LRSchedule":
        # accepted forms: "constant", "halve_every:10"
        if not text or text == "constant":
            return cls()
        kind, _, k = text.partition(":")
        if kind != "halve_every":
            raise ConfigError(f"unknown lr schedule {text!r}")
        return cls("halve_every", int(k or 10))


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    epoch: int = 0
    base_lr: float = 0.0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not self.base_lr:
            self.base_lr = self.learning_rate


class Optimizer:
    """Updates parameters in place from gradients (Tensors or arrays)."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3,
                 schedule: LRSchedule | None = None, **kw):
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr,
                                    schedule=schedule or LRSchedule(), **kw)
        if kind == "adam":
            self.state.m = [np.zeros_like(p.data) for p in self.params]
            self.state.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    def set_epoch(self, epoch: int) -> None:
        """Apply the schedule; only call at epoch boundaries."""
        st = self.state
        st.epoch = epoch
        st.learning_rate = st.schedule.lr_at(st.base_lr, epoch)
        if not st.learning_rate > 0:
            raise ConfigError("learning rate underflowed to zero")

    def step(self, grads: Sequence) -> None:
        if len(grads) != len(self.params):
            raise ContractViolation(f"{len(grads)} grads for {len(self.params)} params")
        st = self.state
        st.step_count += 1
        lr = st.learning_rate
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ContractViolation(f"grad shape {g.shape} != param shape {p.data.shape}")
            if st.kind == "sgd":
                p.data -= lr * g
                continue
            m, v = st.m[i], st.v[i]
            m *= st.beta1
            m += (1 - st.beta1) * g
            v *= st.beta2
            v += (1 - st.beta2) * g * g
            mhat = m / (1 - st.beta1 ** st.step_count)
            vhat = v / (1 - st.beta2 ** st.step_count)
            p.data -= lr * mhat / (np.sqrt(vhat) + st.eps)


def optimizer_step(opt: Optimizer, grads) -> Optimizer:
    opt.step(grads)
    return opt
