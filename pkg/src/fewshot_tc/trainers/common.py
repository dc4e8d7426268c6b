"""Training configuration, the published ``SourceModel`` and helpers shared by every trainer."""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Mapping

import numpy as np

from .. import numerics as nx
from ..bench.metrics import balanced_accuracy_score
from ..errors import ConfigError
from ..nets import Encoder, Params, _param, cosine_logits, linear_logits

log = logging.getLogger("fewshot_tc.trainers")

METHODS = ("baseline", "baseline_ce", "baseline_lr", "baseline_nn", "rfs_distill",
           "protonet", "relationnet", "maml", "simclr", "simclr_ce", "supcon", "supcon_ce")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob a trainer reads; unused knobs are ignored by the other trainers."""

    method: str = "baseline"
    encoder: str = "cnn2"
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_policy: str = "constant"
    seed: int = 0
    selection: str = "best_val"
    # episodic trainers
    episodes_per_epoch: int = 100
    ways: int = 4
    shots: int = 5
    queries: int = 15
    val_episodes: int = 100
    # MAML
    inner_steps: int = 5
    inner_lr: float = 0.01
    # contrastive
    temperature: float = 0.1
    supervised: bool = False
    class_embedding: bool = False
    # distillation
    distill_alpha: float = 0.5
    distill_temperature: float = 4.0
    # episode fine-tuning of gradient heads
    finetune_steps: int = 100
    finetune_lr: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not self.distill_temperature >= 1:
            raise ConfigError(f"distillation temperature must be >= 1, got "
                              f"{self.distill_temperature}")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise ConfigError(f"distillation alpha must lie in [0, 1], got {self.distill_alpha}")
        if not self.lr > 0 or not self.finetune_lr > 0:
            raise ConfigError("learning rates must be positive")
        if self.inner_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.selection not in ("best_val", "last"):
            raise ConfigError(f"unknown checkpoint selection rule {self.selection!r}")
        nx.LRSchedule.parse(self.lr_policy)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})


def config_hash(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SourceModel:
    """A published, read-only trained trunk plus whatever heads its method produced."""

    encoder: Encoder
    method: str
    config_hash: str
    heads: Mapping[str, Params] = field(default_factory=dict)
    train_classes: tuple = ()
    history: tuple = ()

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    def fingerprint(self) -> bytes:
        return self.encoder.fingerprint()


def _freeze(params: Mapping) -> Params:
    out = {}
    for k, v in params.items():
        t = _param(v.data)
        t.requires_grad = False
        t.data.flags.writeable = False
        out[k] = t
    return out


def publish(encoder: Encoder, method: str, cfg, heads: Mapping[str, Params] | None = None,
            train_classes=(), history=()) -> SourceModel:
    """Copy the trained state into an immutable ``SourceModel``.

    Arrays are marked read-only, so any attempt to update the trunk in place
    (an optimizer step, a training-mode batch-norm refresh) raises.
    """
    enc = encoder.clone()
    for p in enc.params.values():
        p.requires_grad = False
        p.data.flags.writeable = False
    for rm, rv in enc.bn_state.values():
        rm.flags.writeable = False
        rv.flags.writeable = False
    return SourceModel(enc, method, config_hash(cfg),
                       {k: _freeze(v) for k, v in (heads or {}).items()},
                       tuple(int(c) for c in train_classes), tuple(history))


def trainable_copy(encoder: Encoder) -> Encoder:
    """A writable, grad-enabled copy of a (possibly published) encoder."""
    return encoder.clone()


# ---------------------------------------------------------------------------
# small shared pieces
# ---------------------------------------------------------------------------

def derived_rng(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``seed`` and any mix of ints and strings."""
    ints = [int(seed)] + [k if isinstance(k, int) else zlib.crc32(str(k).encode())
                          for k in keys]
    return np.random.default_rng(ints)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def dense_labels(y: np.ndarray, classes) -> np.ndarray:
    lookup = {int(c): i for i, c in enumerate(classes)}
    return np.array([lookup[int(v)] for v in y], dtype=np.int64)


def head_logits(kind: str, head: Params, z):
    if kind == "linear":
        return linear_logits(head, z)
    if kind == "class_embedding":
        return cosine_logits(head, z)
    raise ConfigError(f"{kind!r} is not a gradient-trained head")


def head_predict(kind: str, head: Params, Z: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        return np.argmax(head_logits(kind, head, nx.Tensor(Z)).data, axis=1)


def snapshot(params: Mapping) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def restore(params: Mapping, snap: Mapping) -> None:
    for k, v in params.items():
        v.data = snap[k].copy()


def score(y_true, y_pred, n_classes: int) -> float:
    return balanced_accuracy_score(y_true, y_pred, n_classes)
