"""Stochastic packet-series views for contrastive training.

All transforms act on one P x F matrix (packets x features) and never see
the label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ORDER = ("hflip", "shuffle", "tail_occlude", "gauss_noise")


def hflip(x: np.ndarray) -> np.ndarray:
    """Reverse packet order."""
    return np.asarray(x)[::-1].copy()


def shuffle(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rows permuted uniformly at random."""
    x = np.asarray(x)
    return x[rng.permutation(len(x))]


def tail_occlude(x: np.ndarray) -> np.ndarray:
    """Zero the last floor(P/2) packets."""
    out = np.array(x, dtype=np.float64, copy=True)
    p = len(out)
    out[p - p // 2:] = 0.0
    return out


def gauss_noise(x: np.ndarray, rng: np.random.Generator, skip_columns=()) -> np.ndarray:
    """Add N(0, 1) to every entry (padding included)."""
    out = np.asarray(x, dtype=np.float64) + rng.standard_normal(np.shape(x))
    if skip_columns:
        cols = list(skip_columns)
        out[..., cols] = np.asarray(x)[..., cols]
    return out


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_shuffle: float = 0.5
    p_tail_occlude: float = 0.5
    p_gauss_noise: float = 0.5
    noise_on_direction: bool = True
    direction_column: int = 1

    def __post_init__(self):
        for name in ORDER:
            p = getattr(self, f"p_{name}")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_{name}={p} outside [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0)


def random_view(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply each transform independently with its probability, in fixed order."""
    out = np.array(x, dtype=np.float64, copy=True)
    if rng.random() < policy.p_hflip:
        out = hflip(out)
    if rng.random() < policy.p_shuffle:
        out = shuffle(out, rng)
    if rng.random() < policy.p_tail_occlude:
        out = tail_occlude(out)
    if rng.random() < policy.p_gauss_noise:
        skip = ()
        if not policy.noise_on_direction and out.shape[-1] > policy.direction_column:
            skip = (policy.direction_column,)
        out = gauss_noise(out, rng, skip)
    return out


def random_views(X: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One independent view per sample of a (B, P, F) batch."""
    return np.stack([random_view(x, policy, rng) for x in X]) if len(X) else np.asarray(X)
