"""Contrastive (InfoNCE / supervised) and self-distillation losses."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .. import numerics as nx
from ..errors import ConfigError, ContractViolation
from ..numerics import Tensor


@lru_cache(maxsize=64)
def _off_diagonal(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of an n x n matrix with its diagonal removed, as (n, n-1)."""
    cols = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.intp)
    rows = np.repeat(np.arange(n), n - 1).reshape(n, n - 1)
    return rows, cols


def supcon_loss(z: Tensor, labels, temperature: float = 0.1) -> Tensor:
    """Supervised contrastive loss over a batch of (2B, k) projected views.

    Every other view carrying the anchor's label is a positive; anchors
    without positives are skipped and the result is the mean over the rest.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = nx.as_tensor(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    if z.ndim != 2 or labels.shape != (n,):
        raise ContractViolation(f"contrastive loss: views {z.shape} vs labels {labels.shape}")
    if n < 2:
        raise ContractViolation("contrastive loss needs at least two views")
    zn = nx.l2_normalize(z, axis=1)
    sim = nx.scale(nx.matmul(zn, nx.transpose(zn)), 1.0 / temperature)
    rows, cols = _off_diagonal(n)
    logp = nx.log_softmax(nx.getitem(sim, (rows, cols)), axis=1)      # (n, n-1)
    pos = (labels[rows] == labels[cols]).astype(np.float64)
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    if not active.any():
        raise ContractViolation("contrastive loss: no anchor has a positive")
    weights = np.zeros_like(pos)
    weights[active] = pos[active] / n_pos[active, None] / active.sum()
    return nx.neg(nx.sum_(nx.mul(logp, weights)))


def pair_labels(batch: int) -> np.ndarray:
    """Labels that make each view's only positive its twin, for [view1..., view2...]."""
    return np.concatenate([np.arange(batch), np.arange(batch)])


def simclr_loss(z: Tensor, temperature: float = 0.1) -> Tensor:
    """InfoNCE over 2B views laid out as [view 1 of samples 0..B-1, view 2 of 0..B-1]."""
    n = nx.as_tensor(z).shape[0]
    if n % 2:
        raise ContractViolation(f"simclr_loss needs an even number of views, got {n}")
    return supcon_loss(z, pair_labels(n // 2), temperature)


def distill_loss(student_logits: Tensor, teacher_logits, labels, alpha: float,
                 temperature: float) -> Tensor:
    """alpha * CE(labels) + (1 - alpha) * T^2 * KL(teacher_T || student_T)."""
    parts = []
    if alpha > 0:
        parts.append(nx.scale(nx.cross_entropy(student_logits, labels), alpha))
    if alpha < 1:
        kl = nx.kl_div(teacher_logits, student_logits, temperature)
        parts.append(nx.scale(kl, (1 - alpha) * temperature ** 2))
    return parts[0] if len(parts) == 1 else nx.add(parts[0], parts[1])
