"""Monolithic mini-batch training and one-generation self-distillation."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .. import numerics as nx
from ..dataio import Dataset
from ..errors import ConfigError, DataError
from ..nets import Encoder, EncoderSpec, init_class_embedding, init_linear_head
from .common import (TrainConfig, SourceModel, dense_labels, derived_rng, head_logits,
                     head_predict, log, minibatches, publish, restore, score, snapshot)
from .losses import distill_loss

HEAD_FOR_METHOD = {"baseline_ce": "class_embedding"}


def _init_head(kind: str, d: int, c: int, rng) -> dict:
    if kind == "linear":
        return init_linear_head(d, c, rng)
    if kind == "class_embedding":
        return init_class_embedding(d, c, rng)
    raise ConfigError(f"monolithic training supports linear or class_embedding heads, not {kind!r}")


def _fit_epochs(encoder: Encoder, head: dict, head_kind: str, fit: Dataset, val: Dataset | None,
                classes: tuple, cfg: TrainConfig,
                batch_loss: Callable[[nx.Tensor, np.ndarray, np.ndarray], nx.Tensor]):
    """Shared epoch loop: shuffle, step per batch, score validation, keep the best epoch."""
    y = dense_labels(fit.y, classes)
    params = {**{f"enc/{k}": v for k, v in encoder.params.items()},
              **{f"head/{k}": v for k, v in head.items()}}
    plist = list(params.values())
    opt = nx.Optimizer(plist, cfg.optimizer, cfg.lr, nx.LRSchedule.parse(cfg.lr_policy))
    yv = dense_labels(val.y, classes) if val is not None and len(val) else None
    history, best, best_score = [], None, -np.inf
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        rng = derived_rng(cfg.seed, "epoch", epoch)
        losses = []
        for idx in minibatches(len(fit), cfg.batch_size, rng):
            logits = head_logits(head_kind, head, encoder.forward(fit.X[idx], training=True))
            loss = batch_loss(logits, y[idx], idx)
            opt.step(nx.grad(loss, plist))
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr}
        if yv is not None:
            row["val_bacc"] = score(yv, head_predict(head_kind, head, encoder.embed(val.X)),
                                    len(classes))
        history.append(row)
        log.info("epoch %d loss %.4f val %s", epoch, row["loss"], row.get("val_bacc"))
        by_val = cfg.selection == "best_val" and "val_bacc" in row
        current = row["val_bacc"] if by_val else epoch
        if current > best_score:
            best_score = current
            best = (encoder.state_arrays(), snapshot(head))
    if best is not None:
        encoder.load_state_arrays(best[0])
        restore(head, best[1])
    return history


def train_monolithic(fit: Dataset, val: Dataset | None, spec: EncoderSpec,
                     cfg: TrainConfig, head_kind: str | None = None
                     ) -> tuple[SourceModel, list[dict]]:
    """Cross-entropy training over every class of ``fit``.

    The published model carries the parameters of the epoch with the best
    validation balanced accuracy (or the last epoch when ``val`` is empty).
    """
    if len(fit) == 0:
        raise DataError("train_monolithic: empty training split")
    head_kind = head_kind or HEAD_FOR_METHOD.get(cfg.method, "linear")
    classes = tuple(fit.classes)
    if len(classes) < 2:
        raise DataError("train_monolithic needs at least two classes")
    encoder = Encoder(spec, seed=cfg.seed)
    head = _init_head(head_kind, spec.latent_dim, len(classes), derived_rng(cfg.seed, "head"))
    history = _fit_epochs(encoder, head, head_kind, fit, val, classes, cfg,
                          lambda logits, yb, idx: nx.cross_entropy(logits, yb))
    return publish(encoder, cfg.method, cfg, {head_kind: head}, classes, history), history


def distill(source: SourceModel, fit: Dataset, val: Dataset | None, cfg: TrainConfig,
            head_kind: str = "linear") -> tuple[SourceModel, list[dict]]:
    """Train a re-initialized student against the frozen source's softened logits."""
    if head_kind not in source.heads:
        raise ConfigError(f"source model has no {head_kind!r} head to distill from")
    classes = source.train_classes
    if tuple(fit.classes) != classes:
        raise DataError("distillation must replay the teacher's training classes")
    teacher = source.heads[head_kind]
    with nx.no_grad():
        t_logits = head_logits(head_kind, teacher,
                               nx.Tensor(source.encoder.embed(fit.X))).data
    student = Encoder(source.encoder.spec, seed=cfg.seed + 1)
    head = _init_head(head_kind, student.latent_dim, len(classes),
                      derived_rng(cfg.seed, "student-head"))
    a, T = cfg.distill_alpha, cfg.distill_temperature
    history = _fit_epochs(student, head, head_kind, fit, val, classes, cfg,
                          lambda logits, yb, idx: distill_loss(logits, t_logits[idx], yb, a, T))
    return publish(student, cfg.method, cfg, {head_kind: head}, classes, history), history
