"""Fixed-representation transfer: new heads on top of a frozen published trunk."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..dataio import Dataset
from ..episodes import Episode
from ..errors import ConfigError, DataError
from ..nets import (fit_logistic, init_class_embedding, init_linear_head, nn_predict,
                    proto_logits, prototypes, relation_scores)
from .common import (TrainConfig, SourceModel, dense_labels, derived_rng, head_logits,
                     head_predict, minibatches, restore, score, snapshot)

EVAL_HEADS = ("linear", "class_embedding", "logistic", "nearest_neighbor", "prototype",
              "relation", "maml")
GRADIENT_HEADS = ("linear", "class_embedding")


def _new_head(kind: str, d: int, c: int, rng) -> dict:
    return init_linear_head(d, c, rng) if kind == "linear" else init_class_embedding(d, c, rng)


def fit_gradient_head(Z: np.ndarray, y: np.ndarray, n_classes: int, kind: str, cfg: TrainConfig,
                      rng: np.random.Generator, epochs: int | None = None,
                      batch_size: int | None = None) -> dict:
    """Adam on cross-entropy over fixed embeddings.

    Without ``epochs`` this runs ``cfg.finetune_steps`` full-batch steps;
    with it, shuffled mini-batches of ``batch_size`` for that many epochs.
    """
    if kind not in GRADIENT_HEADS:
        raise ConfigError(f"{kind!r} is not a gradient-trained head")
    head = _new_head(kind, Z.shape[1], n_classes, rng)
    plist = list(head.values())
    opt = nx.Optimizer(plist, "adam", cfg.finetune_lr)
    Zt = nx.Tensor(Z)

    def step(idx):
        z = Zt if idx is None else nx.Tensor(Z[idx])
        yb = y if idx is None else y[idx]
        opt.step(nx.grad(nx.cross_entropy(head_logits(kind, head, z), yb), plist))

    if epochs is None:
        for _ in range(cfg.finetune_steps):
            step(None)
    else:
        for e in range(epochs):
            for idx in minibatches(len(Z), batch_size or len(Z), derived_rng(cfg.seed, "tl", e)):
                step(idx)
    return head


def predict_with_head(source: SourceModel, kind: str, Zs: np.ndarray, ys: np.ndarray,
                      Zq: np.ndarray, ways: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Fit a ``kind`` head on support embeddings and label the query embeddings."""
    if kind in GRADIENT_HEADS:
        return head_predict(kind, fit_gradient_head(Zs, ys, ways, kind, cfg, rng), Zq)
    if kind == "logistic":
        return fit_logistic(Zs, ys, ways).predict(Zq)
    if kind == "nearest_neighbor":
        return nn_predict(Zs, ys, Zq)
    if kind == "prototype":
        return np.argmax(proto_logits(prototypes(Zs, ys, ways), Zq), axis=1)
    if kind == "relation":
        if "relation" not in source.heads:
            raise ConfigError("relation head requested but the source has no relation module")
        with nx.no_grad():
            s = relation_scores(source.heads["relation"], prototypes(Zs, ys, ways), Zq).data
        return np.argmax(s, axis=1)
    raise ConfigError(f"unknown evaluation head {kind!r}; expected one of {EVAL_HEADS}")


def embed_dataset(source: SourceModel, data: Dataset) -> np.ndarray:
    """Evaluation-mode embeddings of every sample, for reuse across many episodes."""
    return source.encoder.embed(data.X)


def finetune_episode(source: SourceModel, episode: Episode, data: Dataset,
                     head: str = "nearest_neighbor", cfg: TrainConfig | None = None,
                     embeddings: np.ndarray | None = None) -> float:
    """Balanced accuracy on the episode's query set after fitting ``head`` on its support.

    The trunk is never updated. ``embeddings`` (aligned with ``data``) skips
    re-embedding when many episodes share one split.
    """
    cfg = cfg or TrainConfig()
    if head == "maml":
        from .meta import maml_adapt_evaluate
        return maml_adapt_evaluate(source, episode, data, cfg)
    if embeddings is None:
        Zs = source.encoder.embed(data.X[episode.support_idx])
        Zq = source.encoder.embed(data.X[episode.query_idx])
    else:
        Zs, Zq = embeddings[episode.support_idx], embeddings[episode.query_idx]
    rng = derived_rng(cfg.seed, "finetune", episode.episode_id)
    pred = predict_with_head(source, head, Zs, episode.support_labels, Zq, episode.ways, cfg, rng)
    return score(episode.query_labels, pred, episode.ways)


def evaluate_episodes(source: SourceModel, episodes: Sequence[Episode], data: Dataset,
                      head: str, cfg: TrainConfig | None = None,
                      embeddings: np.ndarray | None = None) -> list[float]:
    if head != "maml" and embeddings is None and episodes:
        embeddings = embed_dataset(source, data)
    return [finetune_episode(source, ep, data, head, cfg, embeddings) for ep in episodes]


def transfer_plain(source: SourceModel, train: Dataset, test: Dataset,
                   cfg: TrainConfig | None = None, head: str = "linear",
                   val: Dataset | None = None, init_key: str = "transfer"
                   ) -> tuple[float, dict]:
    """Train one new head by mini-batch epochs on all target samples; score the test set.

    With a validation split the head of the best validation epoch is kept.
    """
    cfg = cfg or TrainConfig()
    if head not in GRADIENT_HEADS:
        raise ConfigError(f"transfer_plain trains a linear or class_embedding head, not {head!r}")
    classes = tuple(train.classes)
    if len(classes) < 2:
        raise DataError("transfer_plain needs at least two target classes")
    if not set(test.classes) <= set(classes):
        raise DataError("test split contains classes unseen in the target training split")
    Z, y = source.encoder.embed(train.X), dense_labels(train.y, classes)
    rng = derived_rng(cfg.seed, "finetune", init_key)
    if val is None or len(val) == 0:
        h = fit_gradient_head(Z, y, len(classes), head, cfg, rng, cfg.epochs, cfg.batch_size)
    else:
        h = _transfer_with_selection(Z, y, classes, head, cfg, rng, val, source)
    pred = head_predict(head, h, source.encoder.embed(test.X))
    return score(dense_labels(test.y, classes), pred, len(classes)), h


def _transfer_with_selection(Z, y, classes, kind, cfg, rng, val, source):
    h = _new_head(kind, Z.shape[1], len(classes), rng)
    plist = list(h.values())
    opt = nx.Optimizer(plist, "adam", cfg.finetune_lr)
    Zv, yv = source.encoder.embed(val.X), dense_labels(val.y, classes)
    best, best_score = snapshot(h), -1.0
    for e in range(cfg.epochs):
        for idx in minibatches(len(Z), cfg.batch_size, derived_rng(cfg.seed, "tl", e)):
            loss = nx.cross_entropy(head_logits(kind, h, nx.Tensor(Z[idx])), y[idx])
            opt.step(nx.grad(loss, plist))
        s = score(yv, head_predict(kind, h, Zv), len(classes))
        if s > best_score:
            best, best_score = snapshot(h), s
    restore(h, best)
    return h
