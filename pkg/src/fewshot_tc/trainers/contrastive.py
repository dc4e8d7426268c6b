"""SimCLR / SupCon pre-training with optional class-embedding auxiliary loss."""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..augment import AugmentPolicy, random_views
from ..dataio import Dataset
from ..errors import DataError
from ..nets import Encoder, EncoderSpec, cosine_logits, init_class_embedding, init_projection, \
    nn_predict, projection
from .common import (TrainConfig, SourceModel, dense_labels, derived_rng, log, minibatches,
                     publish, score)
from .losses import simclr_loss, supcon_loss

REFERENCE_PER_CLASS = 20


def _reference_indices(fit: Dataset, seed: int) -> np.ndarray:
    rng = derived_rng(seed, "reference")
    picks = [rng.permutation(fit.indices_of(c))[:REFERENCE_PER_CLASS] for c in fit.classes]
    return np.sort(np.concatenate(picks))


def train_contrastive(fit: Dataset, val: Dataset | None, spec: EncoderSpec,
                      policy: AugmentPolicy | None = None, cfg: TrainConfig | None = None,
                      projection_dim: int = 64) -> tuple[SourceModel, list[dict]]:
    """Two augmented views per sample, encoder + projection trained on the contrastive loss.

    ``cfg.supervised`` switches SimCLR to SupCon; ``cfg.class_embedding`` adds
    a cosine-head cross-entropy term with weight 1. Labels are read only by
    those two options and by validation. The projection is discarded; the
    published model is the encoder (plus the class embedding when trained).
    Validation scores a nearest-neighbour head whose supports are a fixed
    per-class sample of the training split.
    """
    cfg = cfg or TrainConfig(method="simclr")
    policy = policy or AugmentPolicy()
    if len(fit) == 0:
        raise DataError("train_contrastive: empty training split")
    encoder = Encoder(spec, seed=cfg.seed)
    proj = init_projection(spec.latent_dim, derived_rng(cfg.seed, "projection"),
                           out_dim=projection_dim)
    plist = encoder.param_list() + list(proj.values())
    classes = tuple(fit.classes)
    heads = {}
    if cfg.class_embedding:
        heads["class_embedding"] = init_class_embedding(spec.latent_dim, len(classes),
                                                        derived_rng(cfg.seed, "class-embedding"))
        plist += list(heads["class_embedding"].values())
    needs_labels = cfg.supervised or cfg.class_embedding
    y = dense_labels(fit.y, classes) if needs_labels else None
    opt = nx.Optimizer(plist, cfg.optimizer, cfg.lr, nx.LRSchedule.parse(cfg.lr_policy))

    use_val = val is not None and len(val) > 0
    if use_val:
        ref = _reference_indices(fit, cfg.seed)
        ref_y, val_y = fit.y[ref], val.y
    history, best, best_score = [], None, -np.inf
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        losses = []
        for b, idx in enumerate(minibatches(len(fit), cfg.batch_size,
                                            derived_rng(cfg.seed, "epoch", epoch))):
            rng = derived_rng(cfg.seed, "views", epoch, b)
            X = fit.X[idx]
            views = np.concatenate([random_views(X, policy, rng), random_views(X, policy, rng)])
            z = encoder.forward(views, training=True)
            p = projection(proj, z)
            if cfg.supervised:
                yy = np.concatenate([y[idx], y[idx]])
                loss = supcon_loss(p, yy, cfg.temperature)
            else:
                loss = simclr_loss(p, cfg.temperature)
            if cfg.class_embedding:
                yy = np.concatenate([y[idx], y[idx]])
                loss = loss + nx.cross_entropy(cosine_logits(heads["class_embedding"], z), yy)
            opt.step(nx.grad(loss, plist))
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr}
        current = epoch
        if use_val:
            pred = nn_predict(encoder.embed(fit.X[ref]), ref_y, encoder.embed(val.X))
            row["val_bacc"] = score(dense_labels(val_y, classes),
                                    dense_labels(pred, classes), len(classes))
            if cfg.selection == "best_val":
                current = row["val_bacc"]
        history.append(row)
        log.info("contrastive epoch %d loss %.4f val %s", epoch, row["loss"], row.get("val_bacc"))
        if current > best_score:
            best_score = current
            best = (encoder.state_arrays(),
                    {h: {k: v.data.copy() for k, v in ps.items()} for h, ps in heads.items()})
    encoder.load_state_arrays(best[0])
    for h, ps in heads.items():
        for k, v in ps.items():
            v.data = best[1][h][k].copy()
    return publish(encoder, cfg.method, cfg, heads, classes, history), history
