"""Episodic meta-training: prototypical networks, relation networks and MAML."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..dataio import Dataset
from ..episodes import Episode, EpisodeStream, episode_stream, test_episode_batch
from ..errors import NumericError
from ..nets import (Encoder, EncoderSpec, init_linear_head, init_relation_module, linear_logits,
                    proto_logits, prototypes, relation_scores)
from ..numerics import Tensor
from .common import TrainConfig, SourceModel, derived_rng, log, publish, score

EVAL_HEAD = {"protonet": "prototype", "relationnet": "relation", "maml": "maml"}


def _split_embeddings(Z: Tensor, n_support: int) -> tuple[Tensor, Tensor]:
    return Z[:n_support], Z[n_support:]


def _episodic_train(data: Dataset, val: Dataset | None, encoder: Encoder, heads: dict,
                    cfg: TrainConfig, method: str,
                    episode_loss: Callable[[Episode], Tensor | None],
                    lr_policy: str | None = None) -> tuple[SourceModel, list[dict]]:
    """One optimizer step per episode; meta-validation after every epoch picks the checkpoint."""
    extra = {f"{h}/{k}": v for h, params in heads.items() for k, v in params.items()}
    plist = encoder.param_list() + list(extra.values())
    opt = nx.Optimizer(plist, cfg.optimizer, cfg.lr,
                       nx.LRSchedule.parse(lr_policy or cfg.lr_policy))
    stream = EpisodeStream(cfg.epochs, cfg.episodes_per_epoch, cfg.ways, cfg.shots, cfg.queries,
                           cfg.seed, "train")
    val_eps = _validation_episodes(val, cfg)
    history, best, best_score = [], None, -np.inf
    losses, skipped, epoch = [], 0, 0

    def close_epoch(e):
        nonlocal best, best_score, losses, skipped
        row = {"epoch": e, "loss": float(np.mean(losses)) if losses else float("nan"),
               "lr": opt.lr, "skipped": skipped}
        current = e
        if val_eps:
            source = publish(encoder, method, cfg, heads)
            from .transfer import evaluate_episodes
            row["val_bacc"] = float(np.mean(evaluate_episodes(source, val_eps, val,
                                                              EVAL_HEAD[method], cfg)))
            if cfg.selection == "best_val":
                current = row["val_bacc"]
        history.append(row)
        log.info("%s epoch %d loss %.4f val %s", method, e, row["loss"], row.get("val_bacc"))
        if current > best_score:
            best_score = current
            best = (encoder.state_arrays(), {k: v.data.copy() for k, v in extra.items()})
        losses, skipped = [], 0

    opt.set_epoch(0)
    for e, ep in episode_stream(stream, data):
        if e != epoch:
            close_epoch(epoch)
            epoch = e
            opt.set_epoch(e)
        loss = episode_loss(ep)
        if loss is None:
            skipped += 1
            continue
        losses.append(loss[0].item())
        opt.step(loss[1])
    close_epoch(epoch)
    if best is not None:
        encoder.load_state_arrays(best[0])
        for k, v in extra.items():
            v.data = best[1][k].copy()
    return publish(encoder, method, cfg, heads, data.classes, history), history


def _validation_episodes(val: Dataset | None, cfg: TrainConfig) -> list[Episode]:
    if val is None or len(val) == 0 or cfg.val_episodes <= 0:
        return []
    ways = min(cfg.ways, len(val.classes))
    return test_episode_batch(val, ways, cfg.shots, cfg.queries, cfg.val_episodes,
                              cfg.seed, "val")


def _episode_batch(data: Dataset, ep: Episode) -> tuple[np.ndarray, int]:
    return np.concatenate([data.X[ep.support_idx], data.X[ep.query_idx]]), len(ep.support_idx)


def meta_train_protonet(data: Dataset, val: Dataset | None, spec: EncoderSpec,
                        cfg: TrainConfig) -> tuple[SourceModel, list[dict]]:
    """Cross-entropy over softmax(-squared distance to class prototypes); lr halves every 10 epochs."""
    encoder = Encoder(spec, seed=cfg.seed)
    plist = encoder.param_list()

    def episode_loss(ep):
        X, ns = _episode_batch(data, ep)
        zs, zq = _split_embeddings(encoder.forward(X, training=True), ns)
        loss = protonet_loss(zs, ep.support_labels, zq, ep.query_labels, ep.ways)
        return loss, nx.grad(loss, plist)

    policy = cfg.lr_policy if cfg.lr_policy != "constant" else "halve_every:10"
    return _episodic_train(data, val, encoder, {}, cfg, "protonet", episode_loss, policy)


def protonet_loss(zs: Tensor, ys, zq: Tensor, yq, ways: int) -> Tensor:
    return nx.cross_entropy(proto_logits(prototypes(zs, ys, ways), zq), yq)


def relation_loss(module: dict, zs: Tensor, ys, zq: Tensor, yq, ways: int) -> Tensor:
    target = np.eye(ways)[np.asarray(yq)]
    return nx.mse(relation_scores(module, prototypes(zs, ys, ways), zq), target)


def meta_train_relationnet(data: Dataset, val: Dataset | None, spec: EncoderSpec,
                           cfg: TrainConfig, hidden: int = 64) -> tuple[SourceModel, list[dict]]:
    """Joint trunk + relation-module training on MSE against one-hot query targets."""
    encoder = Encoder(spec, seed=cfg.seed)
    module = init_relation_module(spec.latent_dim, derived_rng(cfg.seed, "relation"), hidden)
    plist = encoder.param_list() + list(module.values())

    def episode_loss(ep):
        X, ns = _episode_batch(data, ep)
        zs, zq = _split_embeddings(encoder.forward(X, training=True), ns)
        loss = relation_loss(module, zs, ep.support_labels, zq, ep.query_labels, ep.ways)
        return loss, nx.grad(loss, plist)

    return _episodic_train(data, val, encoder, {"relation": module}, cfg, "relationnet",
                           episode_loss)


# ---------------------------------------------------------------------------
# MAML
# ---------------------------------------------------------------------------

def maml_objective(loss_fn: Callable[[Sequence[Tensor], object], Tensor],
                   params: Sequence[Tensor], support, query, steps: int, inner_lr: float,
                   create_graph: bool = True) -> Tensor:
    """Query loss after ``steps`` SGD steps on the support loss from ``params``.

    With ``create_graph`` the inner gradients stay on the tape, so
    differentiating the result w.r.t. ``params`` gives the exact
    second-order meta-gradient.
    """
    return loss_fn(adapt(loss_fn, params, support, steps, inner_lr, create_graph), query)


def adapt(loss_fn, params: Sequence[Tensor], support, steps: int, inner_lr: float,
          create_graph: bool = False) -> list[Tensor]:
    fast = list(params)
    for _ in range(steps):
        grads = nx.grad(loss_fn(fast, support), fast, create_graph=create_graph)
        fast = [p - g * inner_lr for p, g in zip(fast, grads)]
    return fast


def _classifier_loss(encoder: Encoder, names: list[str]):
    """loss_fn over a flat parameter list: trunk entries then ``head/weight``, ``head/bias``.

    Batch norm always uses the current batch's statistics and never touches
    the running buffers, both while meta-training and at meta-test.
    """
    def loss_fn(ps, batch):
        X, y = batch
        p = dict(zip(names, ps))
        z = encoder.forward(X, params=p, training=True, update_stats=False)
        logits = linear_logits({"weight": p["head/weight"], "bias": p["head/bias"]}, z)
        return nx.cross_entropy(logits, y)
    return loss_fn


def meta_train_maml(data: Dataset, val: Dataset | None, spec: EncoderSpec,
                    cfg: TrainConfig) -> tuple[SourceModel, list[dict]]:
    """Second-order MAML with meta-batch 1; an episode whose inner loop diverges is skipped."""
    encoder = Encoder(spec, seed=cfg.seed)
    head = init_linear_head(spec.latent_dim, cfg.ways, derived_rng(cfg.seed, "maml-head"))
    names = list(encoder.params) + ["head/weight", "head/bias"]
    plist = encoder.param_list() + [head["weight"], head["bias"]]
    loss_fn = _classifier_loss(encoder, names)

    def episode_loss(ep):
        support = (data.X[ep.support_idx], ep.support_labels)
        query = (data.X[ep.query_idx], ep.query_labels)
        holder = {}

        def builder(ps):
            holder["loss"] = maml_objective(loss_fn, ps, support, query, cfg.inner_steps,
                                            cfg.inner_lr, create_graph=True)
            return holder["loss"]
        try:
            grads = nx.higher_order_grad(builder, plist)
        except NumericError as exc:
            log.warning("MAML episode %s skipped: %s", ep.episode_id, exc)
            return None
        return holder["loss"], grads

    return _episodic_train(data, val, encoder, {"maml_head": head}, cfg, "maml", episode_loss)


def maml_adapt_evaluate(source: SourceModel, episode: Episode, data: Dataset,
                        cfg: TrainConfig) -> float:
    """Meta-test: adapt a trunk copy plus a freshly initialized N-way head on the support set.

    The inner loop uses the training-time step count and learning rate; the
    published trunk itself is never modified.
    """
    encoder = source.encoder.clone()
    head = init_linear_head(encoder.latent_dim, episode.ways,
                            derived_rng(cfg.seed, "maml-test-head", episode.episode_id))
    names = list(encoder.params) + ["head/weight", "head/bias"]
    params = encoder.param_list() + [head["weight"], head["bias"]]
    loss_fn = _classifier_loss(encoder, names)
    support = (data.X[episode.support_idx], episode.support_labels)
    fast = adapt(loss_fn, params, support, cfg.inner_steps, cfg.inner_lr)
    with nx.no_grad():
        p = dict(zip(names, fast))
        z = encoder.forward(data.X[episode.query_idx], params=p, training=True,
                            update_stats=False)
        logits = linear_logits({"weight": p["head/weight"], "bias": p["head/bias"]}, z).data
    return score(episode.query_labels, np.argmax(logits, axis=1), episode.ways)
