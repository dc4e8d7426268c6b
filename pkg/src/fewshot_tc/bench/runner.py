"""Experiment orchestration: data preparation, source-model training, scenarios and sweeps."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..dataio import (ClassPartition, Dataset, NormStats, Profile, load_dataset,
                      monolithic_split, normalize_apply, normalize_fit, partition_by_popularity,
                      popularity_order, stratified_folds, synth_generate)
from ..episodes import test_episode_batch
from ..errors import ConfigError, DataError
from ..forest import ForestConfig, fit_forest, forest_predict, forest_stats
from ..nets import EncoderSpec, head_params, param_count
from ..trainers import (SourceModel, TrainConfig, config_hash, derived_rng, distill,
                        embed_dataset, finetune_episode, meta_train_maml, meta_train_protonet,
                        meta_train_relationnet, train_contrastive, train_monolithic,
                        transfer_plain)
from ..trainers.common import head_logits
from .. import numerics as nx
from .config import DataSource, ExperimentConfig
from .metrics import balanced_accuracy_score
from .records import RunRecord

log = logging.getLogger("fewshot_tc.bench")

# method -> (shared trainer key, evaluation head)
METHOD_TABLE = {
    "baseline": ("mono_linear", "linear"),
    "baseline_lr": ("mono_linear", "logistic"),
    "baseline_nn": ("mono_linear", "nearest_neighbor"),
    "baseline_tl": ("mono_linear", "tl_linear"),
    "baseline_ce": ("mono_ce", "class_embedding"),
    "baseline_ce_tl": ("mono_ce", "tl_class_embedding"),
    "rfs_distill": ("distill", "logistic"),
    "protonet": ("protonet", "prototype"),
    "relationnet": ("relationnet", "relation"),
    "maml": ("maml", "maml"),
    "simclr": ("simclr", "nearest_neighbor"),
    "simclr_ce": ("simclr_ce", "nearest_neighbor"),
    "supcon": ("supcon", "nearest_neighbor"),
    "supcon_ce": ("supcon_ce", "nearest_neighbor"),
}
RF_DEPTH = {"rf_unbounded": None, "rf_d10": 10, "rf_d30": 30}


def dataset_id(d: Dataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(d.X).tobytes())
    h.update(np.ascontiguousarray(d.y).tobytes())
    return h.hexdigest()[:12]


def load_raw(src: DataSource) -> Dataset:
    if src.synth is not None:
        return synth_generate(src.synth)
    profile = None
    if src.packets is not None and src.features is not None:
        profile = Profile(src.packets, src.features)
    return load_dataset(src.path, profile)


@dataclass
class Prepared:
    """Normalized dataset with its class-disjoint popularity partition."""

    full: Dataset
    partition: ClassPartition
    stats: NormStats
    dataset_id: str
    train: Dataset = field(init=False)
    val: Dataset = field(init=False)
    test: Dataset = field(init=False)

    def __post_init__(self):
        self.train, self.val, self.test = (self.full.subset(self.partition.indices(s))
                                           for s in ("train", "val", "test"))


def prepare(raw: Dataset, n_train: int, n_val: int, n_test: int) -> Prepared:
    """Partition by popularity, then standardize with statistics of the training classes."""
    part = partition_by_popularity(raw, n_train, n_val, n_test)
    stats = normalize_fit(raw.subset(part.indices("train")))
    return Prepared(normalize_apply(stats, raw), part, stats, dataset_id(raw))


def encoder_spec(variant: str, profile: Profile) -> EncoderSpec:
    return EncoderSpec(variant, profile.packets, profile.features)


# ---------------------------------------------------------------------------
# source models
# ---------------------------------------------------------------------------

class SourceCache:
    """Trains each distinct source model once per (trainer key, seed, ways, classes)."""

    def __init__(self, prep: Prepared, cfg: ExperimentConfig):
        self.prep, self.cfg = prep, cfg
        self.spec = encoder_spec(cfg.encoder, prep.full.profile)
        self._store: dict = {}

    def get(self, method: str, seed: int, ways: int | None = None,
            train: Dataset | None = None) -> SourceModel:
        key_name = METHOD_TABLE[method][0]
        train = self.prep.train if train is None else train
        key = (key_name, seed, ways, tuple(train.classes))
        if key not in self._store:
            tcfg = self.cfg.train.replace(seed=seed, method=method,
                                          ways=ways if ways else self.cfg.train.ways)
            t0 = time.perf_counter()
            self._store[key] = train_source(key_name, train, self.prep.val, self.spec, tcfg,
                                            self.cfg, self)
            log.info("trained %s (seed %d) in %.1fs", key_name, seed, time.perf_counter() - t0)
        return self._store[key]


def train_source(key: str, train: Dataset, val: Dataset, spec: EncoderSpec, tcfg: TrainConfig,
                 cfg: ExperimentConfig, cache: SourceCache | None = None) -> SourceModel:
    if key in ("mono_linear", "mono_ce", "distill"):
        fit, hold = monolithic_split(train, seed=tcfg.seed)
        if key == "distill":
            teacher = (cache.get("baseline", tcfg.seed, None, train) if cache is not None else
                       train_monolithic(fit, hold, spec, tcfg, "linear")[0])
            return distill(teacher, fit, hold, tcfg)[0]
        head = "linear" if key == "mono_linear" else "class_embedding"
        return train_monolithic(fit, hold, spec, tcfg, head)[0]
    if key == "protonet":
        return meta_train_protonet(train, val, spec, tcfg)[0]
    if key == "relationnet":
        return meta_train_relationnet(train, val, spec, tcfg)[0]
    if key == "maml":
        return meta_train_maml(train, val, spec, tcfg)[0]
    if key in ("simclr", "simclr_ce", "supcon", "supcon_ce"):
        fit, hold = monolithic_split(train, seed=tcfg.seed)
        ccfg = tcfg.replace(supervised=key.startswith("supcon"),
                            class_embedding=key.endswith("_ce"))
        return train_contrastive(fit, hold, spec, cfg.augment, ccfg)[0]
    raise ConfigError(f"no trainer for {key!r}")


def _head_size(method: str, d: int, ways: int) -> int:
    head = METHOD_TABLE[method][1]
    if head in ("linear", "logistic", "tl_linear", "maml"):
        return head_params(d, ways)
    if head in ("class_embedding", "tl_class_embedding"):
        return d * ways
    if head == "relation":
        return param_count(EncoderSpec(latent_dim=d), "relation")[1]
    return 0


def _evaluate(method: str, source: SourceModel, episodes, data: Dataset, tcfg: TrainConfig,
              embeddings) -> list[tuple[float, float]]:
    """(accuracy, seconds) per episode for one method."""
    head = METHOD_TABLE[method][1]
    out = []
    for ep in episodes:
        t0 = time.perf_counter()
        if head.startswith("tl_"):
            sup = Dataset(data.X[ep.support_idx], ep.support_labels, None, data.profile)
            qry = Dataset(data.X[ep.query_idx], ep.query_labels, None, data.profile)
            # mini-batch epochs sized so the head sees about finetune_steps updates
            n_batches = -(-len(sup) // tcfg.batch_size)
            ecfg = tcfg.replace(epochs=max(1, -(-tcfg.finetune_steps // n_batches)))
            acc = transfer_plain(source, sup, qry, ecfg, head[3:], init_key=ep.episode_id)[0]
        else:
            acc = finetune_episode(source, ep, data, head, tcfg, embeddings)
        out.append((acc, time.perf_counter() - t0))
    return out


def _run_hash(cfg: ExperimentConfig, **extra) -> str:
    return config_hash({"experiment": cfg.to_dict(), **extra})


# ---------------------------------------------------------------------------
# shot sweep
# ---------------------------------------------------------------------------

def sweep_shots(prep: Prepared, cfg: ExperimentConfig, cache: SourceCache | None = None
                ) -> list[RunRecord]:
    """Every method on the same shared test episodes for each shot count."""
    cache = cache or SourceCache(prep, cfg)
    records = []
    for seed in cfg.seeds:
        tcfg = cfg.train.replace(seed=seed)
        for shots in cfg.shot_grid:
            episodes = test_episode_batch(prep.test, cfg.test_ways, shots, cfg.queries,
                                          cfg.episodes, seed)
            for method in cfg.methods:
                source = cache.get(method, seed)
                emb = None if METHOD_TABLE[method][1] == "maml" else embed_dataset(source,
                                                                                   prep.test)
                trunk = source.encoder.n_params()
                hsize = _head_size(method, source.latent_dim, cfg.test_ways)
                chash = _run_hash(cfg, method=method, seed=seed, sweep="shots")
                for ep, (acc, secs) in zip(episodes, _evaluate(method, source, episodes,
                                                               prep.test, tcfg, emb)):
                    records.append(RunRecord(method, "shots", prep.dataset_id, seed,
                                             cfg.test_ways, shots, cfg.queries, ep.episode_id,
                                             acc, chash, trunk, hsize, wall_seconds=secs))
    return records


# ---------------------------------------------------------------------------
# way sweep
# ---------------------------------------------------------------------------

def _subset_classes(d: Dataset, n: int, seed: int) -> Dataset:
    classes = np.array(d.classes)
    if n > len(classes):
        raise ConfigError(f"train-way value {n} exceeds the {len(classes)} training classes")
    if n == len(classes):
        return d
    keep = np.sort(derived_rng(seed, "train-ways", n).choice(classes, n, replace=False))
    return d.subset(np.flatnonzero(np.isin(d.y, keep)))


def sweep_ways(prep: Prepared, cfg: ExperimentConfig, cache: SourceCache | None = None
               ) -> list[RunRecord]:
    """One source per train-way value, scored at every test-way value; plus an RF reference."""
    cache = cache or SourceCache(prep, cfg)
    records = []
    for seed in cfg.seeds:
        tcfg = cfg.train.replace(seed=seed)
        batches = {w: test_episode_batch(prep.test, w, cfg.way_shots, cfg.queries,
                                         cfg.episodes, seed) for w in cfg.test_way_grid}
        for method in cfg.way_methods:
            for tw in cfg.train_way_grid:
                if method == "protonet":
                    source = cache.get(method, seed, ways=tw)
                else:
                    source = cache.get(method, seed, train=_subset_classes(prep.train, tw, seed))
                emb = embed_dataset(source, prep.test)
                chash = _run_hash(cfg, method=method, seed=seed, sweep="ways", train_ways=tw)
                for w, episodes in batches.items():
                    for ep, (acc, secs) in zip(episodes, _evaluate(method, source, episodes,
                                                                   prep.test, tcfg, emb)):
                        records.append(RunRecord(method, "ways", prep.dataset_id, seed, w,
                                                 cfg.way_shots, cfg.queries, ep.episode_id, acc,
                                                 chash, source.encoder.n_params(), 0,
                                                 train_ways=tw, wall_seconds=secs))
        fcfg = ForestConfig(cfg.forest_estimators, None, True, seed)
        chash = _run_hash(cfg, method="rf_unbounded", seed=seed, sweep="ways")
        for w, episodes in batches.items():
            for ep in episodes[:cfg.rf_reference_episodes]:
                t0 = time.perf_counter()
                forest = fit_forest(prep.test.X[ep.support_idx], ep.support_labels, fcfg)
                pred = forest_predict(forest, prep.test.X[ep.query_idx])
                acc = balanced_accuracy_score(ep.query_labels, pred, w)
                nodes, depth = forest_stats(forest)
                records.append(RunRecord("rf_unbounded", "ways", prep.dataset_id, seed, w,
                                         cfg.way_shots, cfg.queries, ep.episode_id, acc, chash,
                                         nodes=nodes, depth=depth,
                                         wall_seconds=time.perf_counter() - t0))
    return records


# ---------------------------------------------------------------------------
# scenarios (a) / (b) / (c)
# ---------------------------------------------------------------------------

class _Predictor:
    """Common face of the scenario models: labels in the dataset's global ids."""

    def __init__(self, method: str, train: Dataset, cfg: ExperimentConfig, seed: int):
        self.method = method
        self.classes = np.array(train.classes)
        if method in RF_DEPTH:
            fcfg = ForestConfig(cfg.forest_estimators, RF_DEPTH[method], True, seed)
            self.forest = fit_forest(train.X, train.y, fcfg)
            self.nodes, self.depth = forest_stats(self.forest)
            self.trunk = self.head = None
        else:
            spec = encoder_spec(method, train.profile)
            tcfg = cfg.train.replace(seed=seed, method="baseline")
            fit, hold = monolithic_split(train, seed=seed)
            self.model = train_monolithic(fit, hold, spec, tcfg, "linear")[0]
            self.trunk, self.head = param_count(spec, "linear", len(self.classes))
            self.nodes = self.depth = None

    def predict(self, X: np.ndarray, allowed=None) -> np.ndarray:
        if self.method in RF_DEPTH:
            return forest_predict(self.forest, X, allowed)
        with nx.no_grad():
            logits = head_logits("linear", self.model.heads["linear"],
                                 nx.Tensor(self.model.encoder.embed(X))).data
        if allowed is not None:
            keep = np.isin(self.classes, np.asarray(list(allowed)))
            logits = np.where(keep[None, :], logits, -np.inf)
        return self.classes[np.argmax(logits, axis=1)]


def unpopular_pool(d: Dataset, size: int) -> list[int]:
    order = popularity_order(d.class_counts)
    if size > len(order):
        raise ConfigError(f"unpopular_pool {size} exceeds the {len(order)} classes")
    return sorted(order[-size:])


def run_scenarios_abc(data: Dataset, cfg: ExperimentConfig, ds_id: str | None = None
                      ) -> list[RunRecord]:
    """(a) all classes, (b) the (a) model rescored on 4 unpopular classes, (c) 4-class models.

    Each seed gets its own stratified folds and its own list of class
    selections, shared by every method and fold.
    """
    sc = cfg.scenarios
    ds_id = ds_id or dataset_id(data)
    pool = unpopular_pool(data, sc.unpopular_pool)
    n_cls = int(data.y.max()) + 1
    records = []

    def rec(method, scen, seed, eid, acc, model, secs, ways):
        return RunRecord(method, scen, ds_id, seed, ways, 0, 0, eid, acc,
                         _run_hash(cfg, method=method, seed=seed, sweep="abc"),
                         model.trunk, model.head, model.nodes, model.depth,
                         wall_seconds=secs)

    for seed in cfg.seeds:
        folds = stratified_folds(data.y, sc.folds, seed)
        rng = derived_rng(seed, "selection")
        selections = [sorted(int(c) for c in rng.choice(pool, sc.selection_ways, replace=False))
                      for _ in range(sc.selections)]
        for f, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
            train, test = data.subset(train_idx), data.subset(test_idx)
            for method in sc.methods:
                if {"a", "b"} & set(sc.scenarios):
                    t0 = time.perf_counter()
                    model = _Predictor(method, train, cfg, seed)
                    if "a" in sc.scenarios:
                        acc = balanced_accuracy_score(test.y, model.predict(test.X), n_cls)
                        records.append(rec(method, "a", seed, f"fold{f}", acc, model,
                                           time.perf_counter() - t0, len(model.classes)))
                    if "b" in sc.scenarios:
                        for s, sel in enumerate(selections):
                            sub = test.subset(np.flatnonzero(np.isin(test.y, sel)))
                            allowed = sel if sc.restrict == "mask" else None
                            pred = model.predict(sub.X, allowed)
                            acc = balanced_accuracy_score(sub.y, pred, n_cls)
                            records.append(rec(method, "b", seed, f"fold{f}-sel{s}", acc, model,
                                               0.0, sc.selection_ways))
                if "c" in sc.scenarios:
                    for s, sel in enumerate(selections):
                        t0 = time.perf_counter()
                        tr = train.subset(np.flatnonzero(np.isin(train.y, sel)))
                        te = test.subset(np.flatnonzero(np.isin(test.y, sel)))
                        model = _Predictor(method, tr, cfg, seed)
                        acc = balanced_accuracy_score(te.y, model.predict(te.X), n_cls)
                        records.append(rec(method, "c", seed, f"fold{f}-sel{s}", acc, model,
                                           time.perf_counter() - t0, sc.selection_ways))
    return records


def check_episode_capacity(prep: Prepared, cfg: ExperimentConfig) -> None:
    """Fail early, naming the class, when a test class cannot fill the largest episode."""
    need = max(max(cfg.shot_grid), cfg.way_shots) + cfg.queries
    for c, n in prep.test.class_counts.items():
        if n < need:
            raise DataError(f"test class {c} has {n} samples, the sweep needs {need}")


def run_plain_transfer(prep: Prepared, cfg: ExperimentConfig, cache: SourceCache | None = None,
                       folds: int = 5) -> list[RunRecord]:
    """Transfer without episodes: one new head over every test class at once.

    The test split is cut into stratified folds; one fold is scored, the next
    one selects the best head epoch and the rest train the head.
    """
    cache = cache or SourceCache(prep, cfg)
    methods = [m for m in cfg.methods if METHOD_TABLE[m][1].startswith("tl_")]
    records = []
    data = prep.test
    ways = len(data.classes)
    for seed in cfg.seeds:
        tcfg = cfg.train.replace(seed=seed)
        parts = stratified_folds(data.y, folds, seed)
        train = data.subset(np.sort(np.concatenate(parts[2:])))
        val, test = data.subset(parts[1]), data.subset(parts[0])
        for method in methods:
            source = cache.get(method, seed)
            t0 = time.perf_counter()
            acc = transfer_plain(source, train, test, tcfg, METHOD_TABLE[method][1][3:], val,
                                 init_key=f"plain-{seed}")[0]
            records.append(RunRecord(method, "plain", prep.dataset_id, seed, ways, 0, 0,
                                     "plain", acc,
                                     _run_hash(cfg, method=method, seed=seed, sweep="plain"),
                                     source.encoder.n_params(),
                                     _head_size(method, source.latent_dim, ways),
                                     wall_seconds=time.perf_counter() - t0))
    return records
