"""Command-line entry point: ``fewshot-tc <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from ..dataio import (SynthConfig, load_dataset, partition_by_popularity, save_dataset,
                      synth_generate)
from ..episodes import test_episode_batch
from ..errors import (ConfigError, ContractViolation, DataError, EpisodeError, NumericError,
                      ParseError)
from ..nets import load_checkpoint, save_checkpoint
from ..trainers import publish
from .config import DL_METHODS, ExperimentConfig, load_config
from .metrics import mean_ci95
from .records import ResultsLog, RunRecord, read_records
from .report import FORMATS, write_report
from . import runner

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _results_log(args, cfg: ExperimentConfig) -> ResultsLog:
    return ResultsLog(args.log or Path(cfg.output_dir) / "results.jsonl")


def _prepared(cfg: ExperimentConfig) -> runner.Prepared:
    p = cfg.partition
    return runner.prepare(runner.load_raw(cfg.dataset), p.train, p.val, p.test)


def cmd_gen_data(args) -> None:
    cfg = SynthConfig(n_classes=args.classes, samples_per_class_max=args.max_per_class,
                      imbalance_rho=args.rho, separability=args.sep, packets=args.packets,
                      features=args.features, seed=args.seed)
    d = synth_generate(cfg)
    save_dataset(d, args.out)
    print(f"wrote {len(d)} flows over {len(d.classes)} classes to {args.out}")


def cmd_partition(args) -> None:
    d = load_dataset(args.data)
    part = partition_by_popularity(d, args.train, args.val, args.test)
    text = json.dumps(part.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    if args.method not in DL_METHODS:
        raise ConfigError(f"unknown method {args.method!r}")
    prep = _prepared(cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    source = runner.SourceCache(prep, cfg).get(args.method, seed)
    meta = {"method": args.method, "config_hash": source.config_hash, "seed": seed,
            "train_classes": list(source.train_classes), "norm": prep.stats.to_dict(),
            "dataset_id": prep.dataset_id}
    save_checkpoint(args.out, source.encoder, source.heads, meta)
    print(f"saved {args.method} ({source.encoder.n_params()} trunk parameters) to {args.out}")


def cmd_eval_episodes(args) -> None:
    cfg = load_config(args.config)
    prep = _prepared(cfg)
    enc, heads, meta = load_checkpoint(args.model)
    method = meta.get("method")
    if method not in runner.METHOD_TABLE:
        raise DataError(f"checkpoint {args.model} has no usable method field")
    source = dataclasses.replace(publish(enc, method, {}, heads, meta.get("train_classes", ())),
                                 config_hash=meta.get("config_hash", ""))
    split = {"train": prep.train, "val": prep.val, "test": prep.test}[args.split]
    episodes = test_episode_batch(split, args.ways, args.shots, args.queries, args.episodes,
                                  args.seed, args.split)
    emb = None if runner.METHOD_TABLE[method][1] == "maml" else runner.embed_dataset(source, split)
    tcfg = cfg.train.replace(seed=args.seed)
    chash = runner._run_hash(cfg, method=method, seed=args.seed, sweep="eval",
                             model=source.config_hash)
    records = [RunRecord(method, f"eval-{args.split}", prep.dataset_id, args.seed, args.ways,
                         args.shots, args.queries, ep.episode_id, acc, chash,
                         source.encoder.n_params(),
                         runner._head_size(method, source.latent_dim, args.ways),
                         wall_seconds=secs)
               for ep, (acc, secs) in zip(episodes, runner._evaluate(method, source, episodes,
                                                                      split, tcfg, emb))]
    _results_log(args, cfg).append(records)
    m, h = mean_ci95([r.balanced_accuracy for r in records])
    print(f"{method} {args.ways}-way {args.shots}-shot: {m:.4f} ± {h:.4f} "
          f"over {len(records)} episodes")


def _sweep(fn):
    def run(args) -> None:
        cfg = load_config(args.config)
        t0 = time.perf_counter()
        prep = _prepared(cfg)
        if fn is runner.run_scenarios_abc:
            records = fn(prep.full, cfg, prep.dataset_id)
        else:
            if fn is not runner.run_plain_transfer:
                runner.check_episode_capacity(prep, cfg)
            records = fn(prep, cfg)
        n = _results_log(args, cfg).append(records)
        print(f"appended {n} records in {time.perf_counter() - t0:.1f}s")
    return run


def cmd_report(args) -> None:
    records = read_records(args.log)
    paths = write_report(records, args.out, args.format)
    for p in paths:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fewshot-tc",
                                 description="Few-shot traffic classification workbench")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    g.add_argument("--classes", type=int, default=40)
    g.add_argument("--max-per-class", type=int, default=500)
    g.add_argument("--rho", type=float, default=1.0)
    g.add_argument("--sep", type=float, default=5.0)
    g.add_argument("--packets", type=int, default=10)
    g.add_argument("--features", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="class-disjoint popularity partition of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="train one source model and save a checkpoint")
    t.add_argument("--method", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-episodes", help="score a checkpoint on sampled test episodes")
    e.add_argument("--model", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--ways", type=int, default=4)
    e.add_argument("--shots", type=int, default=5)
    e.add_argument("--queries", type=int, default=15)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--log")
    e.set_defaults(func=cmd_eval_episodes)

    for name, fn, text in (("sweep-shots", runner.sweep_shots, "shot sweep"),
                           ("sweep-ways", runner.sweep_ways, "train/test way heatmap"),
                           ("scenarios-abc", runner.run_scenarios_abc, "scenarios a, b and c"),
                           ("plain-transfer", runner.run_plain_transfer,
                            "transfer without episodes")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--log", help="results log (default: <output_dir>/results.jsonl)")
        s.set_defaults(func=_sweep(fn))

    r = sub.add_parser("report", help="render tables from a results log")
    r.add_argument("--log", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=sorted(FORMATS), default="csv")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, EpisodeError, ContractViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
