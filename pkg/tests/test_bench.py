import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_tc.bench import balanced_accuracy, balanced_accuracy_score, confusion_matrix, mean_ci95
from fewshot_tc.bench import runner
from fewshot_tc.bench.cli import main
from fewshot_tc.bench.config import ExperimentConfig, load_config
from fewshot_tc.bench.records import ResultsLog, RunRecord, read_records
from fewshot_tc.bench.report import build_tables, render, write_report
from fewshot_tc.errors import ConfigError, ContractViolation, DataError, NumericError

from oracles import per_class_recall_mean

TINY = {
    "dataset": {"synth": {"n_classes": 14, "samples_per_class_max": 60, "separability": 6}},
    "partition": {"train": 6, "val": 3, "test": 5},
    "methods": ["baseline_nn", "protonet", "baseline_tl"],
    "shot_grid": [2, 5], "queries": 5, "episodes": 3,
    "train_way_grid": [2, 4], "test_way_grid": [2, 3], "way_shots": 5,
    "rf_reference_episodes": 2, "forest_estimators": 5,
    "train": {"epochs": 1, "episodes_per_epoch": 3, "val_episodes": 2, "shots": 2,
              "queries": 3, "finetune_steps": 10},
    "scenarios": {"folds": 2, "selections": 2, "selection_ways": 3, "unpopular_pool": 5,
                  "methods": ["cnn2", "rf_d10"]},
}


@pytest.fixture(scope="module")
def tiny():
    cfg = ExperimentConfig.from_dict(TINY)
    p = cfg.partition
    prep = runner.prepare(runner.load_raw(cfg.dataset), p.train, p.val, p.test)
    return cfg, prep


@pytest.fixture(scope="module")
def shot_records(tiny):
    cfg, prep = tiny
    return runner.sweep_shots(prep, cfg)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class TestMetrics:
    def test_perfect(self):
        assert balanced_accuracy([[5, 0], [0, 5]]) == 1.0

    def test_hand_example(self):
        assert balanced_accuracy([[3, 1], [2, 2]]) == pytest.approx(0.625, abs=1e-12)

    def test_zero_support_rows_excluded(self):
        assert balanced_accuracy([[4, 0, 0], [0, 0, 0], [1, 0, 1]]) == pytest.approx(0.75)

    def test_random_matrices_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = int(rng.integers(2, 9))
            cm = rng.integers(0, 20, size=(c, c))
            cm[rng.integers(0, c)] = 0 if rng.random() < 0.2 else cm[0]
            if cm.sum(axis=1).max() == 0:
                cm[0, 0] = 1
            assert abs(balanced_accuracy(cm) - per_class_recall_mean(cm.tolist())) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(2, 7))
    def test_permutation_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 10, size=(c, c))
        cm[0, 0] += 1
        perm = rng.permutation(c)
        assert balanced_accuracy(cm[np.ix_(perm, perm)]) == pytest.approx(balanced_accuracy(cm),
                                                                          abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_balanced_data_equals_accuracy(self, seed):
        rng = np.random.default_rng(seed)
        y = np.repeat(np.arange(4), 10)
        pred = rng.integers(0, 4, size=40)
        assert balanced_accuracy_score(y, pred, 4) == pytest.approx(np.mean(y == pred))

    def test_confusion_orientation(self):
        cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
        assert cm.tolist() == [[0, 2], [0, 1]]

    @pytest.mark.parametrize("bad", [[[1, 2, 3]], [[-1, 0], [0, 1]], [[0, 0], [0, 0]]])
    def test_invalid_matrices(self, bad):
        with pytest.raises(ContractViolation):
            balanced_accuracy(bad)

    def test_ci_constant(self):
        assert mean_ci95([0.7] * 9) == (pytest.approx(0.7), 0.0)

    def test_ci_hand_formula(self):
        m, h = mean_ci95([0, 1] * 100)
        sd = math.sqrt(100 * 0.25 * 2 / 199)          # sample sd of 100 zeros and 100 ones
        assert m == 0.5
        assert h == pytest.approx(1.96 * sd / math.sqrt(200), rel=1e-12)
        assert h == pytest.approx(0.0696, abs=2e-4)   # 0.06947; 0.0696 rounds sd to 0.502

    def test_ci_shrinks_as_inverse_sqrt_n(self):
        rng = np.random.default_rng(3)
        small = mean_ci95(rng.normal(size=20000))[1]
        large = mean_ci95(rng.normal(size=80000))[1]
        assert large / small == pytest.approx(0.5, rel=0.05)

    def test_ci_single_value_warns(self):
        with pytest.warns(UserWarning):
            assert mean_ci95([0.3]) == (0.3, 0.0)


# ---------------------------------------------------------------------------
# records, config
# ---------------------------------------------------------------------------

def make_record(**kw):
    base = dict(method="protonet", scenario="shots", dataset_id="d", seed=0, ways=4, shots=5,
                queries=15, episode_id="e0", balanced_accuracy=0.5)
    base.update(kw)
    return RunRecord(**base)


class TestRecords:
    def test_accuracy_range(self):
        with pytest.raises(ContractViolation):
            make_record(balanced_accuracy=1.2)

    def test_id_ignores_timing_and_outcome(self):
        a = make_record(wall_seconds=1.0)
        assert a.record_id == make_record(wall_seconds=9.0, balanced_accuracy=0.9).record_id
        assert a.record_id != make_record(episode_id="e1").record_id

    def test_log_round_trip(self, tmp_path):
        log = ResultsLog(tmp_path / "r.jsonl")
        recs = [make_record(episode_id=f"e{i}", nodes=3, depth=1.5) for i in range(3)]
        log.append(recs[:2])
        log.append(recs[2:])
        assert log.read() == recs

    def test_malformed_line_reports_position(self, tmp_path):
        p = tmp_path / "r.jsonl"
        p.write_text(json.dumps(make_record().to_dict()) + "\n{broken\n")
        with pytest.raises(DataError, match=":2:"):
            read_records(p)

    def test_unknown_field(self, tmp_path):
        p = tmp_path / "r.jsonl"
        p.write_text(json.dumps({**make_record().to_dict(), "extra": 1}) + "\n")
        with pytest.raises(DataError):
            read_records(p)


class TestConfig:
    def test_defaults_and_nesting(self):
        cfg = ExperimentConfig.from_dict(TINY)
        assert cfg.train.finetune_steps == 10 and cfg.scenarios.folds == 2
        assert ExperimentConfig.from_dict({"dataset": {"path": "x.csv"}}).shot_grid == (
            5, 15, 50, 100, 200)

    @pytest.mark.parametrize("patch", [{"bogus": 1}, {"train": {"lrr": 1}},
                                       {"scenarios": {"fold": 3}},
                                       {"dataset": {"synth": {"classes": 3}}},
                                       {"methods": ["nope"]}, {"shot_grid": []},
                                       {"scenarios": {"restrict": "other"}}])
    def test_rejections(self, patch):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**TINY, **patch})

    def test_dataset_source_exclusive(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"dataset": {}})

    def test_yaml_file(self, tmp_path):
        import yaml
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(TINY))
        assert load_config(p) == ExperimentConfig.from_dict(TINY)
        p.write_text("dataset: [unclosed")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

class TestRunner:
    def test_partition_normalization(self, tiny):
        _, prep = tiny
        assert len(prep.train.classes) == 6 and len(prep.test.classes) == 5
        assert not set(prep.train.classes) & set(prep.test.classes)

    def test_shot_row_count(self, tiny, shot_records):
        cfg, _ = tiny
        table = build_tables(shot_records)[0]
        assert len(table.rows) * (len(table.header) - 1) == len(cfg.methods) * len(cfg.shot_grid)
        assert len(shot_records) == len(cfg.methods) * len(cfg.shot_grid) * cfg.episodes

    def test_shared_episode_ids(self, tiny, shot_records):
        cfg, _ = tiny
        for s in cfg.shot_grid:
            ids = {m: [r.episode_id for r in shot_records if r.method == m and r.shots == s]
                   for m in cfg.methods}
            first = ids[cfg.methods[0]]
            assert len(first) == cfg.episodes
            assert all(v == first for v in ids.values())

    def test_reproducible(self, tiny, shot_records):
        cfg, prep = tiny
        again = runner.sweep_shots(prep, cfg)
        assert [r.stable_dict() for r in again] == [r.stable_dict() for r in shot_records]

    def test_way_grid_shape(self, tiny):
        cfg, prep = tiny
        recs = runner.sweep_ways(prep, cfg)
        table = build_tables(recs)[1]
        dl_rows = [r for r in table.rows if r[1] != "reference"]
        assert len(dl_rows) == len(cfg.way_methods) * len(cfg.train_way_grid)
        assert all(len(r) == 2 + len(cfg.test_way_grid) and all(r[2:]) for r in table.rows)
        # train ways 2 evaluated at test ways 3: heads sized per episode
        assert any(r.train_ways == 2 and r.ways == 3 for r in recs)
        ref = [r for r in recs if r.train_ways is None]
        assert len(ref) == cfg.rf_reference_episodes * len(cfg.test_way_grid)

    def test_scenario_bookkeeping(self, tiny, monkeypatch):
        cfg, prep = tiny
        built = []
        real = runner._Predictor.__init__

        def counting(self, method, train, *a):
            built.append((method, tuple(train.classes)))
            real(self, method, train, *a)

        monkeypatch.setattr(runner._Predictor, "__init__", counting)
        recs = runner.run_scenarios_abc(prep.full, cfg)
        sc = cfg.scenarios
        n_c = sc.folds * sc.selections * len(sc.methods)
        assert sum(r.scenario == "c" for r in recs) == n_c
        assert sum(r.scenario == "b" for r in recs) == n_c
        assert sum(r.scenario == "a" for r in recs) == sc.folds * len(sc.methods)
        # one model per fold and method for (a) and (b) together, one per selection for (c)
        assert len(built) == sc.folds * len(sc.methods) + n_c
        for r in recs:
            if r.method == "rf_d10":
                assert r.nodes > 0 and r.depth <= 10 and r.params_trunk is None
            else:
                assert r.params_trunk > 0 and r.nodes is None

    def test_scenario_b_restricted_to_selection(self, tiny):
        cfg, prep = tiny
        d = prep.full
        train = d.subset(np.flatnonzero(d.y < 10))
        model = runner._Predictor("rf_unbounded", train, cfg, 0)
        pred = model.predict(d.X[:50], allowed=[1, 3, 5])
        assert set(pred) <= {1, 3, 5}
        cnn = runner._Predictor("cnn2", train, cfg, 0)
        assert set(cnn.predict(d.X[:50], allowed=[2, 4])) <= {2, 4}

    def test_plain_transfer(self, tiny):
        cfg, prep = tiny
        recs = runner.run_plain_transfer(prep, cfg)
        assert [r.method for r in recs] == ["baseline_tl"]
        assert recs[0].params_head == 200 * 5 + 5

    def test_capacity_check(self, tiny):
        cfg, prep = tiny
        big = ExperimentConfig.from_dict({**TINY, "shot_grid": [500]})
        with pytest.raises(DataError, match="test class"):
            runner.check_episode_capacity(prep, big)
        runner.check_episode_capacity(prep, cfg)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

class TestReport:
    @pytest.mark.parametrize("fmt", ["csv", "tsv", "markdown"])
    def test_empty_records_give_headers(self, tmp_path, fmt):
        paths = write_report([], tmp_path, fmt)
        shots = paths[0].read_text().splitlines()
        assert shots[0].startswith("method") or shots[0].startswith("| method")
        assert all(t.rows == [] for t in build_tables([]))

    def test_byte_identical(self, tmp_path, shot_records):
        a = write_report(shot_records, tmp_path / "a", "csv")
        b = write_report(list(reversed(shot_records)), tmp_path / "b", "csv")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_cells_traceable(self, shot_records):
        ids = {r.record_id for r in shot_records}
        table = build_tables(shot_records)[0]
        assert table.provenance
        for cell, refs in table.provenance.items():
            assert refs and set(refs) <= ids, cell

    def test_cell_values(self, shot_records):
        table = build_tables(shot_records)[0]
        row = next(r for r in table.rows if r[0] == "protonet")
        vals = [r.balanced_accuracy for r in shot_records
                if r.method == "protonet" and r.shots == 2]
        m, h = mean_ci95(vals)
        assert row[1] == f"{m:.4f}±{h:.4f}"
        assert "1.96" in render(table, "markdown")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            write_report([], tmp_path, "xlsx")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path):
    import yaml
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({**TINY, "output_dir": str(tmp_path / "out")}))
    return p


class TestCLI:
    def test_exit_codes(self, tmp_path, cfg_file, monkeypatch, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("dataset: {path: x.csv}\nunknown_key: 1\n")
        assert main(["sweep-shots", "--config", str(bad)]) == 2
        missing = tmp_path / "m.yaml"
        missing.write_text(f"dataset: {{path: {tmp_path / 'nope.csv'}}}\n")
        assert main(["sweep-shots", "--config", str(missing)]) == 3

        import fewshot_tc.bench.cli as cli

        def boom(args):
            raise NumericError("matmul", "overflow")

        monkeypatch.setattr(cli, "cmd_report", boom)
        assert main(["report", "--log", "x", "--out", str(tmp_path / "r")]) == 4

    def test_gen_partition_train_eval(self, tmp_path, cfg_file, capsys):
        data = tmp_path / "d.csv"
        assert main(["gen-data", "--classes", "6", "--max-per-class", "20", "--out",
                     str(data)]) == 0
        assert main(["partition", "--data", str(data), "--train", "3", "--val", "1",
                     "--test", "2", "--out", str(tmp_path / "p.json")]) == 0
        assert len(json.loads((tmp_path / "p.json").read_text())["test_classes"]) == 2
        model = tmp_path / "m.npz"
        assert main(["train", "--method", "protonet", "--config", str(cfg_file), "--out",
                     str(model)]) == 0
        log = tmp_path / "eval.jsonl"
        assert main(["eval-episodes", "--model", str(model), "--config", str(cfg_file),
                     "--ways", "3", "--shots", "2", "--queries", "3", "--episodes", "4",
                     "--log", str(log)]) == 0
        recs = read_records(log)
        assert len(recs) == 4 and all(r.method == "protonet" for r in recs)
        assert main(["train", "--method", "nope", "--config", str(cfg_file), "--out",
                     str(model)]) == 2

    def test_deterministic_logs(self, tmp_path, cfg_file):
        logs = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for log in logs:
            assert main(["sweep-shots", "--config", str(cfg_file), "--log", str(log)]) == 0
        a, b = (read_records(p) for p in logs)
        assert a and [r.stable_dict() for r in a] == [r.stable_dict() for r in b]

    def test_report_command(self, tmp_path, cfg_file):
        log = tmp_path / "r.jsonl"
        ResultsLog(log).append([make_record(), make_record(episode_id="e1", balanced_accuracy=1.0)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["report", "--log", str(log), "--out", str(tmp_path / "rep"),
                         "--format", "markdown"]) == 0
        assert "0.7500±" in (tmp_path / "rep" / "shots.md").read_text()
