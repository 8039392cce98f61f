"""Config parsing, sweep execution, and CSV schema tests."""

import json

import numpy as np
import pytest

from flaps.data import LabeledDataset, make_synthetic, save_idx
from flaps.experiment import (
    METRICS_HEADER,
    OUT_DIR_ENV,
    TIME_HEADER,
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    build_dataset,
    config_to_dict,
    default_out_dir,
    expand_jobs,
    format_comparison,
    parse_config,
    read_metrics_csv,
    read_time_csv,
    run_sweep,
    write_metrics_csv,
    write_time_csv,
)


SMALL_SWEEP = {
    "dataset": {"kind": "synthetic", "n_examples": 240, "dim": 6, "n_classes": 3, "seed": 5},
    "n_clients": 8,
    "k_list": [2, 3],
    "seeds": [0, 1],
    "train": {"learning_rate": 2e-2, "max_epochs": 6},
    "out_dir": "unused",
}


@pytest.fixture(scope="module")
def small_results():
    results, failures = run_sweep(parse_config(SMALL_SWEEP))
    assert failures == []
    return results


class TestParseConfig:
    def test_empty_mapping_gives_full_defaults(self):
        config = parse_config({})
        assert config.n_clients == 200
        assert config.k_list == tuple(range(2, 21))
        assert config.modes == ("flaps", "fl", "central")
        assert config.seeds == (0,)
        assert config.dataset.kind == "synthetic"
        assert config.dataset.n_examples == 5000
        assert config.train.optimizer == "rmsprop"

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="gpu"):
            parse_config({"gpu": True})

    def test_unknown_nested_keys_rejected(self):
        with pytest.raises(ConfigError, match="dataset"):
            parse_config({"dataset": {"kind": "synthetic", "rows": 5}})
        with pytest.raises(ConfigError, match="train"):
            parse_config({"train": {"momentum": 0.9}})
        with pytest.raises(ConfigError, match="drops"):
            parse_config({"drops": {"warmup": 0.5}})

    def test_k_bounds_enforced(self):
        with pytest.raises(ConfigError, match="k_list"):
            parse_config({"k_list": [1]})
        with pytest.raises(ConfigError, match="k_list"):
            parse_config({"n_clients": 10, "k_list": [10]})

    def test_mode_set_validated(self):
        with pytest.raises(ConfigError, match="modes"):
            parse_config({"modes": []})
        with pytest.raises(ConfigError, match="decentralized"):
            parse_config({"modes": ["decentralized"]})
        with pytest.raises(ConfigError, match="repeat"):
            parse_config({"modes": ["fl", "fl"]})

    def test_dataset_requirements(self):
        with pytest.raises(ConfigError, match="path"):
            parse_config({"dataset": {"kind": "csv"}})
        with pytest.raises(ConfigError, match="idx"):
            parse_config({"dataset": {"kind": "idx", "train_images": "a"}})
        with pytest.raises(ConfigError, match="kind"):
            parse_config({"dataset": {"kind": "parquet"}})
        with pytest.raises(ConfigError, match="test_fraction"):
            parse_config({"dataset": {"test_fraction": 1.5}})

    def test_seed_and_transport_validation(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config({"seeds": []})
        with pytest.raises(ConfigError, match="seeds"):
            parse_config({"seeds": [-1]})
        with pytest.raises(ConfigError, match="transport"):
            parse_config({"transport": "carrier-pigeon"})

    def test_canonical_round_trip(self):
        config = parse_config(SMALL_SWEEP)
        again = parse_config(config_to_dict(config))
        assert again == config

    def test_file_source(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(SMALL_SWEEP))
        assert parse_config(path) == parse_config(SMALL_SWEEP)

    def test_bad_files_named(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            parse_config(bad)
        scalar = tmp_path / "scalar.json"
        scalar.write_text("42")
        with pytest.raises(ConfigError, match="object"):
            parse_config(scalar)

    def test_out_dir_falls_back_to_environment(self, monkeypatch):
        monkeypatch.setenv(OUT_DIR_ENV, "/tmp/elsewhere")
        assert default_out_dir() == "/tmp/elsewhere"
        assert parse_config({}).out_dir == "/tmp/elsewhere"
        monkeypatch.delenv(OUT_DIR_ENV)
        assert parse_config({}).out_dir == "results"
        assert parse_config({"out_dir": "mine"}).out_dir == "mine"


class TestBuildDataset:
    def test_synthetic_split_sizes(self):
        spec = DatasetSpec(kind="synthetic", n_examples=400, dim=5, n_classes=4,
                           test_fraction=0.25, seed=3)
        train, test = build_dataset(spec)
        assert len(train) == 400
        assert len(test) == 100
        assert train.n_classes == test.n_classes == 4
        assert train.dim == 5

    def test_csv_split_deterministic(self, tmp_path):
        rows = ["f0,f1,label"] + [f"{i/40:.3f},{(40-i)/40:.3f},{i % 2}" for i in range(40)]
        path = tmp_path / "cohort.csv"
        path.write_text("\n".join(rows) + "\n")
        spec = DatasetSpec(kind="csv", path=str(path), test_fraction=0.2, seed=7)
        train_a, test_a = build_dataset(spec)
        train_b, test_b = build_dataset(spec)
        assert len(train_a) == 32 and len(test_a) == 8
        np.testing.assert_array_equal(train_a.features, train_b.features)
        np.testing.assert_array_equal(test_a.labels, test_b.labels)

    def test_idx_pairs_loaded(self, tmp_path):
        def on_byte_grid(dataset):
            snapped = np.rint(dataset.features * 255.0) / 255.0
            return LabeledDataset(snapped, dataset.labels, dataset.n_classes)

        train_set = on_byte_grid(make_synthetic(30, 9, 3, seed=1))
        test_set = on_byte_grid(make_synthetic(12, 9, 3, seed=2))
        paths = {name: str(tmp_path / f"{name}.idx") for name in
                 ("train_images", "train_labels", "test_images", "test_labels")}
        save_idx(train_set, paths["train_images"], paths["train_labels"])
        save_idx(test_set, paths["test_images"], paths["test_labels"])
        train, test = build_dataset(DatasetSpec(kind="idx", **paths))
        assert len(train) == 30
        assert len(test) == 12
        np.testing.assert_array_equal(train.labels, train_set.labels)


class TestRunSweep:
    def test_row_grid_and_order(self, small_results):
        keys = [(r.mode, r.k, r.seed) for r in small_results]
        assert keys == [
            ("central", None, 0), ("central", None, 1),
            ("fl", None, 0), ("fl", None, 1),
            ("flaps", 2, 0), ("flaps", 2, 1),
            ("flaps", 3, 0), ("flaps", 3, 1),
        ]
        assert all(r.metrics is not None for r in small_results)

    def test_central_alone_ignores_k_list(self):
        config = parse_config({**SMALL_SWEEP, "modes": ["central"], "seeds": [0]})
        results, failures = run_sweep(config)
        assert failures == []
        assert len(results) == 1
        assert results[0].mode == "central"

    def test_job_grid_expansion(self):
        config = parse_config(SMALL_SWEEP)
        jobs = expand_jobs(config)
        assert len(jobs) == 2 * 2 + 2 + 2
        assert jobs.count(("flaps", 2, 0)) == 1

    def test_failures_carry_coordinates(self):
        config = parse_config({**SMALL_SWEEP, "seeds": [0], "drops": {"ready": 1.0}})
        results, failures = run_sweep(config)
        modes = {r.mode for r in results}
        assert modes == {"fl", "central"}  # baselines have no poll to fail
        assert {(f.mode, f.k, f.seed) for f in failures} == {("flaps", 2, 0), ("flaps", 3, 0)}
        assert all("attempts" in f.reason for f in failures)

    def test_oversized_cohort_rejected(self):
        config = parse_config({**SMALL_SWEEP, "n_clients": 999})
        with pytest.raises(ConfigError, match="n_clients"):
            run_sweep(config)

    def test_metrics_deterministic_across_sweeps(self, small_results, tmp_path):
        again, _ = run_sweep(parse_config(SMALL_SWEEP))
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(small_results, first)
        write_metrics_csv(again, second)
        assert first.read_bytes() == second.read_bytes()


class TestCsvSchema:
    def test_headers_exact(self, small_results, tmp_path):
        time_path, metrics_path = tmp_path / "t.csv", tmp_path / "m.csv"
        write_time_csv(small_results, time_path)
        write_metrics_csv(small_results, metrics_path)
        assert time_path.read_text().splitlines()[0] == ",".join(TIME_HEADER)
        assert metrics_path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)

    def test_final_line_terminated(self, small_results, tmp_path):
        path = tmp_path / "t.csv"
        write_time_csv(small_results, path)
        assert path.read_bytes().endswith(b"\n")

    def test_row_counts_match_results(self, small_results, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(small_results, path)
        assert len(read_metrics_csv(path)) == len(small_results)

    def test_baseline_k_cell_empty(self, small_results, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(small_results, path)
        lines = path.read_text().splitlines()
        assert lines[1].startswith("central,,0,")
        back = read_metrics_csv(path)
        assert back[0]["k"] is None
        assert back[-1]["k"] == 3

    def test_round_trip_within_format_tolerance(self, small_results, tmp_path):
        time_path, metrics_path = tmp_path / "t.csv", tmp_path / "m.csv"
        write_time_csv(small_results, time_path)
        write_metrics_csv(small_results, metrics_path)
        for row, result in zip(read_time_csv(time_path), small_results):
            t = result.timing
            for name, value in (("t1", t.t1), ("t2", t.t2), ("t3", t.t3),
                                ("t4", t.t4), ("total", t.total)):
                assert abs(row[name] - value) < 5e-7
        for row, result in zip(read_metrics_csv(metrics_path), small_results):
            m = result.metrics
            for name, value in (("loss", m.loss), ("auc", m.auc),
                                ("fscore", m.fscore), ("accuracy", m.accuracy)):
                assert abs(row[name] - value) < 5e-7
            assert row["mode"] == result.mode

    def test_empty_results_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no results"):
            write_time_csv([], tmp_path / "t.csv")
        with pytest.raises(ValueError, match="no results"):
            write_metrics_csv([], tmp_path / "m.csv")

    def test_reader_checks_header_and_shape(self, small_results, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(small_results, path)
        with pytest.raises(ValueError, match="header"):
            read_time_csv(path)
        ragged = tmp_path / "ragged.csv"
        ragged.write_text(",".join(METRICS_HEADER) + "\nflaps,2,0,0.5\n")
        with pytest.raises(ValueError, match="fields"):
            read_metrics_csv(ragged)


class TestComparison:
    def test_budget_rows_with_deltas(self, small_results):
        table = format_comparison(small_results)
        lines = table.splitlines()
        assert lines[0].startswith("k")
        assert len(lines) == 3  # header + k=2 + k=3
        assert "+" in table or "-" in table

    def test_baseline_only_results(self, small_results):
        baselines = [r for r in small_results if r.mode != "flaps"]
        table = format_comparison(baselines)
        assert "central" in table
        assert "fl" in table
