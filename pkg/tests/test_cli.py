"""End-to-end tests for the command-line interface and its exit-code contract."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from cascadesearch import cli
from cascadesearch.errors import DataError
from cascadesearch.evalbench import parse_report

TINY_ARGS = [
    "--seed", "7",
    "--num-tlcs", "4",
    "--products-per-tlc", "8",
    "--catalog-images-per-product", "4",
    "--query-images-per-product", "2",
    "--dim", "16",
]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    assert cli.main(["synth", "--out", str(out), *TINY_ARGS]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_router(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("tiny_router")
    code = cli.main(
        ["train-router", "--data", str(tiny_data), "--out", str(out)]
    )
    assert code == 0
    return out / "router.json"


@pytest.fixture(scope="module")
def tiny_engines(tmp_path_factory, tiny_data, tiny_router):
    out = tmp_path_factory.mktemp("tiny_engines")
    code = cli.main(
        [
            "build",
            "--data", str(tiny_data),
            "--router", str(tiny_router),
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli.main(["--definitely-not-a-flag"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_flag_is_usage_error(self, capsys):
        assert cli.main(["synth", "--bogus", "3"]) == 1
        err = capsys.readouterr().err
        assert "error:" in err and "usage" in err

    def test_no_subcommand_is_usage_error(self):
        assert cli.main([]) == 1

    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "COMMAND" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        assert cli.main(["bench", "--help"]) == 0
        assert "--check" in capsys.readouterr().out

    def test_missing_input_file_is_data_error(self, tmp_path, tiny_data):
        code = cli.main(
            [
                "ingest",
                "--catalog", str(tmp_path / "missing.jsonl"),
                "--embeddings", str(tiny_data / "embeddings.cemb"),
                "--out", str(tmp_path),
            ]
        )
        assert code == 2

    def test_bad_option_value_is_usage_error(self, tiny_data, tmp_path):
        # EvalConfig requires k >= 10 so recall@10 stays defined
        code = cli.main(
            [
                "bench",
                "--data", str(tiny_data),
                "--k", "5",
                "--out", str(tmp_path),
            ]
        )
        assert code == 1

    def test_threshold_failure_maps_to_exit_3(self, monkeypatch, tmp_path):
        def boom(options, out):
            raise cli.ThresholdFailure("synthetic drift")

        monkeypatch.setitem(cli._DISPATCH, "bench", (cli._BENCH_DEFAULTS, boom))
        code = cli.main(["bench", "--preset", "reference", "--out", str(tmp_path)])
        assert code == 3

    def test_data_error_maps_to_exit_2(self, monkeypatch, tmp_path):
        def boom(options, out):
            raise DataError("synthetic data problem")

        monkeypatch.setitem(cli._DISPATCH, "synth", (cli._SYNTH_DEFAULTS, boom))
        assert cli.main(["synth", "--out", str(tmp_path)]) == 2


class TestSynth:
    def test_writes_dataset_files(self, tiny_data):
        for name in ("embeddings.cemb", "catalog.jsonl", "ground_truth.jsonl"):
            assert (tiny_data / name).exists()
        catalog_rows = (tiny_data / "catalog.jsonl").read_text().splitlines()
        truth_rows = (tiny_data / "ground_truth.jsonl").read_text().splitlines()
        assert len(catalog_rows) == 4 * 8 * (4 + 2)
        assert len(truth_rows) == 4 * 8 * 2

    def test_writes_resolved_config(self, tiny_data):
        doc = json.loads((tiny_data / "synth_resolved_config.json").read_text())
        assert doc["command"] == "synth"
        assert doc["options"]["seed"] == 7
        assert doc["options"]["num_tlcs"] == 4
        assert doc["options"]["out"] == str(tiny_data)

    def test_reference_preset_counts(self, tmp_path):
        code = cli.main(
            ["synth", "--preset", "reference", "--seed", "42", "--out", str(tmp_path)]
        )
        assert code == 0
        catalog_rows = (tmp_path / "catalog.jsonl").read_text().splitlines()
        truth_rows = (tmp_path / "ground_truth.jsonl").read_text().splitlines()
        assert len(catalog_rows) == 32_000 + 9_600
        assert len(truth_rows) == 9_600

    def test_unknown_preset_is_usage_error(self, tmp_path):
        code = cli.main(["synth", "--preset", "nope", "--out", str(tmp_path)])
        assert code == 1

    def test_rejects_invalid_geometry(self, tmp_path):
        code = cli.main(["synth", "--dim", "1", "--out", str(tmp_path)])
        assert code == 2


class TestConfigFile:
    def test_flags_override_config_file(self, tmp_path):
        config = tmp_path / "opts.json"
        config.write_text(json.dumps({"dim": 20, "num_tlcs": 3, "ignored_key": 1}))
        out = tmp_path / "out"
        code = cli.main(
            [
                "synth",
                "--config", str(config),
                "--dim", "12",
                "--products-per-tlc", "4",
                "--catalog-images-per-product", "2",
                "--query-images-per-product", "1",
                "--out", str(out),
            ]
        )
        assert code == 0
        doc = json.loads((out / "synth_resolved_config.json").read_text())
        assert doc["options"]["dim"] == 12          # flag beats file
        assert doc["options"]["num_tlcs"] == 3      # file beats default
        assert doc["options"]["seed"] == 42         # untouched default
        assert "ignored_key" not in doc["options"]  # unknown keys dropped

    def test_bad_json_is_usage_error(self, tmp_path):
        config = tmp_path / "opts.json"
        config.write_text("{not json")
        assert cli.main(["synth", "--config", str(config)]) == 1

    def test_non_object_is_usage_error(self, tmp_path):
        config = tmp_path / "opts.json"
        config.write_text("[1, 2]")
        assert cli.main(["synth", "--config", str(config)]) == 1

    def test_missing_config_file_is_usage_error(self, tmp_path):
        assert cli.main(["synth", "--config", str(tmp_path / "nope.json")]) == 1


class TestIngest:
    def test_validation_report(self, tiny_data, tmp_path):
        code = cli.main(
            [
                "ingest",
                "--catalog", str(tiny_data / "catalog.jsonl"),
                "--embeddings", str(tiny_data / "embeddings.cemb"),
                "--out", str(tmp_path),
            ]
        )
        assert code == 0
        doc = json.loads((tmp_path / "validation.json").read_text())
        assert doc["images_total"] == 192
        assert doc["tlcs"] == 4
        assert doc["dim"] == 16
        assert len(doc["fingerprint"]) == 64

    def test_missing_flags_are_usage_errors(self, tiny_data, tmp_path):
        code = cli.main(
            ["ingest", "--catalog", str(tiny_data / "catalog.jsonl"),
             "--out", str(tmp_path)]
        )
        assert code == 1


class TestTrainRouter:
    def test_summary_and_artifact(self, tiny_router):
        assert tiny_router.exists()
        summary = json.loads(
            (tiny_router.parent / "train_router_summary.json").read_text()
        )
        assert summary["domain"] == "query"
        assert summary["classes"] == 4
        assert summary["train_rows"] + summary["holdout_rows"] == 64
        assert summary["holdout_accuracy"] >= 0.5

    def test_bad_domain_is_usage_error(self, tiny_data, tmp_path):
        code = cli.main(
            ["train-router", "--data", str(tiny_data), "--domain", "sideways",
             "--out", str(tmp_path)]
        )
        assert code == 1

    def test_all_domain_uses_every_row(self, tiny_data, tmp_path):
        code = cli.main(
            ["train-router", "--data", str(tiny_data), "--domain", "all",
             "--out", str(tmp_path)]
        )
        assert code == 0
        summary = json.loads((tmp_path / "train_router_summary.json").read_text())
        assert summary["train_rows"] + summary["holdout_rows"] == 192


class TestBuildAndSearch:
    def test_build_writes_both_engines(self, tiny_engines):
        for name in ("baseline_engine", "cascade_engine"):
            assert (tiny_engines / name / "manifest.json").exists()

    def test_cascade_without_router_is_usage_error(self, tiny_data, tmp_path):
        code = cli.main(
            ["build", "--data", str(tiny_data), "--mode", "cascade",
             "--out", str(tmp_path)]
        )
        assert code == 1

    def test_router_and_oracle_are_mutually_exclusive(
        self, tiny_data, tiny_router, tmp_path
    ):
        code = cli.main(
            ["build", "--data", str(tiny_data), "--router", str(tiny_router),
             "--oracle-accuracy", "1.0", "--out", str(tmp_path)]
        )
        assert code == 1

    def test_search_writes_one_row_per_query(self, tiny_data, tiny_engines, tmp_path):
        code = cli.main(
            [
                "search",
                "--engine", str(tiny_engines / "cascade_engine"),
                "--queries", str(tiny_data / "embeddings.cemb"),
                "--k", "3",
                "--out", str(tmp_path),
            ]
        )
        assert code == 0
        rows = [
            json.loads(line)
            for line in (tmp_path / "results.jsonl").read_text().splitlines()
        ]
        assert len(rows) == 192
        assert all(len(r["results"]) <= 3 for r in rows)
        assert all(
            r["route_ns"] + r["search_ns"] + r["merge_ns"] == r["total_ns"]
            for r in rows
        )

    def test_oracle_engine_requires_ground_truth(self, tiny_data, tmp_path):
        engines = tmp_path / "engines"
        code = cli.main(
            ["build", "--data", str(tiny_data), "--mode", "cascade",
             "--oracle-accuracy", "1.0", "--out", str(engines)]
        )
        assert code == 0
        without = cli.main(
            [
                "search",
                "--engine", str(engines / "cascade_engine"),
                "--queries", str(tiny_data / "embeddings.cemb"),
                "--out", str(tmp_path),
            ]
        )
        assert without == 1

    def test_oracle_engine_with_ground_truth_needs_known_ids(
        self, tiny_data, tmp_path
    ):
        engines = tmp_path / "engines"
        assert cli.main(
            ["build", "--data", str(tiny_data), "--mode", "cascade",
             "--oracle-accuracy", "1.0", "--out", str(engines)]
        ) == 0
        # the embeddings file holds catalog-domain ids too, which have no
        # ground-truth rows -> data error
        code = cli.main(
            [
                "search",
                "--engine", str(engines / "cascade_engine"),
                "--queries", str(tiny_data / "embeddings.cemb"),
                "--ground-truth", str(tiny_data / "ground_truth.jsonl"),
                "--out", str(tmp_path),
            ]
        )
        assert code == 2


@pytest.fixture(scope="module")
def bench_out(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("bench_out")
    code = cli.main(
        ["bench", "--data", str(tiny_data), "--measured", "100",
         "--warmup", "1", "--out", str(out)]
    )
    assert code == 0
    return out


class TestBench:
    def test_emits_all_artifacts(self, bench_out):
        for name in (
            "baseline.json",
            "cascade.json",
            "baseline_latency.csv",
            "cascade_latency.csv",
            "comparison.json",
            "comparison.md",
            "bench_resolved_config.json",
        ):
            assert (bench_out / name).exists()

    def test_reports_parse_back(self, bench_out):
        baseline = parse_report((bench_out / "baseline.json").read_bytes())
        cascade = parse_report((bench_out / "cascade.json").read_bytes())
        assert baseline.dataset_fingerprint == cascade.dataset_fingerprint
        assert baseline.routing_accuracy is None
        assert cascade.routing_accuracy == 1.0

    def test_quality_metrics_reproduce_exactly(self, bench_out, tiny_data, tmp_path):
        code = cli.main(
            ["bench", "--data", str(tiny_data), "--measured", "100",
             "--warmup", "1", "--out", str(tmp_path)]
        )
        assert code == 0
        first = json.loads((bench_out / "cascade.json").read_text())
        second = json.loads((tmp_path / "cascade.json").read_text())
        for metric in ("recall_at_1", "recall_at_5", "recall_at_10",
                       "map_at_10", "mrr", "routing_accuracy",
                       "dataset_fingerprint"):
            assert first[metric] == second[metric]

    def test_requires_exactly_one_source(self, tiny_data, tmp_path):
        both = cli.main(
            ["bench", "--preset", "reference", "--data", str(tiny_data),
             "--out", str(tmp_path)]
        )
        neither = cli.main(["bench", "--out", str(tmp_path)])
        assert (both, neither) == (1, 1)

    def test_check_requires_reference_preset(self, tiny_data, tmp_path):
        code = cli.main(
            ["bench", "--data", str(tiny_data), "--check", "--out", str(tmp_path)]
        )
        assert code == 1

    def test_check_rejects_modified_options(self, tmp_path):
        code = cli.main(
            ["bench", "--preset", "reference", "--check", "--route-top-m", "2",
             "--out", str(tmp_path)]
        )
        assert code == 1

    def test_baseline_only_mode_skips_comparison(self, tiny_data, tmp_path):
        code = cli.main(
            ["bench", "--data", str(tiny_data), "--mode", "baseline",
             "--measured", "100", "--warmup", "1", "--out", str(tmp_path)]
        )
        assert code == 0
        assert (tmp_path / "baseline.json").exists()
        assert not (tmp_path / "cascade.json").exists()
        assert not (tmp_path / "comparison.json").exists()


class TestThresholdCheck:
    def _reports(self, tiny_data, tmp_path):
        out = tmp_path / "rep"
        assert cli.main(
            ["bench", "--data", str(tiny_data), "--measured", "100",
             "--warmup", "1", "--out", str(out)]
        ) == 0
        return {
            "baseline": parse_report((out / "baseline.json").read_bytes()),
            "cascade": parse_report((out / "cascade.json").read_bytes()),
        }

    def test_passes_when_frozen_numbers_match(
        self, tiny_data, tmp_path, monkeypatch
    ):
        reports = self._reports(tiny_data, tmp_path)
        frozen = {
            "dataset_fingerprint": reports["baseline"].dataset_fingerprint,
            "metrics": {
                name: {
                    metric: getattr(reports[name], metric)
                    for metric in ("recall_at_1", "recall_at_5", "recall_at_10",
                                   "map_at_10", "mrr")
                }
                for name in ("baseline", "cascade")
            },
            "mean_improvement_pct": cli.compare(
                reports["baseline"], reports["cascade"]
            ).mean_improvement_pct,
        }
        monkeypatch.setattr(cli, "REFERENCE_FROZEN", frozen)
        cli._check_reference_thresholds(reports)  # must not raise

    def test_fingerprint_drift_raises(self, tiny_data, tmp_path, monkeypatch):
        reports = self._reports(tiny_data, tmp_path)
        frozen = {
            "dataset_fingerprint": "0" * 64,
            "metrics": {"baseline": {}, "cascade": {}},
            "mean_improvement_pct": cli.compare(
                reports["baseline"], reports["cascade"]
            ).mean_improvement_pct,
        }
        monkeypatch.setattr(cli, "REFERENCE_FROZEN", frozen)
        with pytest.raises(cli.ThresholdFailure, match="fingerprint"):
            cli._check_reference_thresholds(reports)

    def test_metric_drift_beyond_tolerance_raises(
        self, tiny_data, tmp_path, monkeypatch
    ):
        reports = self._reports(tiny_data, tmp_path)
        drifted = reports["cascade"].recall_at_1 + 0.5
        frozen = {
            "dataset_fingerprint": reports["baseline"].dataset_fingerprint,
            "metrics": {
                "baseline": {},
                "cascade": {"recall_at_1": drifted},
            },
            "mean_improvement_pct": cli.compare(
                reports["baseline"], reports["cascade"]
            ).mean_improvement_pct,
        }
        monkeypatch.setattr(cli, "REFERENCE_FROZEN", frozen)
        with pytest.raises(cli.ThresholdFailure, match="recall_at_1"):
            cli._check_reference_thresholds(reports)


class TestCompare:
    def test_identical_reports_give_zero_improvements(self, bench_out, tmp_path):
        code = cli.main(
            ["compare", str(bench_out / "baseline.json"),
             str(bench_out / "baseline.json"), "--out", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "comparison.json").read_text())
        assert doc["mean_improvement_pct"] == 0.0
        assert all(v == 0.0 for v in doc["improvements_pct"].values())
        assert doc["latency_delta_pct"] == 0.0

    def test_baseline_vs_cascade(self, bench_out, tmp_path):
        code = cli.main(
            ["compare", str(bench_out / "baseline.json"),
             str(bench_out / "cascade.json"), "--out", str(tmp_path)]
        )
        assert code == 0
        assert (tmp_path / "comparison.md").exists()
        doc = json.loads((tmp_path / "comparison.json").read_text())
        assert doc["report_kind"] == "comparison"

    def test_mismatched_datasets_are_a_data_error(
        self, bench_out, tiny_data, tmp_path
    ):
        other_data = tmp_path / "other"
        assert cli.main(
            ["synth", "--out", str(other_data), "--seed", "8",
             *TINY_ARGS[2:]]
        ) == 0
        other_out = tmp_path / "other_bench"
        assert cli.main(
            ["bench", "--data", str(other_data), "--mode", "baseline",
             "--measured", "100", "--warmup", "1", "--out", str(other_out)]
        ) == 0
        code = cli.main(
            ["compare", str(other_out / "baseline.json"),
             str(bench_out / "cascade.json"), "--out", str(tmp_path)]
        )
        assert code == 2

    def test_comparison_file_as_input_is_a_data_error(self, bench_out, tmp_path):
        code = cli.main(
            ["compare", str(bench_out / "comparison.json"),
             str(bench_out / "cascade.json"), "--out", str(tmp_path)]
        )
        assert code == 2

    def test_garbage_file_is_a_data_error(self, bench_out, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("not a report")
        code = cli.main(
            ["compare", str(bad), str(bench_out / "cascade.json"),
             "--out", str(tmp_path)]
        )
        assert code == 2


class TestServe:
    def test_bootstrap_builds_engines(self, tiny_data, tmp_path, monkeypatch):
        import uvicorn
        from fastapi.testclient import TestClient

        captured = {}

        def fake_run(app, host, port):
            captured["app"] = app
            captured["host"] = host
            captured["port"] = port

        monkeypatch.setattr(uvicorn, "run", fake_run)
        code = cli.main(
            ["serve", "--data", str(tiny_data), "--port", "8123",
             "--out", str(tmp_path)]
        )
        assert code == 0
        assert captured["port"] == 8123
        client = TestClient(captured["app"])
        assert client.get("/v1/healthz").status_code == 200
        stats = client.get("/v1/stats").json()
        assert stats["build_version"] == 1

    def test_bootstrap_failure_is_a_data_error(self, tmp_path, monkeypatch):
        import uvicorn

        monkeypatch.setattr(
            uvicorn, "run", lambda *a, **kw: pytest.fail("must not serve")
        )
        code = cli.main(
            ["serve", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]
        )
        assert code == 2


class TestModuleEntryPoint:
    def test_python_dash_m_invocation(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "cascadesearch.cli", "synth",
             "--out", str(tmp_path), *TINY_ARGS],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert (tmp_path / "embeddings.cemb").exists()

    def test_usage_error_exit_code_in_subprocess(self):
        result = subprocess.run(
            [sys.executable, "-m", "cascadesearch.cli", "frobnicate"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 1
