"""Command-line runner: sub-commands, artifacts and exit codes"""

import json
import logging

import pytest

from config.logging_config import get_log_file_paths
from main import EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from report import ReportBundle
from storage import read_csv, read_history, read_json, write_jsonl

TINY_CONFIG = {
    "scene": {
        "width": 32,
        "height": 32,
        "num_classes": 3,
        "max_objects": 2,
        "min_object_size": 10.0,
        "max_object_size": 16.0,
    },
    "features": {"channels": 4},
    "proposals": {"n_jitter": 3},
    "sample": {"n_cls_c": 4, "n_cls_m": 4, "n_reg": 4},
    "polish": {"cat_resolution": 2, "cat_hidden": 8, "box_resolution": 2, "box_hidden": [8, 8, 4]},
    "polish_train": {"iterations": 2, "eval_scenes": 2},
    "ssod": {"heads": {"roi_resolution": 2, "hidden": 8}, "iterations": 2, "polish_warmup_iters": 2, "log_every": 1},
    "metrics": {"eval_every": 2, "eval_scenes": 2},
    "mc_stats": {"thetas": [0.1, 0.2], "n": 300},
    "data": {"n_annotated": 3, "n_unannotated": 4},
}


@pytest.fixture(autouse=True)
def quiet_logging(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("LOG_TO_CONSOLE", "false")
    monkeypatch.delenv("POLISH_THREADS", raising=False)
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


def _config(tmp_path, **sections) -> str:
    doc = json.loads(json.dumps(TINY_CONFIG))
    for name, value in sections.items():
        doc[name] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _run(tmp_path, *args, config=None) -> int:
    return main([*args, "--config", config or _config(tmp_path), "--out", str(tmp_path / "out")])


def _snapshot(directory):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestConfigErrors:
    def test_unknown_field(self, tmp_path, capsys):
        assert _run(tmp_path, "make-data", config=_config(tmp_path, bogus=1)) == EXIT_USAGE
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert _run(tmp_path, "make-data", config=str(tmp_path / "absent.json")) == EXIT_USAGE

    def test_invalid_value(self, tmp_path):
        bad = dict(TINY_CONFIG["sample"], theta_cls_c=0.5, theta_cls_m=0.4)
        assert _run(tmp_path, "make-data", config=_config(tmp_path, sample=bad)) == EXIT_USAGE

    def test_negative_n(self, tmp_path):
        assert _run(tmp_path, "mc-stats", "--n", "0") == EXIT_USAGE

    def test_bad_thread_count(self, tmp_path, monkeypatch):
        monkeypatch.setenv("POLISH_THREADS", "many")
        assert _run(tmp_path, "mc-stats") == EXIT_USAGE

    def test_unknown_command(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2

    def test_logs_written_to_log_dir(self, tmp_path):
        assert _run(tmp_path, "make-data") == EXIT_OK
        main_log, _ = get_log_file_paths()
        assert main_log == tmp_path / "logs" / "polish_sim.log"
        assert main_log.exists()

    def test_default_log_dir_is_outside_output(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LOG_DIR")
        monkeypatch.chdir(tmp_path)
        config = _config(tmp_path)
        for out in ("out_a", "out_b"):
            assert main(["make-data", "--config", config, "--out", out]) == EXIT_OK
            assert main(["train-polish", "--config", config, "--out", out]) == EXIT_OK
        assert (tmp_path / "logs" / "polish_sim.log").exists()
        assert not (tmp_path / "out_a" / "logs").exists()
        first = _snapshot(tmp_path / "out_a")
        assert first and first == _snapshot(tmp_path / "out_b")


class TestMcStats:
    def test_outputs(self, tmp_path, capsys):
        assert _run(tmp_path, "mc-stats", "--theta", "0.25") == EXIT_OK
        rows = json.loads(capsys.readouterr().out)
        assert [r["theta"] for r in rows] == [0.25]
        assert 0.0 < rows[0]["mean_iou"] < 1.0

        doc = read_json(tmp_path / "out" / "mc_stats.json")
        assert doc["n"] == 300 and doc["seed"] == 42
        assert "category_samples" in doc
        csv_rows = read_csv(tmp_path / "out" / "mc_stats.csv")
        assert len(csv_rows) == 1 and "dev_x1_mean" in csv_rows[0]

    def test_byte_identical_reruns(self, tmp_path):
        assert _run(tmp_path, "mc-stats", "--seed", "3") == EXIT_OK
        first = (tmp_path / "out" / "mc_stats.json").read_bytes()
        assert _run(tmp_path, "mc-stats", "--seed", "3") == EXIT_OK
        assert (tmp_path / "out" / "mc_stats.json").read_bytes() == first

    def test_thread_count_does_not_change_results(self, tmp_path, monkeypatch):
        assert _run(tmp_path, "mc-stats", "--n", "25000") == EXIT_OK
        single = (tmp_path / "out" / "mc_stats.json").read_bytes()
        monkeypatch.setenv("POLISH_THREADS", "2")
        assert _run(tmp_path, "mc-stats", "--n", "25000") == EXIT_OK
        assert (tmp_path / "out" / "mc_stats.json").read_bytes() == single

    def test_seed_flag_overrides_config(self, tmp_path):
        assert _run(tmp_path, "mc-stats", config=_config(tmp_path, seed=5)) == EXIT_OK
        assert read_json(tmp_path / "out" / "mc_stats.json")["seed"] == 5
        assert _run(tmp_path, "mc-stats", "--seed", "9", config=_config(tmp_path, seed=5)) == EXIT_OK
        assert read_json(tmp_path / "out" / "mc_stats.json")["seed"] == 9


class TestMakeData:
    def test_counts_and_split_file(self, tmp_path, capsys):
        assert _run(tmp_path, "make-data") == EXIT_OK
        out = capsys.readouterr().out
        assert "annotated=3 unannotated=4" in out
        doc = read_json(tmp_path / "out" / "split.json")
        assert doc["format"] == "polish-sim-split"
        assert len(doc["annotated"]) == 3 and len(doc["unannotated"]) == 4


class TestMissingSplit:
    def test_train_polish(self, tmp_path):
        assert _run(tmp_path, "train-polish") == EXIT_IO

    def test_run_ssod(self, tmp_path):
        assert _run(tmp_path, "run-ssod") == EXIT_IO


class TestTrainPolish:
    def test_artifacts(self, tmp_path, capsys):
        assert _run(tmp_path, "make-data") == EXIT_OK
        assert _run(tmp_path, "train-polish") == EXIT_OK
        polish_dir = tmp_path / "out" / "polish"
        history = read_history(polish_dir / "history.jsonl")
        assert [r["iteration"] for r in history] == [0, 1]
        for name in ("category_polisher.json", "box_polisher.json", "polishers.json"):
            assert (polish_dir / "polishers" / name).exists()
        deviation = read_json(polish_dir / "deviation.json")
        assert "simulated" in deviation
        printed = json.loads(capsys.readouterr().out.split("\n", 1)[1])
        assert set(printed) == {"before", "after", "candidates_before", "candidates_after"}
        assert printed["candidates_before"]["count"] <= printed["before"]["count"]
        assert printed["candidates_after"]["count"] == printed["candidates_before"]["count"]
        for label in printed:
            assert (polish_dir / f"quality_{label}.json").exists()


class TestRunSsod:
    def test_run_then_report(self, tmp_path):
        assert _run(tmp_path, "make-data") == EXIT_OK
        assert _run(tmp_path, "run-ssod") == EXIT_OK
        run_dir = tmp_path / "out" / "ssod-full-giou"
        history = read_history(run_dir / "history.jsonl")
        assert [r["iteration"] for r in history] == [0, 1]
        assert "eval" in history[-1]
        summary = read_json(run_dir / "summary.json")
        assert summary["iterations"] == 2 and summary["final_ap"] is not None
        assert (run_dir / "teacher_cls_head.json").exists()

        assert main(["report", "--run-dir", str(tmp_path / "out")]) == EXIT_OK
        report_dir = tmp_path / "out" / "report"
        bundle = ReportBundle.model_validate(read_json(report_dir / "bundle.json"))
        assert [r.run for r in bundle.runs] == ["ssod-full-giou"]
        assert len(bundle.loss_curves) == 2
        assert (report_dir / "schema.json").exists()

        first = (report_dir / "bundle.json").read_bytes()
        assert main(["report", "--run-dir", str(tmp_path / "out")]) == EXIT_OK
        assert (report_dir / "bundle.json").read_bytes() == first

    def test_variant_directory(self, tmp_path):
        assert _run(tmp_path, "make-data") == EXIT_OK
        assert _run(tmp_path, "run-ssod", "--no-cat-polish", "--loss", "l1") == EXIT_OK
        assert (tmp_path / "out" / "ssod-no_cat_polish-l1" / "summary.json").exists()

    def test_divergence_exit_code(self, tmp_path):
        ssod = dict(TINY_CONFIG["ssod"], optimizer={"lr": float("inf")}, loss_weights={"lambda_u": 0.0})
        config = _config(tmp_path, ssod=ssod)
        assert _run(tmp_path, "make-data", config=config) == EXIT_OK
        assert _run(tmp_path, "run-ssod", "--no-cat-polish", "--no-box-polish", config=config) == EXIT_DIVERGENCE


class TestReport:
    def test_missing_directory(self, tmp_path):
        assert main(["report", "--run-dir", str(tmp_path / "nowhere")]) == EXIT_USAGE

    def test_directory_without_runs(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["report", "--run-dir", str(tmp_path / "empty")]) == EXIT_USAGE

    def test_unfinished_run_without_summary(self, tmp_path):
        write_jsonl(tmp_path / "runs" / "ssod-full-giou" / "history.jsonl", [{"iteration": 0}])
        assert main(["report", "--run-dir", str(tmp_path / "runs")]) == EXIT_USAGE


class TestSweep:
    def test_one_row_per_value(self, tmp_path):
        assert _run(tmp_path, "make-data") == EXIT_OK
        assert _run(tmp_path, "sweep", "--param", "eta", "--values", "0.3", "0.7") == EXIT_OK
        rows = read_csv(tmp_path / "out" / "sweep-eta.csv")
        assert [float(r["value"]) for r in rows] == [0.3, 0.7]
        assert all(r["param"] == "eta" for r in rows)
        assert (tmp_path / "out" / "sweep-eta" / "eta=0.3" / "summary.json").exists()

    def test_out_of_range_value(self, tmp_path):
        assert _run(tmp_path, "make-data") == EXIT_OK
        assert _run(tmp_path, "sweep", "--param", "eta", "--values", "1.5") == EXIT_USAGE


@pytest.mark.slow
class TestPolishingEfficacy:
    def test_benchmark_quality_gains(self, tmp_path):
        doc = {
            "seed": 42,
            "data": {"n_annotated": 200, "n_unannotated": 800},
            "polish_train": {"eval_scenes": 800},
        }
        config = tmp_path / "benchmark.json"
        config.write_text(json.dumps(doc), encoding="utf-8")
        assert _run(tmp_path, "make-data", config=str(config)) == EXIT_OK
        assert _run(tmp_path, "train-polish", config=str(config)) == EXIT_OK

        polish_dir = tmp_path / "out" / "polish"
        quality = {
            label: read_json(polish_dir / f"quality_{label}.json")
            for label in ("before", "after", "candidates_before", "candidates_after")
        }
        assert quality["after"]["mean_iou"] >= quality["before"]["mean_iou"] + 0.05
        assert quality["candidates_before"]["count"] > 0
        gain = quality["candidates_after"]["category_accuracy"] - quality["candidates_before"]["category_accuracy"]
        assert gain >= 0.05
