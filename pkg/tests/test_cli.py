from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from ctxguard.cli import main
from ctxguard.loadgen import recompute_report, write_samples

SMALL = ("--set", "encoder.dimension=16", "--set", "encoder.hash_buckets=1024",
         "--set", "kb.k=2", "--set", "training.epochs=3")


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def dataset(tmp_path) -> str:
    rows = []
    for i in range(20):
        label = "safe" if i % 2 == 0 else "unsafe"
        marker = "sunny" if label == "safe" else "storm"
        rows.append({"text": f"sample number {i} about {marker} weather", "label": label})
    path = tmp_path / "data.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return str(path)


def test_unknown_flag_exits_2(runner):
    result = runner.invoke(main, ["train", "--bogus"])
    assert result.exit_code == 2


def test_missing_dataset_exits_1_names_path(runner, tmp_path):
    result = runner.invoke(
        main, [*SMALL, "train", "--dataset", str(tmp_path / "nope.jsonl"),
               "--out", str(tmp_path / "out")],
    )
    assert result.exit_code == 1
    assert "nope.jsonl" in result.output


def test_train_writes_artifacts(runner, dataset, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(main, [*SMALL, "train", "--dataset", dataset, "--out", str(out)])
    assert result.exit_code == 0, result.output
    for name in ("teacher.ckpt", "kb.jsonl", "train_report.json", "train_losses.png",
                 "perturbations.jsonl", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "dataset" in manifest["inputs"]


def test_eval_deterministic_artifacts(runner, dataset, tmp_path):
    out = tmp_path / "run"
    assert runner.invoke(main, [*SMALL, "train", "--dataset", dataset, "--out", str(out)]).exit_code == 0
    args = [*SMALL, "eval", "--dataset", dataset, "--params", str(out / "teacher.ckpt"),
            "--kb", str(out / "kb.jsonl")]
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    assert runner.invoke(main, [*args, "--out", str(e1)]).exit_code == 0
    assert runner.invoke(main, [*args, "--out", str(e2)]).exit_code == 0
    assert (e1 / "metrics.json").read_bytes() == (e2 / "metrics.json").read_bytes()
    assert (e1 / "metrics.csv").read_bytes() == (e2 / "metrics.csv").read_bytes()
    assert (e1 / "manifest.json").read_bytes() == (e2 / "manifest.json").read_bytes()


def test_distill_writes_both_checkpoints(runner, dataset, tmp_path):
    out = tmp_path / "dist"
    result = runner.invoke(main, [*SMALL, "distill", "--dataset", dataset, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "teacher.ckpt").exists()
    assert (out / "student.ckpt").exists()
    report = json.loads((out / "distill_report.json").read_text())
    assert len(report["epochs"]) == 3


def test_analyze_outputs(runner, dataset, tmp_path):
    out = tmp_path / "run"
    assert runner.invoke(main, [*SMALL, "train", "--dataset", dataset, "--out", str(out)]).exit_code == 0
    an = tmp_path / "an"
    result = runner.invoke(
        main, [*SMALL, "analyze", "--dataset", dataset, "--kb", str(out / "kb.jsonl"),
               "--threshold", "0.5", "--out", str(an)],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads((an / "analysis.json").read_text())
    assert 0.0 <= payload["coverage"] <= 1.0
    assert (an / "analysis.csv").exists()
    assert (an / "analysis.png").exists()


def test_kb_import_export_roundtrip(runner, dataset, tmp_path):
    kb_path = tmp_path / "kb.jsonl"
    result = runner.invoke(main, [*SMALL, "kb", "import", "--dataset", dataset,
                                  "--out", str(kb_path)])
    assert result.exit_code == 0, result.output
    exported = tmp_path / "export.jsonl"
    result = runner.invoke(main, [*SMALL, "kb", "export", "--kb", str(kb_path),
                                  "--out", str(exported)])
    assert result.exit_code == 0, result.output
    rows = [json.loads(l) for l in exported.read_text().splitlines()]
    assert len(rows) == 20
    assert {"text", "label"} == set(rows[0])


def test_bench_recompute_mode_byte_identical(runner, tmp_path):
    samples = [
        {"seq": i, "scheduled_ms": i * 3.3, "status": 200, "client_us": 900.0 + i,
         "t_ret_us": 400.0 + (i % 7), "t_inf_us": 80.0, "t_tot_us": 500.0 + (i % 7),
         "budget_exceeded": 0}
        for i in range(50)
    ]
    sample_path = tmp_path / "samples.csv"
    write_samples(samples, str(sample_path))
    args = [*SMALL, "bench", "--from-samples", str(sample_path),
            "--qps", "300", "--duration", "1"]
    b1, b2 = tmp_path / "b1", tmp_path / "b2"
    assert runner.invoke(main, [*args, "--out", str(b1)]).exit_code == 0
    assert runner.invoke(main, [*args, "--out", str(b2)]).exit_code == 0
    assert (b1 / "report.json").read_bytes() == (b2 / "report.json").read_bytes()
    report = json.loads((b1 / "report.json").read_text())
    want = recompute_report(samples, target_qps=300, duration_s=1)
    assert report == want


def test_bench_requires_queries_or_samples(runner, tmp_path):
    result = runner.invoke(main, [*SMALL, "bench", "--out", str(tmp_path / "b")])
    assert result.exit_code == 1
    assert "--queries" in result.output
