import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from kdaug.cli import main

TINY = {
    "dataset": {"synthetic": {"n_classes": 3, "n_subjects": 4, "channels": 3, "T": 64, "windows_per_class": 4},
                "window_len": 64, "step": 64, "test_subjects": ["s003"]},
    "models": {"teacher": {"family": "wrn", "depth": 10, "width": 2},
               "student": {"family": "wrn", "depth": 10, "width": 1}},
    "schedule": {"total_epochs": 3, "initial_lr": 0.05, "batch_size": 16},
}


def write_cfg(tmp_path, extra=None, name="cfg.yaml"):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    cfg.update(extra or {})
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def files_bytes(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_prepare_data_reproducible(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["prepare-data", "--config", str(cfg)]) == 0
    first = files_bytes(tmp_path / "out" / "data")
    assert main(["prepare-data", "--config", str(cfg)]) == 0
    assert files_bytes(tmp_path / "out" / "data") == first
    assert any(k.endswith("manifest.json") for k in first)


def test_manifest_window_counts_csv(tmp_path):
    rng = np.random.default_rng(0)
    lengths = {"a": 1700, "b": 1234, "c": 999}
    rows = ["subject,label,x,y,z"]
    for s, n in lengths.items():
        rows += [f"{s},1,{v[0]:.4f},{v[1]:.4f},{v[2]:.4f}" for v in rng.normal(size=(n, 3))]
    csv_path = tmp_path / "g.csv"
    csv_path.write_text("\n".join(rows) + "\n")
    cfg = write_cfg(tmp_path, {"dataset": {"source": "csv", "root": str(csv_path), "window_len": 500, "step": 500,
                                           "csv_schema": {"channels": ["x", "y", "z"]}, "test_subjects": ["c"]}})
    assert main(["prepare-data", "--config", str(cfg)]) == 0
    manifest = json.loads(next((tmp_path / "out" / "data").rglob("manifest.json")).read_text())
    got = {r["subject"]: r["n_windows"] for r in manifest["recordings"]}
    assert got == {s: n // 500 for s, n in lengths.items()}


def test_missing_pamap2_is_user_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"dataset": {"source": "pamap2", "root": str(tmp_path / "nothing")}})
    assert main(["prepare-data", "--config", str(cfg)]) == 1
    assert "subject101.dat" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.yaml"), "--role", "teacher"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 1


def test_train_evaluate_benchmark(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--role", "teacher"]) == 1  # no prepared data
    assert main(["prepare-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--role", "student"]) == 1  # no teacher
    assert main(["train", "--config", str(cfg), "--role", "teacher"]) == 0
    teacher = Path(capsys.readouterr().out.strip().splitlines()[-1])
    summary = json.loads((teacher / "summary.json").read_text())
    config_hash = summary["config_hash"]
    assert json.loads((teacher / "metrics.jsonl").read_text().splitlines()[0])["epoch"] == 1
    before = files_bytes(teacher)
    assert main(["train", "--config", str(cfg), "--role", "teacher"]) == 0  # idempotent
    assert files_bytes(teacher) == before
    assert main(["train", "--config", str(cfg), "--role", "student", "--teacher", str(teacher)]) == 0
    student = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert json.loads((student / "summary.json").read_text())["mode"] == "eskd"
    assert main(["evaluate", "--config", str(cfg), str(student), "--test-aug", "shift"]) == 0
    ev = json.loads(next(student.glob("eval-shift-*.json")).read_text())
    assert ev["test_aug"] == "shift" and "config_hash" in ev
    assert config_hash != ev["config_hash"]
    assert main(["benchmark", str(teacher / "checkpoints" / "best.ckpt"), "--samples", "100", "--warmup", "2",
                 "--window-len", "64", "--out", str(tmp_path / "bench")]) == 0
    assert json.loads((tmp_path / "bench" / "timing.json").read_text())["rows"][0]["batch_size"] == 1
    (teacher / "config.json").write_text('{"someone": "else"}\n')
    assert main(["train", "--config", str(cfg), "--role", "teacher"]) == 1  # directory collision


def test_sweep_and_report(tmp_path):
    cfg = write_cfg(tmp_path, {"sweep": {"scratch": True, "axes": {"seed": [0, 1]}}})
    assert main(["sweep", "--config", str(cfg), "--workers", "2"]) == 0
    out = tmp_path / "out"
    grid = json.loads((out / "grid.json").read_text())
    assert len(grid["cells"]) == 2 and all(c["status"] == "done" for c in grid["cells"])
    assert len(grid["runs"]) == 6
    mtimes = {p: p.stat().st_mtime_ns for p in (out / "runs").rglob("summary.json")}
    assert main(["sweep", "--config", str(cfg)]) == 0  # resumes: nothing retrained
    assert {p: p.stat().st_mtime_ns for p in (out / "runs").rglob("summary.json")} == mtimes
    assert main(["report", str(out), "--baseline", "scratch none", "--out", str(tmp_path / "r1")]) == 0
    assert main(["report", str(out), "--baseline", "scratch none", "--out", str(tmp_path / "r2")]) == 0
    assert files_bytes(tmp_path / "r1") == files_bytes(tmp_path / "r2")
    md = (tmp_path / "r1" / "report.md").read_text()
    assert "| KD none |" in md and "| scratch none |" in md
    # a manifest from another schema version is refused
    grid["schema_version"] = 99
    (out / "grid.json").write_text(json.dumps(grid))
    assert main(["report", str(out)]) == 1
