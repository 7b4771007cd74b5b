import json
import subprocess
import sys

import pytest
import yaml

from multimode_asr.cli import main

TINY = {
    "model": {"L_audio": 2, "L_label": 1, "D": 16, "D_ff": 16, "heads": 2, "D_joint": 8},
    "task": {"min_tokens": 2, "max_tokens": 4},
    "data": {"train": 16, "valid": 4, "test": 4},
    "train": {"steps": 4, "batch_size": 4, "warmup_steps": 1, "hold_steps": 1, "eval_every": 2, "keep_best_k": 2},
    "sweep": {"schedules": ["fixed:0", "fixed:1", "full"]},
}


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def run_all(out, conf, *extra):
    assert main(["gen-data", "--config", conf, "--out", str(out), *extra]) == 0
    assert main(["train", "--config", conf, "--out", str(out), *extra]) == 0
    assert main(["sweep", "--config", conf, "--out", str(out), *extra]) == 0


def test_pipeline_writes_artifacts(tmp_path, conf, capsys):
    out = tmp_path / "run"
    run_all(out, conf)
    for name in ["train.mmds", "valid.mmds", "test.mmds", "train.log", "final.ckpt", "best0.ckpt",
                 "report.txt", "report.csv", "train.config.yaml", "sweep.config.yaml"]:
        assert (out / name).exists(), name
    lines = (out / "train.log").read_text().splitlines()
    meta = json.loads(lines[0])["meta"]
    assert meta["seed"] == 0 and meta["train_tag"] == "multi tied-uniform:0:2"
    assert len(lines) == 1 + TINY["train"]["steps"]
    report = (out / "report.txt").read_text()
    assert f"# config_hash: {yaml.safe_load((out / 'sweep.config.yaml').read_text())['config_hash']}" in report
    assert "multi tied-uniform:0:2" in capsys.readouterr().out


def test_pipeline_is_reproducible(tmp_path, conf):
    a, b = tmp_path / "a", tmp_path / "b"
    run_all(a, conf, "--seed", "3")
    run_all(b, conf, "--seed", "3")
    for name in ["test.mmds", "train.log", "final.ckpt", "report.txt", "report.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_baseline_objective_and_overrides(tmp_path, conf):
    out = tmp_path / "base"
    assert main(["gen-data", "--config", conf, "--out", str(out), "--n-test", "2"]) == 0
    assert main(["train", "--config", conf, "--out", str(out), "--objective", "baseline",
                 "--sampler", "fixed:1", "--steps", "2"]) == 0
    cfg = yaml.safe_load((out / "train.config.yaml").read_text())
    assert cfg["train"]["weights"] == [1.0, 0.0, 0.0] and cfg["train"]["steps"] == 2
    assert yaml.safe_load((out / "gen-data.config.yaml").read_text())["data"]["test"] == 2
    assert main(["sweep", "--config", conf, "--out", str(out), "--objective", "baseline",
                 "--sampler", "fixed:1", "--schedules", "fixed:0,fixed:1"]) == 0
    rows = (out / "report.csv").read_text().splitlines()[1:]
    assert [r.split(",")[-1] for r in rows] == ["0", "1"]


def test_latency_command(capsys):
    assert main(["latency", "fixed:1"]) == 0
    assert capsys.readouterr().out.strip() == "480.0"
    assert main(["latency", "full"]) == 0
    assert capsys.readouterr().out.strip() == "unbounded"
    assert main(["latency", "layers:1-0-0", "-L", "3", "--frontend-frames", "2"]) == 0
    assert capsys.readouterr().out.strip() == "60.0"


def test_sample_masks(capsys):
    assert main(["sample-masks", "constrained:12:2", "-n", "50", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 51
    for line in lines[:-1]:
        total = int(line.split("C=")[1].split()[0])
        assert total <= 12
        assert line.endswith(f"latency_ms={total * 40:.1f}")
    assert lines[-1].startswith("# n=50")


@pytest.mark.parametrize(
    "argv",
    [
        ["latency", "layers:1-2"],
        ["sample-masks", "bogus:1"],
        ["sample-masks"],
        ["bogus-command"],
        ["latency"],
    ],
)
def test_usage_errors_exit_1(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_config_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {nonsense: 1}\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text("model: {D: 10, heads: 4}\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["train", "--out", str(tmp_path / "empty")]) == 1


def test_runtime_errors_exit_2(tmp_path, conf):
    out = tmp_path / "r"
    assert main(["gen-data", "--config", conf, "--out", str(out)]) == 0
    (out / "train.mmds").write_bytes(b"JUNKJUNK")
    assert main(["train", "--config", conf, "--out", str(out)]) == 2
    (out / "final.ckpt").write_bytes(b"nope")
    assert main(["sweep", "--config", conf, "--out", str(out)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "multimode_asr", "latency", "fixed:2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip() == "960.0"
