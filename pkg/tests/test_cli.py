import json
import os
import subprocess
import sys

import numpy as np
import pytest

from driftfuse.cli import main

TINY_CONFIG = """\
[data]
num_domains = 2
unseen_domains = 1
num_classes = 3
feature_dim = 12
samples_per_domain = 60
test_samples_per_domain = 30
seed = 21

[train]
latent_dim = 6
hidden_dim = 12
epochs_per_task = 1
batch_size = 32
warmup_steps = 2
reservoir_capacity = 16
seed = 21
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_CONFIG)
    data_dir = tmp_path / "data"
    assert main(["gen", "--config", str(cfg), "--out-dir", str(data_dir)]) == 0
    return tmp_path, str(cfg), str(data_dir)


def test_gen_writes_expected_files(workdir):
    _, _, data_dir = workdir
    names = sorted(os.listdir(data_dir))
    assert names == ["manifest.txt", "train00.difz", "train01.difz", "unseen00.difz"]


def test_gen_is_byte_deterministic(workdir, tmp_path):
    _, cfg, data_dir = workdir
    other = tmp_path / "data2"
    assert main(["gen", "--config", cfg, "--out-dir", str(other)]) == 0
    for name in ("train00.difz", "train01.difz", "unseen00.difz"):
        a = open(os.path.join(data_dir, name), "rb").read()
        b = open(other / name, "rb").read()
        assert a == b


def test_gen_unwritable_target(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    code = main(["gen", "--out-dir", str(blocker / "sub"),
                 "--set", "data.samples_per_domain=10",
                 "--set", "data.test_samples_per_domain=5"])
    assert code != 0


def test_train_outputs_and_replay_identity(workdir):
    tmp, cfg, data_dir = workdir
    out1, out2 = tmp / "o1", tmp / "o2"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out1)]) == 0
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out2)]) == 0
    for out in (out1, out2):
        assert (out / "metrics.csv").exists()
        assert (out / "report.json").exists()
        assert (out / "checkpoint.bin").exists()
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    r1 = json.loads((out1 / "report.json").read_text())
    r2 = json.loads((out2 / "report.json").read_text())
    r1.pop("wall_clock_sec")
    r2.pop("wall_clock_sec")
    assert r1 == r2


def test_train_replay_from_report(workdir):
    tmp, cfg, data_dir = workdir
    out1, out2 = tmp / "r1", tmp / "r2"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out1)]) == 0
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out2),
                 "--replay", str(out1 / "report.json")]) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_train_missing_domain_file(workdir):
    tmp, cfg, data_dir = workdir
    os.unlink(os.path.join(data_dir, "train01.difz"))
    code = main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(tmp / "o")])
    assert code == 3


def test_train_corrupt_feature_file(workdir):
    tmp, cfg, data_dir = workdir
    path = os.path.join(data_dir, "train00.difz")
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"XXXX"
    open(path, "wb").write(bytes(raw))
    code = main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(tmp / "o")])
    assert code == 3


def test_train_bad_config_exit_code(workdir, tmp_path):
    tmp, _, data_dir = workdir
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nnot_a_key = 1\n")
    code = main(["train", "--config", str(bad), "--data-dir", data_dir, "--out-dir", str(tmp / "o")])
    assert code == 2


def test_train_numerical_failure_exit_code(workdir):
    tmp, cfg, data_dir = workdir
    with np.errstate(over="ignore", invalid="ignore"):
        code = main([
            "train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(tmp / "o"),
            "--set", "train.optimizer=sgd", "--set", "train.lr=1e200",
            "--set", "train.grad_clip=0", "--set", "train.warmup_steps=1000000",
        ])
    assert code == 4


def test_train_resume_matches_full_run(workdir):
    tmp, cfg, data_dir = workdir
    full, part = tmp / "full", tmp / "part"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(full)]) == 0
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(part),
                 "--stop-after-task", "0"]) == 0
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(part),
                 "--resume"]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_eval_checkpoint(workdir, capsys):
    tmp, cfg, data_dir = workdir
    out = tmp / "o"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out)]) == 0
    code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                 "--data", os.path.join(data_dir, "unseen00.difz"),
                 "--json", str(tmp / "eval.json")])
    assert code == 0
    assert "accuracy=" in capsys.readouterr().out
    blob = json.loads((tmp / "eval.json").read_text())
    assert 0.0 <= blob["accuracy"] <= 1.0


def test_ablate_row_pattern(workdir):
    tmp, cfg, data_dir = workdir
    out = tmp / "ab"
    assert main(["ablate", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out),
                 "--seeds", "21"]) == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == "row,disentangle_on,fusion_on,swap_on,seed,avg,last"
    rows = [ln.split(",")[:4] for ln in lines[1:]]
    assert rows == [
        ["none", "False", "False", "False"],
        ["disen", "True", "False", "False"],
        ["disen+antifor", "True", "True", "False"],
        ["all", "True", "True", "True"],
    ]


def test_sweep_grid(workdir):
    tmp, cfg, data_dir = workdir
    out = tmp / "sw"
    assert main(["sweep", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 10  # header + 4 q points + 5 lam points
    assert lines[0] == "q,lam,avg,last,seed"


def test_sweep_small_grid_and_workers_env(workdir, monkeypatch):
    tmp, cfg, data_dir = workdir
    monkeypatch.setenv("DRIFTFUSE_THREADS", "1")
    out = tmp / "sw1"
    assert main(["sweep", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out),
                 "--q-values", "0.7", "--lam-values", "5", "--workers", "8"]) == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 3


def test_sweep_empty_grid_rejected(workdir):
    tmp, cfg, data_dir = workdir
    code = main(["sweep", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(tmp / "x"),
                 "--q-values", "", "--lam-values", ""])
    assert code == 2


def test_plots_rendered(workdir):
    tmp, cfg, data_dir = workdir
    out = tmp / "plots"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(out),
                 "--plots"]) == 0
    svg = (out / "accuracy.svg").read_bytes()
    assert svg.startswith(b"<?xml") and len(svg) > 1000


def test_inspect(workdir, capsys):
    tmp, cfg, data_dir = workdir
    assert main(["inspect", os.path.join(data_dir, "train00.difz")]) == 0
    out = capsys.readouterr().out
    assert "DIFZ v1" in out and "90 records" in out
    run_dir = tmp / "o"
    assert main(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", str(run_dir)]) == 0
    assert main(["inspect", str(run_dir / "checkpoint.bin")]) == 0
    assert "2 task(s) done" in capsys.readouterr().out


def test_write_config_template(tmp_path, capsys):
    assert main(["write-config"]) == 0
    text = capsys.readouterr().out
    assert "[data]" in text and "[train]" in text
    target = tmp_path / "t.ini"
    assert main(["write-config", "--out", str(target)]) == 0
    assert target.exists()


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "driftfuse.cli", "write-config"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "[train]" in proc.stdout
