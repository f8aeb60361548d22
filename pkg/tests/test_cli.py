import json

import numpy as np
import pytest

from rainpp import cli
from rainpp.grid import load_grid
from rainpp.imaging import read_pgm
from rainpp.labeling import load_labels, smooth_field

FAST = ["--set", "iterations=2", "--set", "batch_size=2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    grid = d / "d.nwpg"
    assert cli.run(["synthesize", "--out", str(grid), "--seed", "3", "--samples", "4",
                    "--channels", "4", "--height", "32", "--width", "32"]) == 0
    assert cli.run(["pretrain", "--data", str(grid), "--out-dir", str(d / "pre"), *FAST]) == 0
    assert cli.run(["finetune", "--data", str(grid), "--ckpt", str(d / "pre" / "pretrain.nwpp"),
                    "--out-dir", str(d / "ft"), *FAST]) == 0
    return d


def test_synthesize_is_reproducible(tmp_path):
    args = ["synthesize", "--seed", "7", "--samples", "3", "--channels", "4", "--height", "16", "--width", "16"]
    assert cli.run(args + ["--out", str(tmp_path / "a.nwpg")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b.nwpg")]) == 0
    assert (tmp_path / "a.nwpg").read_bytes() == (tmp_path / "b.nwpg").read_bytes()
    man = json.loads((tmp_path / "a.nwpg.manifest.json").read_text())
    assert man["seed"] == 7 and man["versions"]["formats"]["grid"] == 1
    assert "time" not in json.dumps(man).lower()


def test_missing_checkpoint_names_path(tmp_path, workdir, capsys):
    missing = tmp_path / "missing.nwpp"
    code = cli.run(["evaluate", "--ckpt", str(missing), "--data", str(workdir / "d.nwpg"),
                    "--out-dir", str(tmp_path / "ev")])
    assert code == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_config_rejected_before_compute(tmp_path, workdir, monkeypatch):
    called = []
    monkeypatch.setattr(cli, "pretrain", lambda *a, **k: called.append(1))
    for override in ["lr=-1", "mask_ratio=2", "iterations=0", "bogus=1", "thresholds=10,0.1",
                     "iterations=abc", "model.decoder_channels=0", "deterministic=no"]:
        code = cli.run(["pretrain", "--data", str(workdir / "d.nwpg"), "--out-dir",
                        str(tmp_path / "x"), "--set", override])
        assert code == 1, override
    assert called == []


def test_runtime_error_exit_code(tmp_path, workdir, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated failure")
    monkeypatch.setattr(cli, "pretrain", boom)
    assert cli.run(["pretrain", "--data", str(workdir / "d.nwpg"), "--out-dir", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x" / ".rainpp.lock").exists()


def test_lock_file_blocks_concurrent_runs(tmp_path, workdir):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".rainpp.lock").write_text("1\n")
    assert cli.run(["pretrain", "--data", str(workdir / "d.nwpg"), "--out-dir", str(out), *FAST]) == 1


def test_unknown_subcommand_and_usage():
    assert cli.run(["frobnicate"]) == 1
    assert cli.run(["finetune", "--data", "x"]) == 1


def test_pipeline_outputs(workdir):
    man = json.loads((workdir / "ft" / "manifest.json").read_text())
    assert man["command"] == "finetune" and man["config"]["pretrained"] is True
    assert len(man["config_hash"]) == 64
    assert set(man["inputs"]) == {"data", "checkpoint"}


def test_evaluate_writes_tables_and_images(workdir, tmp_path):
    out = tmp_path / "ev"
    code = cli.run(["evaluate", "--ckpt", str(workdir / "ft" / "finetune.nwpp"),
                    "--data", str(workdir / "d.nwpg"), "--out-dir", str(out), "--pgm"])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("threshold,aggregation,CSI")
    assert len(lines) == 5
    assert (out / "metrics.txt").exists()
    img = read_pgm(out / "sample0000_truth.pgm")
    assert img.shape == (32, 32) and set(np.unique(img)) <= {0, 127, 128, 255}


def test_finetune_no_pretrain_and_flag_conflict(workdir, tmp_path):
    grid = str(workdir / "d.nwpg")
    assert cli.run(["finetune", "--data", grid, "--no-pretrain", "--out-dir", str(tmp_path / "a"), *FAST]) == 0
    assert cli.run(["finetune", "--data", grid, "--no-pretrain", "--ckpt",
                    str(workdir / "pre" / "pretrain.nwpp"), "--out-dir", str(tmp_path / "b")]) == 1


def test_manifest_replay_reproduces_checkpoint(workdir, tmp_path):
    grid = str(workdir / "d.nwpg")
    code = cli.run(["pretrain", "--data", grid, "--out-dir", str(tmp_path / "again"),
                    "--config", str(workdir / "pre" / "manifest.json")])
    assert code == 0
    assert (tmp_path / "again" / "pretrain.nwpp").read_bytes() == (workdir / "pre" / "pretrain.nwpp").read_bytes()


def test_label_command(workdir, tmp_path):
    out = tmp_path / "labels.bin"
    assert cli.run(["label", "--in", str(workdir / "d.nwpg"), "--thresholds", "0.1,10",
                    "--smooth", "--out", str(out)]) == 0
    labels = load_labels(out)
    qpe = load_grid(workdir / "d.nwpg").qpe
    assert np.array_equal(labels, smooth_field(qpe, (0.1, 10.0)).astype(np.float32))
    assert cli.run(["label", "--in", str(workdir / "d.nwpg"), "--thresholds", "10,0.1",
                    "--out", str(out)]) == 1


def test_stats_and_proportions(workdir, tmp_path, capsys):
    assert cli.run(["stats", "--data", str(workdir / "d.nwpg"), "--out", str(tmp_path / "s.json")]) == 0
    assert len(json.loads((tmp_path / "s.json").read_text())) == 4
    capsys.readouterr()
    assert cli.run(["proportions", "--data", str(workdir / "d.nwpg")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and out[0].startswith("class 0")
    assert abs(sum(float(l.split()[-1]) for l in out) - 1) < 1e-5


def test_reconstruct_demo(workdir, tmp_path):
    base = ["reconstruct-demo", "--ckpt", str(workdir / "pre" / "pretrain.nwpp"),
            "--data", str(workdir / "d.nwpg"), "--sample", "1"]
    assert cli.run(base + ["--out-dir", str(tmp_path / "m"), "--mask-ratio", "0.9"]) == 0
    pgms = sorted((tmp_path / "m").glob("*.pgm"))
    assert len(pgms) == 3 * 4
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    assert report["masked_pixels"] > 0 and report["masked_mae"] is not None
    masked = read_pgm(tmp_path / "m" / "00_t850_masked.pgm")
    assert (masked == 0).mean() >= 0.85

    assert cli.run(base + ["--out-dir", str(tmp_path / "z"), "--mask-ratio", "0"]) == 0
    for c in range(4):
        orig = sorted((tmp_path / "z").glob(f"{c:02d}_*_original.pgm"))[0]
        mask = sorted((tmp_path / "z").glob(f"{c:02d}_*_masked.pgm"))[0]
        assert orig.read_bytes() == mask.read_bytes()
    assert cli.run(base[:-1] + ["99", "--out-dir", str(tmp_path / "bad")]) == 1


def test_corrupt_input_is_validation_error(tmp_path, workdir):
    bad = tmp_path / "bad.nwpg"
    bad.write_bytes(b"NWPG\x01\x00")
    assert cli.run(["proportions", "--data", str(bad)]) == 1


def test_thread_env_validation(monkeypatch):
    from rainpp.errors import ConfigError
    from rainpp.runtime import execution, thread_cap
    monkeypatch.setenv("RAINPP_THREADS", "2")
    assert thread_cap() == 2
    with execution(deterministic=False):
        pass
    monkeypatch.setenv("RAINPP_THREADS", "zero")
    with pytest.raises(ConfigError):
        thread_cap()
