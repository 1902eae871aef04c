import json

import numpy as np
import pytest
from PIL import Image

from dbcr.checkpoint import load_checkpoint
from dbcr.cli import cmd_make_data, main
from dbcr.config import RunConfig, load_config
from dbcr.errors import ConfigError

TINY = ["--model.widths", "4,8", "--model.enc_blocks", "1,1", "--model.dec_blocks", "1,1",
        "--model.fusion_heads", "1,2", "--model.time_embed_dim", "8"]
SMALL_DATA = ["--data.H", "16", "--data.W", "16", "--data.ratios", "0.2,0.1,0.7"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A 40-scene 16x16 dataset (8/4/28 split) and a 2-epoch tiny training run."""
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert main(["make-data", "--out", str(data), "--count", "40", "--seed", "3", *SMALL_DATA]) == 0
    assert main(["train", "--data", str(data), "--run-dir", str(run_dir), "--epochs", "2",
                 "--train.learning_rate", "0.001", *TINY, *SMALL_DATA]) == 0
    return root, data, run_dir


def _splits(data):
    names = [ln.split("\t")[1] for ln in (data / "splits.tsv").read_text().splitlines()]
    return {k: names.count(k) for k in ("train", "val", "test")}


def test_make_data_defaults(tmp_path):
    root, digest = cmd_make_data(RunConfig(), tmp_path / "d")
    assert _splits(root) == {"train": 256, "val": 32, "test": 32}
    lines = (root / "manifest.tsv").read_text().splitlines()
    assert lines[0].startswith("# dbcr-dataset v1") and len(lines) == 2 + 320
    _, again = cmd_make_data(RunConfig(), tmp_path / "e")
    assert again == digest


def test_make_data_refuses_empty(tmp_path, capsys):
    assert main(["make-data", "--out", str(tmp_path / "x"), "--count", "0"]) == 2
    assert "count" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_workers_do_not_change_output(tmp_path):
    args = ["make-data", "--count", "6", *SMALL_DATA]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--data.workers", "2"]) == 0
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    assert (tmp_path / "a/scene_00004/y.f32").read_bytes() == (tmp_path / "b/scene_00004/y.f32").read_bytes()


def test_data_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DBCR_DATA_ROOT", str(tmp_path / "envdata"))
    assert main(["make-data", "--count", "2", *SMALL_DATA]) == 0
    assert (tmp_path / "envdata/manifest.tsv").exists()


def test_train_smoke_writes_checkpoints(run):
    _, data, run_dir = run
    assert _splits(data) == {"train": 8, "val": 4, "test": 28}
    assert (run_dir / "last.ckpt").exists() and (run_dir / "best.ckpt").exists()
    ck = load_checkpoint(run_dir / "last.ckpt")
    assert ck.step == 4 and ck.epoch == 2
    assert ck.extra["run_config_hash"] == json.loads((run_dir / "config.json").read_text())["config_hash"]
    assert len((run_dir / "loss_log.tsv").read_text().splitlines()) == 4


def test_resume_continues_log(run, tmp_path):
    root, data, run_dir = run
    work = tmp_path / "r"
    work.mkdir()
    for name in ("last.ckpt", "loss_log.tsv"):
        (work / name).write_bytes((run_dir / name).read_bytes())
    assert main(["train", "--data", str(data), "--run-dir", str(work), "--epochs", "3",
                 "--train.learning_rate", "0.001", "--resume", str(work / "last.ckpt"), *TINY,
                 *SMALL_DATA]) == 0
    steps = [int(l.split("\t")[0]) for l in (work / "loss_log.tsv").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_infer_nfe_divisibility(run, tmp_path, capsys):
    _, data, run_dir = run
    ck = str(run_dir / "best.ckpt")
    base = ["infer", "--checkpoint", ck, "--input", str(data / "scene_00000")]
    assert main([*base, "--nfe", "1", "--out", str(tmp_path / "n1")]) == 0
    assert main([*base, "--nfe", "5", "--out", str(tmp_path / "n5")]) == 0
    assert main([*base, "--nfe", "3", "--out", str(tmp_path / "n3")]) == 2
    err = capsys.readouterr().err
    assert "does not divide" in err and "Traceback" not in err
    arr = np.load(tmp_path / "n5/scene_00000.npy")
    assert arr.shape == (13, 16, 16)
    png = Image.open(tmp_path / "n5/scene_00000.png")
    assert png.size == (16, 16) and png.text["dbcr_config_hash"] == load_checkpoint(ck).config_hash


def test_infer_trace_frames(run, tmp_path):
    _, data, run_dir = run
    assert main(["infer", "--checkpoint", str(run_dir / "best.ckpt"), "--input", str(data / "scene_00001"),
                 "--nfe", "5", "--trace", "--grid", "--out", str(tmp_path)]) == 0
    frames = sorted(p.name for p in (tmp_path / "trace/scene_00001").iterdir())
    assert frames == ["final.png", "step000_t1000.png", "step001_t0800.png", "step002_t0600.png",
                      "step003_t0400.png", "step004_t0200.png"]
    assert Image.open(tmp_path / "scene_00001_grid.png").size == (3 * 16 + 2 * 2, 16)


def test_infer_names_bad_tensor(run, tmp_path, capsys):
    _, _, run_dir = run
    other = tmp_path / "d"
    assert main(["make-data", "--out", str(other), "--count", "2", "--data.channels", "4",
                 *SMALL_DATA]) == 2  # 4 optical channels conflict with the 13-channel model default
    assert main(["make-data", "--out", str(other), "--count", "2", "--data.channels", "4",
                 "--config", str(_four_band_config(tmp_path)), *SMALL_DATA]) == 0
    assert main(["infer", "--checkpoint", str(run_dir / "best.ckpt"), "--input", str(other),
                 "--split", "all", "--out", str(tmp_path / "o")]) == 2
    assert "cloudy optical y has 4 channels" in capsys.readouterr().err


def _four_band_config(tmp_path):
    p = tmp_path / "four.toml"
    p.write_text("[model]\nopt_channels_in = 4\n[report]\nrgb_bands = [2, 1, 0]\n")
    return p


def test_eval_report_and_determinism(run, tmp_path, capsys):
    _, data, run_dir = run
    args = ["eval", "--checkpoint", str(run_dir / "best.ckpt"), "--data", str(data), "--split", "test"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert "PSNR" in capsys.readouterr().out
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    per = (tmp_path / "a/per_image.csv").read_text().splitlines()
    assert per[0].startswith("# config_hash=")
    assert len(per) == 2 + 28
    strata = (tmp_path / "a/strata.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in strata[2:]] == ["all", "0-20%", "20-40%", "40-60%", "60-80%",
                                                       "80-100%"]
    for name in ("per_image.csv", "strata.csv", "report.txt", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_sweeps(run, tmp_path):
    _, data, run_dir = run
    assert main(["eval", "--checkpoint", str(run_dir / "best.ckpt"), "--data", str(data), "--split", "val",
                 "--sweep", "both", "--out", str(tmp_path)]) == 0
    nfe = (tmp_path / "sweep_nfe.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in nfe[1:]] == ["N=1", "N=5", "N=10"]
    mode = (tmp_path / "sweep_mode.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in mode[1:]] == ["ODE", "SDE"]
    report = (tmp_path / "report.txt").read_text()
    assert "NFE sweep" in report and "ODE vs SDE at N=5" in report
    # at N=5 the SDE sampler injects noise, so the rows must differ
    assert mode[1].split(",")[1:] != mode[2].split(",")[1:]


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nepochs = 2\nbogus = 1\n")
    assert main(["make-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "train.bogus" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["make-data", "--data.nonexistent", "3"])
    assert e.value.code == 2
    with pytest.raises(ConfigError):
        load_config(overrides={"infer": {"N": 7}})
    with pytest.raises(ConfigError):
        load_config(overrides={"train": {"epochs": "many"}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_io_error_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--run-dir", str(tmp_path / "r")]) == 4
    assert "no dataset manifest" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 4


def test_config_file_precedence(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("[train]\nepochs = 7\nlearning_rate = 0.01\n[infer]\nN = 5\n")
    cfg = load_config(f, {"train": {"epochs": "9"}})
    assert (cfg.train.epochs, cfg.train.learning_rate, cfg.infer.N) == (9, 0.01, 5)
    assert cfg.hash() != load_config(f).hash()
