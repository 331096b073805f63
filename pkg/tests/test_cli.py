import csv
import os
import signal
import subprocess
import sys
import time

import pytest

from isample.cli import _run_config, build_parser, main
from isample.config import ConfigError, load_config, parse_config
from isample.synthetic import DatasetManifest

TRAIN = ["--preset", "desk", "--epochs", "2", "--warmup-epochs", "0", "--batches-per-epoch", "4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--preset", "kidney2d", "--seed", "42", "--num-volumes", "5", "--out", str(d)]) == 0
    return d


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_gen_data_default_split_and_echo(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["gen-data", "--preset", "kidney2d", "--seed", "42", "--out", str(d), "--fg-fraction", "0.003"]) == 0
    m = DatasetManifest.load(d)
    assert len(m.entries) == 20 and len(m.split("train")) == 16 and len(m.split("validation")) == 4
    assert m.header["fg_fraction"] == "0.003"
    assert "measured mean" in capsys.readouterr().out


def test_gen_data_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--num-volumes", "3", "--out", str(tmp_path / name)]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for n in names:
        assert _read(tmp_path / "a" / n) == _read(tmp_path / "b" / n)


def test_existing_directory_needs_force(data_dir, capsys):
    assert main(["gen-data", "--out", str(data_dir)]) == 2
    assert "--force" in capsys.readouterr().err


def _resolved(argv):
    return _run_config(build_parser().parse_args(["train", "--data", "x", "--out", "y"] + argv))


def test_train_presets_in_config_echo():
    k = parse_config(_resolved(["--preset", "kidney"]).to_ini()).train
    assert (k.base_lr, k.patches_per_batch, k.batches_per_epoch, k.images_per_batch) == (0.001, 12, 100, 1)
    m = parse_config(_resolved(["--preset", "multiorgan"]).to_ini()).train
    assert (m.base_lr, m.patches_per_batch, m.batches_per_epoch, m.images_per_batch, m.halving_period) == (
        0.05, 24, 200, 2, 25)
    s = _resolved(["--preset", "kidney", "--sampler", "uniform", "--epsilon", "0.5", "--seed", "9"]).train
    assert (s.sampler, s.epsilon, s.seed) == ("uniform", 0.5, 9)


def test_config_file_unknown_keys_are_errors(tmp_path):
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[optimizer]\nmomentum = 0.9\n")
    with pytest.raises(ConfigError, match="eps"):
        parse_config("[sampler]\neps = 0.1\n")
    p = tmp_path / "c.ini"
    p.write_text("[model]\nwidth = 3\n")
    assert main(["train", "--data", "x", "--out", str(tmp_path / "r"), "--config", str(p)]) == 2


def test_config_file_round_trip(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\npreset = multiorgan\nepochs = 60\n[sampler]\nmode = uniform\n"
                 "[model]\nhead_widths = [32]\n[augment]\nrotation = [5.0]\n[data]\npreset = multiorgan2d\n")
    rc = load_config(p)
    assert rc.train.base_lr == 0.05 and rc.train.epochs == 60 and rc.train.sampler == "uniform"
    assert rc.model.head_widths == [32] and rc.augment.rotation == (5.0,)
    assert rc.synthetic().num_classes == 4
    again = parse_config(rc.to_ini())
    assert again.train == rc.train and again.augment == rc.augment
    assert again.model.to_dict() == rc.model.to_dict()


def _train(data_dir, out, *extra):
    return main(["train", "--data", str(data_dir), "--out", str(out)] + TRAIN + list(extra))


def test_train_run_directory_contents(data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(data_dir, out, "--snapshot-epochs", "0", "1") == 0
    assert "final validation mean Dice" in capsys.readouterr().out
    for name in ("config.ini", "seed.txt", "inputs.sha256", "log.csv", "epochs.csv", "batches.csv",
                 "model_final.isck"):
        assert (out / name).exists(), name
    assert len((out / "inputs.sha256").read_text().strip()) == 64
    rows = list(csv.DictReader(open(out / "log.csv")))
    assert len(rows) == 8 and [int(r["iteration"]) for r in rows] == list(range(8))
    assert len(os.listdir(out / "maps" / "epoch_0001")) == 4
    assert parse_config((out / "config.ini").read_text()).train.base_lr == 0.1


def test_train_is_reproducible(data_dir, tmp_path):
    for name in ("a", "b"):
        assert _train(data_dir, tmp_path / name, "--seed", "5") == 0
    for f in ("log.csv", "epochs.csv", "batches.csv", "inputs.sha256", "config.ini", "model_final.isck"):
        assert _read(tmp_path / "a" / f) == _read(tmp_path / "b" / f), f


def test_uniform_matches_isample_with_epsilon_one(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "u", "--sampler", "uniform") == 0
    assert _train(data_dir, tmp_path / "i", "--sampler", "isample", "--epsilon", "1.0") == 0
    assert _read(tmp_path / "u" / "batches.csv") == _read(tmp_path / "i" / "batches.csv")


def test_eval_infer_export(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(data_dir, run) == 0
    ckpt = str(run / "model_final.isck")
    csv_path = tmp_path / "dice.csv"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(csv_path), "--post-filter"]) == 0
    rows = list(csv.DictReader(open(csv_path)))
    assert len(rows) == 1 and set(rows[0]) == {"image_id", "class", "dice", "pred_voxels", "true_voxels"}
    assert main(["infer", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "seg")]) == 0
    assert len(os.listdir(tmp_path / "seg")) == 1
    assert main(["export-maps", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "maps")]) == 0
    assert sorted(os.listdir(tmp_path / "maps"))[0].endswith("_error.pgm")


def test_threads_env_validation(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("ISAMPLE_THREADS", "many")
    assert _train(data_dir, tmp_path / "r") == 2


def test_sigterm_checkpoints_and_exits_nonzero(data_dir, tmp_path):
    out = tmp_path / "run"
    proc = subprocess.Popen(
        [sys.executable, "-m", "isample", "train", "--data", str(data_dir), "--out", str(out),
         "--preset", "desk", "--epochs", "200", "--warmup-epochs", "0", "--batches-per-epoch", "3"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, env={**os.environ, "ISAMPLE_THREADS": "0"})
    deadline = time.time() + 120
    while time.time() < deadline:
        if (out / "epochs.csv").exists() and len((out / "epochs.csv").read_text().splitlines()) > 2:
            break
        time.sleep(0.2)
    proc.send_signal(signal.SIGTERM)
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == 130, err
    assert (out / "checkpoint_last.isck").exists()
    assert not (out / "model_final.isck").exists()
