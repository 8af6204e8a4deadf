import json

import numpy as np
import pytest

from dpnn import cli
from dpnn.data import read_manifest, read_pgm
from dpnn.model import load_checkpoint

SMALL = ["--set", "phantom.dims=[32,32,16]", "--set", "train.max_epochs=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--run-dir", str(root / "data"), "--n-per-class", "6", *SMALL]) == 0
    assert cli.main(["synth", "--run-dir", str(root / "unl"), "--n-per-class", "4", "--phantom-seed", "5",
                     "--unlabeled", *SMALL]) == 0
    assert cli.main(["tf-project", "--run-dir", str(root / "tf"), "--manifest", str(root / "unl/manifest.tsv")]) == 0
    assert cli.main(["pretrain", "--run-dir", str(root / "pre"), "--manifest", str(root / "unl/manifest.tsv"),
                     "--targets", str(root / "tf/targets.tsv"), *SMALL]) == 0
    return root


def test_synth_writes_manifest_and_volumes(workspace):
    m = read_manifest(workspace / "data/manifest.tsv")
    assert len(m.entries) == 18 and sorted(set(m.labels)) == [0, 1, 2]
    assert all(label is None for label in read_manifest(workspace / "unl/manifest.tsv").labels)


def test_tf_project_and_pretrain_outputs(workspace):
    assert len(list((workspace / "tf/targets").glob("*.map"))) == 12
    state = load_checkpoint(workspace / "pre/compression.ckpt")
    assert "meta.loss_variant" in state
    assert (workspace / "pre/loss.csv").read_text().startswith("epoch,train_loss,val_loss\n")


def test_crossval_is_replayable_from_echoed_config(workspace):
    run = workspace / "cv"
    argv = ["crossval", "--run-dir", str(run), "--manifest", str(workspace / "data/manifest.tsv"),
            "--checkpoint", str(workspace / "pre/compression.ckpt"), "--k", "2", *SMALL]
    assert cli.main(argv) == 0
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["crossval.k"] == 2 and echoed["command"] == "crossval"
    assert cli.main(["crossval", "--config", str(run / "config.json"), "--run-dir", str(workspace / "cv2")]) == 0
    assert (run / "metrics.kv").read_bytes() == (workspace / "cv2/metrics.kv").read_bytes()
    assert (run / "fold1_loss.csv").exists()
    assert "TPR" in (run / "metrics.txt").read_text()


def test_finetune_eval_project(workspace):
    manifest = str(workspace / "data/manifest.tsv")
    assert cli.main(["finetune", "--run-dir", str(workspace / "ft"), "--manifest", manifest,
                     "--checkpoint", str(workspace / "pre/compression.ckpt"), *SMALL]) == 0
    ckpt = str(workspace / "ft/dpnn.ckpt")
    assert cli.main(["eval", "--run-dir", str(workspace / "ev"), "--manifest", manifest, "--checkpoint", ckpt]) == 0
    assert "mean_accuracy=" in (workspace / "ev/metrics.kv").read_text()
    assert cli.main(["project", "--run-dir", str(workspace / "pj"), "--manifest", manifest, "--checkpoint", ckpt]) == 0
    img = read_pgm(workspace / "pj/maps/msa_0000.pgm")
    assert img.shape == (32, 32) and img.dtype == np.uint8


def test_bl2_states_random_init(workspace, caplog):
    caplog.set_level("INFO")
    rc = cli.main(["crossval", "--run-dir", str(workspace / "bl2"), "--variant", "bl2", "--k", "2",
                   "--manifest", str(workspace / "data/manifest.tsv"), *SMALL, "--set", "train.max_epochs=1"])
    assert rc == 0
    assert "randomly initialized" in caplog.text


def test_variant_checkpoint_mismatch_exits_2(workspace, caplog):
    rc = cli.main(["finetune", "--run-dir", str(workspace / "bad"), "--variant", "bl1",
                   "--manifest", str(workspace / "data/manifest.tsv"),
                   "--checkpoint", str(workspace / "pre/compression.ckpt"), *SMALL])
    assert rc == 2
    assert "mse-only" in caplog.text


@pytest.mark.parametrize(
    "override,field",
    [("train.batch_size=0", "train.batch_size"), ("bogus.key=1", "bogus.key"),
     ("train.patience=\"x\"", "train.patience"), ("phantom.dims=[32,32]", "phantom.dims")],
)
def test_invalid_config_exits_2_and_names_field(tmp_path, caplog, override, field):
    cmd = "synth" if field.startswith("phantom") else "crossval"
    argv = [cmd, "--run-dir", str(tmp_path / "r"), "--set", override]
    if cmd == "crossval":
        argv += ["--manifest", str(tmp_path / "none.tsv")]
    assert cli.main(argv) == 2
    assert field in caplog.text
    assert not (tmp_path / "r" / "config.json").exists()  # rejected before any work


def test_missing_input_exits_3(tmp_path):
    assert cli.main(["tf-project", "--run-dir", str(tmp_path / "r"), "--manifest", str(tmp_path / "no.tsv")]) == 3


def test_corrupt_checkpoint_exits_3(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX")
    rc = cli.main(["eval", "--run-dir", str(tmp_path / "r"), "--manifest", str(workspace / "data/manifest.tsv"),
                   "--checkpoint", str(bad)])
    assert rc == 3


def test_run_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DPNN_RUN_ROOT", str(tmp_path))
    assert cli.main(["synth", "--n-per-class", "1", "--set", "phantom.dims=[8,8,4]"]) == 0
    assert (tmp_path / "synth" / "manifest.tsv").exists()
