import csv

import numpy as np
import pytest

from transvert.cli import main
from transvert.config import ConfigError, RunConfig
from transvert.geometry import read_volume

TINY = ["--set", "base_channels=2,2,2,4", "--set", "disc_channels=4", "--set", "residual_blocks=1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- config -----------------------------------------------------------------


def test_defaults_roundtrip_through_text():
    cfg = RunConfig.defaults()
    back = RunConfig.defaults().update_text(cfg.dumps())
    assert back == cfg
    assert cfg.train_config().lr == 1e-4 and cfg.model_config().patch == 64


def test_comments_and_overrides():
    cfg = RunConfig.defaults().update_text("# header\nsteps = 7  # inline\n\nlr=0.5\n")
    assert cfg["steps"] == 7 and cfg["lr"] == 0.5
    cfg = RunConfig.load(None, ["detector_spacing_mm=1,2", "figures=no"])
    assert cfg["detector_spacing_mm"] == (1.0, 2.0) and cfg["figures"] is False


@pytest.mark.parametrize("text", ["stepz = 3", "steps = many", "steps", "detector_spacing_mm = 1,2,3"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.defaults().update_text(text)


def test_invalid_model_config_is_config_error():
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["patch=60"]).model_config()


# -- exit codes -------------------------------------------------------------


def test_usage_errors_exit_1(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and err.startswith("transvert: error code=1 kind=UsageError")
    assert run(capsys, "render")[0] == 1


def test_unknown_key_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "phantom", "--out", tmp_path, "--set", "nope=1")
    assert code == 2 and "kind=ConfigError" in err and err.count("\n") == 1


def test_train_with_missing_dataset_exits_2(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"dataset = {tmp_path / 'missing'}\nout = {tmp_path / 'run'}\nsteps = 1\n")
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "manifest" in err


def test_non_finite_loss_exits_3(capsys, data):
    code, _, err = run(capsys, "train", "--dataset", data, "--out", data.parent / "nan", "--steps", 2, "--set", "alpha_g=inf", *TINY)
    assert code == 3 and "kind=NonFiniteLoss" in err


def test_bad_thread_env_exits_2(capsys, data, monkeypatch, tmp_path):
    monkeypatch.setenv("TRANSVERT_THREADS", "lots")
    assert run(capsys, "render", "--sample", "s0", "--dataset", data, "--out", tmp_path)[0] == 2


# -- pipeline ---------------------------------------------------------------


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["phantom", "--overfit", "2", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_phantom_dataset_layout(capsys, tmp_path):
    code, out, _ = run(capsys, "phantom", "--n", 6, "--seed", 1, "--out", tmp_path, "--set", "n_vertebrae=2,2")
    assert code == 0
    with open(tmp_path / "manifest.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    assert len({r["sample"] for r in rows}) == 6 and len(rows) == 12
    assert [r["split"] for r in rows].count("val") == 2
    assert all((tmp_path / r["path"] / "labels.vhdr").exists() for r in rows)
    assert (tmp_path / "config.resolved.cfg").exists()


def test_render_writes_images_and_figure(capsys, data, tmp_path):
    code, _, _ = run(capsys, "render", "--sample", "s0", "--dataset", data, "--out", tmp_path, "--threads", 2)
    assert code == 0
    for name in ("drr_sagittal.ihdr", "drr_coronal.ihdr", "drr_sagittal.pgm", "drr_views.png", "config.resolved.cfg"):
        assert (tmp_path / name).exists(), name


@pytest.fixture(scope="module")
def trained(data):
    out = data.parent / "run"
    argv = ["train", "--dataset", str(data), "--out", str(out), "--steps", "3", *TINY]
    assert main(argv) == 0
    return out


def test_train_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"ckpt-000000", "ckpt-000003", "losses.csv", "losses.png", "config.resolved.cfg"} <= names


def test_resolved_config_reruns_identically(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "train", "--config", trained / "config.resolved.cfg", "--set", f"out={tmp_path}")
    assert code == 0
    assert (tmp_path / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()


def test_infer_eval_assemble(capsys, data, trained, tmp_path):
    ck = trained / "ckpt-000003"
    pred = tmp_path / "p.vhdr"
    code, _, _ = run(capsys, "infer", "--checkpoint", ck, "--sample", "s0", "--dataset", data, "--out", pred)
    assert code == 0
    canvas = read_volume(pred)
    assert canvas.data.dtype == np.uint8 and set(np.unique(canvas.data)) <= {0, 8, 9}
    assert (tmp_path / "p.centroids.csv").exists() and (tmp_path / "p.inputs.png").exists()

    metrics = tmp_path / "m.csv"
    code, out, _ = run(capsys, "eval", "--pred", pred, "--sample", "s0", "--dataset", data, "--out", metrics, "--set", "n_points=64")
    assert code == 0
    with open(metrics) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["label"]) for r in rows] == [8, 9]
    assert all(r["sample"].startswith("s0:v") for r in rows)

    again = tmp_path / "again.vhdr"
    code, _, _ = run(
        capsys, "assemble", "--manifest", tmp_path / "p.vertebrae" / "index.csv",
        "--centroids", tmp_path / "p.centroids.csv", "--like", data / "s0" / "labels.vhdr", "--out", again,
    )
    assert code == 0
    np.testing.assert_array_equal(read_volume(again).data, canvas.data)


def test_infer_with_missing_checkpoint_exits_2(capsys, data, tmp_path):
    code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "nope", "--sample", "s0", "--dataset", data, "--out", tmp_path / "p.vhdr")
    assert code == 2


def test_ablate_writes_table(capsys, data, trained, tmp_path):
    # reuse the trained run as the full cell, train the no-annotation cell for one step
    ckdir = tmp_path / "ck"
    ckdir.mkdir()
    (ckdir / "table1-full").symlink_to(trained / "ckpt-000003", target_is_directory=True)
    code, _, _ = run(
        capsys, "ablate", "--dataset", data, "--out", tmp_path / "abl", "--steps", 1, "--checkpoints", ckdir,
        "--set", "ablate_variants=full", "--set", "ablate_annotations=none", "--set", "n_points=64", *TINY,
    )
    assert code == 0
    with open(tmp_path / "abl" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["table"], r["key"]) for r in rows] == [("table1", "full"), ("table2", "none")]
    assert (tmp_path / "abl" / "ablation.png").exists()
