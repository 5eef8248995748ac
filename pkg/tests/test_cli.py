from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from polyhex import cli, geomio, hexgen
from polyhex import pipeline as pl

TINY = {
    "model": {"encoder": {"blocks": 1, "layers_per_block": 1, "heads": 2, "d_model": 16,
                          "latent_tokens": 4},
              "denoiser": {"blocks": 1, "layers_per_block": 1, "heads": 2, "d_model": 16,
                           "latent_tokens": 4}},
    "train": {"batch": 4, "points": 32, "lr": 3e-3},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for shape in ("cube", "lshape"):
        assert run("synth", "--shape", shape, "--stem", shape, "--out-dir", d) == 0
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def cube_run(work):
    out = work / "pipe_cube"
    assert run("pipeline", work / "cube.obj", "--oracle-polycube", work / "cube.polycube.pcd",
               "--out-dir", out) == 0
    return out


# ---------------------------------------------------------------- basics

def test_version():
    r = subprocess.run([sys.executable, "-m", "polyhex", "--version"], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.startswith("polyhex 0.1.0") and "pcd 1" in r.stdout


def test_argparse_error_exit_two():
    with pytest.raises(SystemExit) as e:
        run("generate")
    assert e.value.code == 2


def test_synth_outputs(work):
    assert geomio.load_cloud(work / "cube.polycube.pcd").shape == (2048, 6)
    assert len(geomio.load_mesh(work / "lshape.obj").faces) > 0


# ---------------------------------------------------------------- sample-mesh

def test_sample_mesh(work):
    assert run("sample-mesh", work / "cube.obj", "--n", 1024, "--out", work / "s1.pcd") == 0
    assert geomio.load_cloud(work / "s1.pcd").shape == (1024, 3)
    cond = pl.read_condition(work / "s1.pcd")
    mesh = geomio.load_mesh(work / "cube.obj")
    assert np.max(np.abs(mesh.evaluate(cond.face_id, cond.bary) - cond.points)) < 1e-9


def test_sample_mesh_deterministic(work):
    for name in ("a", "b"):
        assert run("sample-mesh", work / "cube.obj", "--n", 100, "--seed", 4,
                   "--out", work / f"{name}.pcd") == 0
    assert (work / "a.pcd").read_bytes() == (work / "b.pcd").read_bytes()
    assert (work / "a.prov").read_bytes() == (work / "b.prov").read_bytes()


def test_sample_mesh_errors(work, tmp_path):
    assert run("sample-mesh", work / "cube.obj", "--n", 0, "--out", tmp_path / "x.pcd") == 2
    assert run("sample-mesh", tmp_path / "missing.obj", "--out", tmp_path / "x.pcd") == 3
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nf 0 1 2\n")
    assert run("sample-mesh", bad, "--out", tmp_path / "x.pcd") == 3


# ---------------------------------------------------------------- config

def test_config_unknown_key_rejected(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sample": {"nn": 3}}))
    assert run("sample-mesh", work / "cube.obj", "--config", cfg, "--out", tmp_path / "x.pcd") == 2


def test_config_bad_value_rejected(tmp_path):
    with pytest.raises(pl.ConfigError, match="register.w_out"):
        pl.load_config(overrides={"register": {"w_out": 1.0}})
    with pytest.raises(pl.ConfigError, match="hexgen.pillow_thickness"):
        pl.load_config(overrides={"hexgen": {"pillow_thickness": 0.5}})


def test_config_env_default(work, tmp_path, monkeypatch):
    cfg = tmp_path / "env.json"
    cfg.write_text(json.dumps({"sample": {"n": 37}}))
    monkeypatch.setenv(pl.CONFIG_ENV, str(cfg))
    assert run("sample-mesh", work / "cube.obj", "--out", tmp_path / "e.pcd") == 0
    assert geomio.load_cloud(tmp_path / "e.pcd").shape == (37, 3)
    # explicit flags still win over the file
    assert run("sample-mesh", work / "cube.obj", "--n", 5, "--out", tmp_path / "f.pcd") == 0
    assert geomio.load_cloud(tmp_path / "f.pcd").shape == (5, 3)


def test_threads_flag(work, tmp_path):
    assert run("sample-mesh", work / "cube.obj", "--n", 10, "--threads", 1,
               "--out", tmp_path / "t.pcd") == 0
    assert run("sample-mesh", work / "cube.obj", "--threads", 0, "--out", tmp_path / "t.pcd") == 2


# ---------------------------------------------------------------- train / generate

@pytest.fixture(scope="module")
def trained(work):
    data = work / "pairs"
    for i, shape in enumerate(("cube", "bar", "lshape", "frame")):
        assert run("synth", "--shape", shape, "--seed", i, "--n", 64, "--stem", f"p{i}",
                   "--out-dir", data) == 0
        (data / f"p{i}.obj").unlink()
    (data / "p0.condition.prov").rename(work / "p0.condition.prov.bak")
    assert run("train", "--data", data, "--steps", 200, "--config", work / "tiny.json",
               "--out", work / "ckpt" / "m.bin") == 0
    (work / "p0.condition.prov.bak").rename(data / "p0.condition.prov")
    return data, work / "ckpt" / "m.bin"


def _losses(path):
    with open(path) as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def test_train_reduces_loss(trained):
    _, ckpt = trained
    losses = _losses(ckpt.with_suffix(".loss.csv"))
    assert len(losses) == 200
    # single-step losses are noisy; compare the first and last ten steps
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_train_loss_choice_changes_curve(trained, work):
    data, _ = trained
    for loss in ("l2", "hybrid"):
        assert run("train", "--data", data, "--steps", 5, "--loss", loss, "--config",
                   work / "tiny.json", "--out", work / f"{loss}.bin") == 0
    a, b = _losses(work / "l2.loss.csv"), _losses(work / "hybrid.loss.csv")
    assert len(a) == len(b) == 5 and a != b


def test_train_unpaired_warns(work, capsys):
    d = work / "unpaired"
    assert run("synth", "--shape", "cube", "--n", 16, "--stem", "a", "--out-dir", d) == 0
    assert run("synth", "--shape", "bar", "--stem", "b", "--out-dir", d) == 0
    capsys.readouterr()
    assert run("train", "--data", d, "--steps", 1, "--config", work / "tiny.json",
               "--out", work / "u.bin") == 0
    assert "skipping unpaired file" in capsys.readouterr().err


def test_train_missing_data(work, tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--steps", 2, "--out", tmp_path / "m.bin") == 3


def test_generate_output_shape(trained, work):
    data, ckpt = trained
    assert run("generate", "--ckpt", ckpt, "--condition", data / "p1.condition.pcd", "--m", 300,
               "--stride", 256, "--out", work / "gen.pcd") == 0
    P = geomio.load_cloud(work / "gen.pcd")
    assert P.shape == (300, 6)
    assert np.allclose(np.linalg.norm(P[:, 3:], axis=1), 1, atol=1e-6)


def test_generate_sweep_csv(trained, work):
    data, ckpt = trained
    assert run("generate", "--ckpt", ckpt, "--condition", data / "p1.condition.pcd",
               "--m-sweep", "64..256", "--csv", work / "sweep.csv") == 0
    with open(work / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["M"]) for r in rows] == [64, 128, 256]
    assert {int(r["self_attention_tokens"]) for r in rows} == {4 + 4 + 1}


def test_generate_bad_checkpoint(trained, work, capsys):
    data, ckpt = trained
    bad = work / "bad.bin"
    bad.write_bytes(ckpt.read_bytes())
    (work / "bad.bin.manifest").write_bytes((work / "ckpt" / "m.bin.manifest").read_bytes())
    cfg = (work / "ckpt" / "m.bin.config").read_text().replace("encoder.d_model=16",
                                                               "encoder.d_model=32")
    (work / "bad.bin.config").write_text(cfg.replace("denoiser.d_model=16", "denoiser.d_model=32"))
    capsys.readouterr()
    code = run("generate", "--ckpt", bad, "--condition", data / "p1.condition.pcd", "--m", 8,
               "--out", work / "x.pcd")
    assert code != 0 and "shape mismatch" in capsys.readouterr().err


# ---------------------------------------------------------------- clean

def test_clean_command(work, tmp_path):
    rng = np.random.default_rng(0)
    P = np.vstack([rng.random((200, 6)), [[9, 9, 9, 0, 0, 1]]])
    geomio.save_cloud(tmp_path / "in.pcd", P)
    assert run("clean", tmp_path / "in.pcd", "--tau", 0.3, "--prune-k", 2, "--out",
               tmp_path / "out.pcd") == 0
    out = geomio.load_cloud(tmp_path / "out.pcd")
    assert 0 < len(out) < len(P) and out.shape[1] == 6
    # the isolated far point never survives phase II
    assert np.max(out[:, :3]) <= 1
    assert run("clean", tmp_path / "in.pcd", "--auto-tau", "--out", tmp_path / "o2.pcd") == 0
    assert run("clean", tmp_path / "in.pcd", "--tau", -1, "--out", tmp_path / "o3.pcd") == 2


# ---------------------------------------------------------------- pipeline

def test_pipeline_cube_identity(cube_run):
    q = json.loads((cube_run / "quality.json").read_text())
    assert abs(q["j_min"] - 1) < 1e-9 and q["inverted"] == 0
    hm, _ = hexgen.read_vtk(cube_run / "hex.vtk")
    assert abs(hexgen.quality(hm).j_min - 1) < 1e-9
    cfg = json.loads((cube_run / "config.json").read_text())
    assert cfg == pl.load_config()
    assert "timing.json" in {p.name for p in cube_run.iterdir()}


def test_pipeline_deterministic(work, cube_run):
    again = work / "pipe_cube_2"
    assert run("pipeline", work / "cube.obj", "--oracle-polycube", work / "cube.polycube.pcd",
               "--out-dir", again) == 0
    names = sorted(p.name for p in cube_run.iterdir() if p.name != "timing.json")
    assert names == sorted(p.name for p in again.iterdir() if p.name != "timing.json")
    for n in names:
        assert (cube_run / n).read_bytes() == (again / n).read_bytes(), n


def test_stages_rerunnable(work, cube_run, tmp_path):
    d = cube_run
    assert run("clean", work / "cube.polycube.pcd", "--auto-tau", "--out", tmp_path / "clean.pcd") == 0
    assert (tmp_path / "clean.pcd").read_bytes() == (d / "clean.pcd").read_bytes()
    assert run("register", "--polycube", d / "clean.pcd", "--condition", d / "condition.pcd",
               "--out-dir", tmp_path) == 0
    for n in ("deformed.pcd", "correspondence.txt", "register.json"):
        assert (tmp_path / n).read_bytes() == (d / n).read_bytes(), n
    assert run("polycube", d / "clean.pcd", "--out", tmp_path / "voxels.txt") == 0
    assert (tmp_path / "voxels.txt").read_bytes() == (d / "voxels.txt").read_bytes()
    assert run("hexmesh", "--mesh", work / "cube.obj", "--voxels", d / "voxels.txt", "--polycube",
               d / "clean.pcd", "--corr", d / "correspondence.txt", "--out-dir", tmp_path) == 0
    for n in ("hex.vtk", "boundary.obj"):
        assert (tmp_path / n).read_bytes() == (d / n).read_bytes(), n


def test_pipeline_without_model_fails_cleanly(work, tmp_path, capsys):
    capsys.readouterr()
    assert run("pipeline", work / "cube.obj", "--out-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "generate" in err and "completed artifacts" in err
    assert (tmp_path / "condition.pcd").exists()


def test_pipeline_lshape_smoothed(work):
    out = work / "pipe_l"
    assert run("pipeline", work / "lshape.obj", "--oracle-polycube", work / "lshape.polycube.pcd",
               "--out-dir", out) == 0
    q = json.loads((out / "quality.json").read_text())
    assert q["j_min"] > 0 and q["inverted"] == 0
