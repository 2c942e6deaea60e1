import json
import os

import numpy as np
import pytest

from mmflow import cli, nn, pipeline, surface
from mmflow.config import format_config, make_config, parse_config_text, stream
from mmflow.errors import CheckpointMismatch, ConfigError, DataError, FormatError

SMALL = ["--n_data", "256", "--n_res", "4", "--n_structures", "3", "--surface_points", "40",
         "--hidden", "16", "--layers", "2", "--batch", "16", "--n_samples", "8"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--out", d, *SMALL) == 0
    return d


def test_synth_files(data):
    for name in ("eight_gaussians.txt", "clusters.txt", "rotations.txt", "sequences.txt",
                 "torsions.txt", "peptide.atoms", "receptor.atoms", "reference.pts",
                 "reference_structure.txt", "surfaces.pts", "structures.txt", "config.txt"):
        assert (data / name).is_file(), name
    assert len(surface.read_points(data / "surfaces.pts")) == 3


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nsteps = 7\nlr=0.01  # inline\n")
    cmd, cfg, given = cli.parse(["sample", "--config", str(f), "--steps", "9", "--batch=3"])
    assert cmd == "sample"
    assert cfg["steps"] == 9 and cfg["lr"] == 0.01 and cfg["batch"] == 3
    assert given == {"steps", "batch"}


def test_config_echo_round_trip():
    cfg = make_config(overrides={"lr": "0.00123", "squared_con": "false", "flow": "torus"})
    again = make_config(format_config(cfg))
    assert again == cfg


def test_unknown_key_exit_code(tmp_path, capsys):
    f = tmp_path / "bad.cfg"
    f.write_text("no_such_key = 1\n")
    assert run("synth", "--config", f, "--out", tmp_path) == 2
    assert run("synth", "--bogus", "1", "--out", tmp_path) == 2
    assert run("train", "--lr", "-1", "--out", tmp_path) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_config_syntax_error():
    with pytest.raises(ConfigError, match=r"x\.cfg:2"):
        parse_config_text("a = 1\nnot a pair\n", "x.cfg")


def test_missing_file(tmp_path, capsys):
    path = tmp_path / "nope.pts"
    code = run("eval", "--samples", path, "--reference", path, "--out", tmp_path)
    assert code == 3
    assert "nope.pts" in capsys.readouterr().err
    with pytest.raises(DataError):
        cli.parse(["synth", "--config", str(tmp_path / "missing.cfg")])


def test_malformed_points_name_line(tmp_path):
    p = tmp_path / "bad.pts"
    p.write_text("0 0 0 0 0 1 0 0 N\n1 2 3\n")
    with pytest.raises(FormatError, match="bad.pts:2"):
        surface.read_points(p)


def test_zero_iterations_keeps_init(tmp_path, data):
    out = tmp_path / "t"
    assert run("train", "--data", data, "--out", out, "--iterations", "0", *SMALL) == 0
    cfg = make_config(overrides={"iterations": "0", "hidden": "16", "layers": "2"})
    init = pipeline.models_to_tensors("pos", pipeline.build_models("pos", cfg, stream(42, "init")))
    saved = nn.load_checkpoint(out / "model.ckpt")
    assert set(saved) == set(init)
    for k in init:
        assert np.array_equal(saved[k], init[k]), k
    assert (out / "loss.csv").read_text().splitlines() == [
        "iteration,pos,ori,cat,con,str,total,lr"]


def test_log_rows(tmp_path, data):
    out = tmp_path / "t"
    assert run("train", "--data", data, "--out", out, "--iterations", "30",
               "--log_every", "10", *SMALL) == 0
    rows = (out / "loss.csv").read_text().splitlines()[1:]
    assert [int(r.split(",")[0]) for r in rows] == [10, 20, 30]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("pos")
    assert run("train", "--data", data, "--out", out, "--iterations", "20",
               "--log_every", "10", *SMALL) == 0
    return out


def test_trajectory_all(tmp_path, trained):
    out = tmp_path / "s"
    assert run("sample", "--data", trained, "--out", out, "--steps", "12",
               "--trajectory", "all", *SMALL) == 0
    heads = [l for l in (out / "trajectory.txt").read_text().splitlines() if l.startswith("#")]
    assert len(heads) == 13
    assert heads[0].startswith("# step 0 ") and heads[-1].startswith("# step 12 ")
    last = np.loadtxt(out / "trajectory.txt", comments=None, skiprows=1 + 12 * 9,
                      max_rows=8)
    assert np.array_equal(last, np.loadtxt(out / "samples.txt"))


def test_trajectory_times(tmp_path, trained):
    out = tmp_path / "s"
    assert run("sample", "--data", trained, "--out", out, "--steps", "10",
               "--trajectory", "0.5,0,1", *SMALL) == 0
    heads = [l.split()[2] for l in (out / "trajectory.txt").read_text().splitlines()
             if l.startswith("#")]
    assert heads == ["0", "5", "10"]


def test_sampling_deterministic(tmp_path, trained):
    for d in ("a", "b"):
        assert run("sample", "--data", trained, "--out", tmp_path / d, *SMALL) == 0
    assert (tmp_path / "a/samples.txt").read_bytes() == (tmp_path / "b/samples.txt").read_bytes()


def test_flow_mismatch(tmp_path, trained, capsys):
    with pytest.raises(CheckpointMismatch):
        pipeline.cmd_sample(make_config(overrides={"data": str(trained), "flow": "so3",
                                                   "out": str(tmp_path)}), {"flow"})
    assert run("sample", "--data", trained, "--flow", "torus", "--out", tmp_path) == 3


def test_constant_field_endpoint(tmp_path, trained):
    # a field equal to a constant c moves every prior draw by exactly c
    tensors = nn.load_checkpoint(trained / "model.ckpt")
    n_lin = int(tensors["pos/arch"][2])
    tensors[f"pos/W{n_lin - 1}"][:] = 0.0
    c = np.array([0.7, -1.3])
    tensors[f"pos/b{n_lin - 1}"][:] = c
    ckpt = tmp_path / "const.ckpt"
    nn.save_checkpoint(ckpt, tensors)
    assert run("sample", "--checkpoint", ckpt, "--out", tmp_path, "--n_samples", "50",
               "--steps", "37") == 0
    x0 = stream(42, "sample").standard_normal((50, 2))
    got = np.loadtxt(tmp_path / "samples.txt")
    assert np.max(np.abs(got - (x0 + c))) <= 1e-6


def test_eval_identity(tmp_path, data, capsys):
    code = run("eval", "--samples", data / "reference.pts", "--reference",
               data / "reference.pts", "--structure", data / "reference_structure.txt",
               "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert list(report) == ["chamfer", "nc", "iou", "rmsd", "aar"]
    rmsd = report.pop("rmsd")
    assert report == {"chamfer": 0.0, "nc": 1.0, "iou": 1.0, "aar": 100.0}
    assert rmsd < 1e-12  # svd roundoff of the identity alignment
    assert "iou=1" in capsys.readouterr().out
    blocks = (tmp_path / "metrics.dat").read_text().split("\n\n\n")
    assert len(blocks) == 5


def test_surface_command(tmp_path, data):
    assert run("surface", "--atoms", data / "peptide.atoms", "--out", tmp_path,
               "--surface_points", "60") == 0
    (cloud,) = surface.read_points(tmp_path / "surface.pts")
    assert len(cloud) > 0
    assert np.allclose(np.linalg.norm(cloud.normal, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("flow", ["so3", "torus", "cat", "con", "joint"])
def test_other_flows_round_trip(tmp_path, data, flow):
    out = tmp_path / flow
    assert run("train", "--data", data, "--out", out, "--flow", flow, "--iterations", "3",
               "--log_every", "3", "--steps", "4", *SMALL) == 0
    assert run("sample", "--data", out, "--out", out, "--steps", "4", *SMALL[:-2],
               "--n_samples", "2") == 0
    name = "samples.pts" if flow == "joint" else "samples.txt"
    assert os.path.getsize(out / name) > 0


def test_cat_trajectory_rejected(tmp_path, data):
    out = tmp_path / "c"
    assert run("train", "--data", data, "--out", out, "--flow", "cat", "--iterations", "1",
               "--log_every", "1", *SMALL) == 0
    assert run("sample", "--data", out, "--out", out, "--trajectory", "all") == 2
