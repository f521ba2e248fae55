import json
from pathlib import Path

import numpy as np
import pytest

from rigsim import cli
from rigsim.errors import NumericalError
from rigsim.gradcheck import GradcheckReport
from rigsim.loss import load_bundle
from rigsim.rigging import PoseTrajectory, save_trajectory
from rigsim.softrender import read_pnm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene_a_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene_a")
    assert run("gen-synthetic", "--scene", "A", "--frames", 3, "--out", out) == 0
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- exit codes and manifest

def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("gradcheck", "not-a-target")
    assert exc.value.code == 1


def test_missing_input_exit_code(tmp_path, capsys):
    assert run("optimize-pose", "--input", tmp_path / "missing", "--out", tmp_path / "o") == 2
    assert "not found" in capsys.readouterr().err


def test_corrupt_input_names_file_and_record(tmp_path, scene_a_dir, capsys):
    work = tmp_path / "w"
    work.mkdir()
    for name, data in _files(scene_a_dir).items():
        (work / name).parent.mkdir(parents=True, exist_ok=True)
        (work / name).write_bytes(data)
    lines = (work / "mesh.obj").read_text().splitlines()
    lines[4] = "v 1.0 oops 2.0"
    (work / "mesh.obj").write_text("\n".join(lines) + "\n")
    assert run("optimize-pose", "--input", work, "--iters", 1, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "mesh.obj" in err and ":5" in err


def test_bad_config_exit_code(tmp_path, scene_a_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"optim": {"no_such_key": 1}}')
    assert run("optimize-pose", "--input", scene_a_dir, "--config", cfg, "--out", tmp_path / "o") == 2
    cfg.write_text("{not json")
    assert run("gradcheck", "fem-force", "--config", cfg, "--out", tmp_path / "o") == 2


def test_gradcheck_success_and_failure(tmp_path, monkeypatch, capsys):
    assert run("gradcheck", "fem-force", "--out", tmp_path / "ok") == 0
    assert "fem-force" in capsys.readouterr().out
    import rigsim.gradcheck

    monkeypatch.setattr(rigsim.gradcheck, "gradcheck",
                        lambda target, seed=0, size=None: GradcheckReport(target, 0.5, 0.1, 3, 1e-3))
    assert run("gradcheck", "fem-force", "--out", tmp_path / "bad") == 3


def test_numerical_failure_leaves_no_manifest(tmp_path, monkeypatch):
    def boom(args, cfg, run_):
        run_.output("partial.txt").write_text("x")
        raise NumericalError("diverged")

    monkeypatch.setitem(cli.COMMANDS, "gradcheck", boom)
    assert run("gradcheck", "fem-force", "--out", tmp_path) == 3
    assert not (tmp_path / "manifest.json").exists()


def test_manifest_contents(scene_a_dir):
    m = json.loads((scene_a_dir / "manifest.json").read_text())
    assert set(m) == {"command", "config_hash", "tool_version", "inputs", "outputs", "wall_time_s"}
    assert m["command"] == "gen-synthetic"
    assert "gt_trajectory.csv" in m["outputs"] and "refs" in m["outputs"]
    assert set(m["wall_time_s"]) >= {"setup", "synthesize", "write"}
    assert not list(scene_a_dir.glob(".manifest.json.*"))


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("old")
    cli.atomic_write_json(p, {"a": 1})
    assert json.loads(p.read_text()) == {"a": 1}
    assert [q.name for q in tmp_path.iterdir()] == ["m.json"]


def test_atomic_write_failure_keeps_old_file(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("old")
    with pytest.raises(TypeError):
        cli.atomic_write_json(p, {"a": object()})
    assert p.read_text() == "old"
    assert [q.name for q in tmp_path.iterdir()] == ["m.json"]


def test_gen_synthetic_is_deterministic(tmp_path, scene_a_dir):
    assert run("gen-synthetic", "--scene", "A", "--frames", 3, "--out", tmp_path) == 0
    a, b = _files(scene_a_dir), _files(tmp_path)
    assert a.keys() == b.keys()
    for name in a:
        if name == "manifest.json":
            ma, mb = json.loads(a[name]), json.loads(b[name])
            ma.pop("wall_time_s"), mb.pop("wall_time_s")
            assert ma == mb
        else:
            assert a[name] == b[name], name


# ---------------------------------------------------------------- command behavior

def test_zero_amplitude_frames_identical(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": {"motions": [{"amplitude_deg": 0.0}]}}))
    assert run("gen-synthetic", "--scene", "A", "--frames", 3, "--config", cfg, "--out", tmp_path / "o") == 0
    refs = load_bundle(tmp_path / "o" / "refs")
    for t in range(1, 3):
        assert refs.images[t].tobytes() == refs.images[0].tobytes()
        assert refs.masks[t].tobytes() == refs.masks[0].tobytes()
        assert refs.tracks[t].tobytes() == refs.tracks[0].tobytes()


def test_track_noise_half_normal_statistic(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": {"track_noise_px": 1.0}}))
    assert run("gen-synthetic", "--scene", "A", "--config", cfg, "--seed", 3, "--out", tmp_path / "noisy") == 0
    assert run("gen-synthetic", "--scene", "A", "--seed", 3, "--out", tmp_path / "clean") == 0
    noisy = load_bundle(tmp_path / "noisy" / "refs").tracks
    clean = load_bundle(tmp_path / "clean" / "refs").tracks
    d = np.abs(noisy - clean).ravel()
    assert d.size >= 1000
    assert abs(d.mean() / np.sqrt(2 / np.pi) - 1) < 0.1


def test_config_precedence(tmp_path, scene_a_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"optim": {"max_iters": 3}}))
    assert run("optimize-pose", "--input", scene_a_dir, "--config", cfg, "--out", tmp_path / "file") == 0
    assert len((tmp_path / "file" / "loss_log.csv").read_text().splitlines()) == 1 + 4
    assert run("optimize-pose", "--input", scene_a_dir, "--config", cfg, "--iters", 1, "--out", tmp_path / "flag") == 0
    assert len((tmp_path / "flag" / "loss_log.csv").read_text().splitlines()) == 1 + 2
    m1 = json.loads((tmp_path / "file" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "flag" / "manifest.json").read_text())
    assert m1["config_hash"] != m2["config_hash"]


def test_render_coverage_matches_mask(tmp_path, scene_a_dir):
    assert run("render", "--input", scene_a_dir, "--out", tmp_path) == 0
    refs = load_bundle(scene_a_dir / "refs")
    for t in range(refs.n_frames):
        sil = read_pnm(tmp_path / "render" / f"silhouette_{t:03d}.pgm")
        cov, mask = sil.sum(), refs.masks[t].sum()
        assert cov > 0
        assert abs(cov - mask) <= 0.02 * mask


def test_simulate_with_rest_bcs_is_static(tmp_path):
    work = tmp_path / "c"
    assert run("gen-synthetic", "--scene", "C", "--frames", 3, "--out", work) == 0
    save_trajectory(tmp_path / "rest.csv", PoseTrajectory.identity(3, 2))
    assert run("simulate", "--input", work, "--trajectory", tmp_path / "rest.csv", "--out", tmp_path / "o") == 0
    sim = tmp_path / "o" / "sim"
    frames = sorted(sim.glob("frame_*.tetmesh"))
    assert len(frames) == 3
    assert all(f.read_bytes() == frames[0].read_bytes() for f in frames)
    surf = sorted(sim.glob("surface_*.obj"))
    assert all(f.read_bytes() == surf[0].read_bytes() for f in surf)


def test_optimize_pose_writes_outputs(tmp_path, scene_a_dir, capsys):
    assert run("optimize-pose", "--input", scene_a_dir, "--iters", 2, "--out", tmp_path) == 0
    assert (tmp_path / "trajectory.csv").exists()
    assert "pose:" in capsys.readouterr().out
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert str(scene_a_dir / "mesh.obj") in m["inputs"]
    assert m["outputs"] == ["loss_log.csv", "trajectory.csv"]


def test_config_hash_ignores_input_location(tmp_path, scene_a_dir):
    moved = tmp_path / "elsewhere"
    for name, data in _files(scene_a_dir).items():
        (moved / name).parent.mkdir(parents=True, exist_ok=True)
        (moved / name).write_bytes(data)
    assert run("optimize-pose", "--input", scene_a_dir, "--iters", 1, "--out", tmp_path / "o1") == 0
    assert run("optimize-pose", "--input", moved, "--iters", 1, "--out", tmp_path / "o2") == 0
    m1 = json.loads((tmp_path / "o1" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "o2" / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"]
    assert m1["inputs"] != m2["inputs"]
