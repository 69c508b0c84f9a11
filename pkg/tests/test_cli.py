import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_pose
from oracles import greedy_cover
from posefuse.cli import DEFAULTS, main
from posefuse.fileio import read_png, write_obj, write_camera, write_pose
from posefuse.geometry import Camera, RigidPose, visible_vertices
from posefuse.sampling import frames_to_manifest, hemisphere_poses, FrameRecord
from posefuse.scenegen import make_primitive


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run("gen-scene", "--seed", 7, "--size", 64, "--out", out) == 0
    return out


def test_defaults_mirror_reference_values():
    r = DEFAULTS["render"]
    assert (r["k"], r["max_iters"], r["lambda_i"], r["lambda_f"], r["lambda_s"]) == (6, 50, 5, 10, 1)
    assert DEFAULTS["gen-scene"]["size"] == 256 and DEFAULTS["sweep"]["trials"] == 50


def test_gen_scene_manifest(scene, tmp_path):
    man = json.loads((scene / "manifest.json").read_text())
    assert man["kind"] == "scene" and len(man["sources"]) == 5
    for src in man["sources"]:
        for key in ("image", "mask", "pose", "exact_pose"):
            assert (scene / src[key]).is_file()
    again = tmp_path / "again"
    assert run("gen-scene", "--seed", 7, "--size", 64, "--out", again) == 0
    assert (again / "manifest.json").read_bytes() == (scene / "manifest.json").read_bytes()
    assert (again / "target.png").read_bytes() == (scene / "target.png").read_bytes()


def test_gen_scene_input_errors(tmp_path, capsys):
    assert run("gen-scene", "--shape", "sphere", "--out", tmp_path / "x") == 2
    assert "unknown shape" in capsys.readouterr().err
    assert run("gen-scene", "--n-sources", 0, "--out", tmp_path / "x") == 2
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert run("gen-scene", "--size", 32, "--out", blocker / "sub") == 2
    assert run("gen-scene") == 2  # missing --out
    assert run("no-such-command") == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_sources": 2, "size": 32, "shape": "cylinder"}))
    assert run("gen-scene", "--config", cfg, "--n-sources", 3, "--out", tmp_path / "s") == 0
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(man["sources"]) == 3 and man["shape"] == "cylinder"
    assert read_png(tmp_path / "s" / "target.png").shape == (32, 32, 3)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("gen-scene", "--config", cfg, "--out", tmp_path / "t") == 2
    assert run("gen-scene", "--config", tmp_path / "missing.json", "--out", tmp_path / "t") == 2


def test_render_outputs_and_losses(scene, tmp_path, capsys):
    out = tmp_path / "r"
    assert run("render", "--scene", scene, "--max-iters", 5, "--out", out) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"rendered": 1, "skipped": 0}
    man = json.loads((out / "manifest.json").read_text())
    (entry,) = man["targets"]
    assert (out / entry["image"]).is_file() and (out / entry["trace"]).is_file()
    assert entry["image_loss"] >= 0 and entry["smooth_loss"] >= 0
    trace = json.loads((out / entry["trace"]).read_text())
    assert len(trace["traces"]) == 5
    assert all(t["iterations_run"] <= 5 for t in trace["traces"])


def test_render_exact_poses_refine_matches_no_refine(tmp_path):
    sc = tmp_path / "exact"
    assert run("gen-scene", "--seed", 2, "--size", 96, "--trans-err", 0, "--rot-err", 0,
               "--out", sc) == 0
    assert run("render", "--scene", sc, "--out", tmp_path / "a") == 0
    assert run("render", "--scene", sc, "--no-refine", "--out", tmp_path / "b") == 0
    a = read_png(tmp_path / "a" / "renders" / "0000.png")
    b = read_png(tmp_path / "b" / "renders" / "0000.png")
    assert np.abs(a - b).max() <= 1e-6


def test_render_missing_inputs(tmp_path, scene):
    assert run("render", "--scene", tmp_path / "nothing", "--out", tmp_path / "o") == 2
    assert run("render", "--out", tmp_path / "o") == 2
    assert run("render", "--scene", scene, "--target-pose", tmp_path / "none.json",
               "--out", tmp_path / "o") == 2


def test_render_does_not_touch_inputs(scene, tmp_path):
    before = {p: p.read_bytes() for p in scene.rglob("*") if p.is_file()}
    assert run("render", "--scene", scene, "--no-refine", "--out", tmp_path / "o") == 0
    after = {p: p.read_bytes() for p in scene.rglob("*") if p.is_file()}
    assert before == after


def test_render_hemisphere_and_inplane_counts(scene, tmp_path):
    out = tmp_path / "h"
    assert run("render", "--scene", scene, "--hemisphere", "--az-step", 90, "--el-step", 45,
               "--inplane", "--no-refine", "--out", out) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["targets"]) == 8 * 7
    assert len(list((out / "renders").glob("*.png"))) == 56
    rolls = sorted({t["roll"] for t in man["targets"]})
    assert rolls == [-45, -30, -15, 0, 15, 30, 45]
    assert all(len(t["views"]) <= 6 for t in man["targets"])


def test_render_full_hemisphere_writes_1296_images(tmp_path):
    sc = tmp_path / "tiny"
    assert run("gen-scene", "--seed", 3, "--size", 32, "--out", sc) == 0
    out = tmp_path / "h"
    assert run("render", "--scene", sc, "--hemisphere", "--no-refine", "--workers", 2,
               "--out", out) == 0
    assert len(list((out / "renders").glob("*.png"))) == 1296
    assert len(json.loads((out / "manifest.json").read_text())["targets"]) == 1296


def _frame_manifest(tmp_path, poses):
    path = tmp_path / "frames.json"
    path.write_text(json.dumps(frames_to_manifest([FrameRecord(i, p) for i, p in
                                                   enumerate(poses)])))
    return path


def test_sample_diversity(tmp_path, capsys):
    same = _frame_manifest(tmp_path, [RigidPose.identity()] * 5)
    assert run("sample", "--frames", same, "--out", tmp_path / "a") == 0
    assert json.loads(capsys.readouterr().out)["ids"] in ([0], [1], [2], [3], [4])
    rng = np.random.default_rng(0)
    many = _frame_manifest(tmp_path, [RigidPose(random_pose(rng).rotation, rng.uniform(0, 2, 3))
                                      for _ in range(100)])
    assert run("sample", "--frames", many, "--seed", 4, "--out", tmp_path / "b") == 0
    sel = json.loads((tmp_path / "b" / "selection.json").read_text())
    assert 1 <= len(sel["ids"]) <= 16


def test_sample_visibility_matches_oracle(tmp_path):
    mesh = make_primitive("box")
    cam = Camera.centered(48, 48, 86.0)
    poses = hemisphere_poses(45, 30, 0.6).poses
    write_obj(tmp_path / "m.obj", mesh)
    write_camera(tmp_path / "c.json", cam)
    frames = _frame_manifest(tmp_path, poses)
    assert run("sample", "--frames", frames, "--strategy", "visibility", "--mesh",
               tmp_path / "m.obj", "--camera", tmp_path / "c.json", "--out", tmp_path / "o") == 0
    got = json.loads((tmp_path / "o" / "selection.json").read_text())["ids"]
    from posefuse.fileio import read_mesh
    reread = read_mesh(tmp_path / "m.obj")
    sets = [visible_vertices(reread, p, cam) for p in poses]
    assert got == greedy_cover(sets, list(range(len(poses))))


def test_sample_errors(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"frames": []}))
    assert run("sample", "--frames", empty, "--out", tmp_path / "o") == 2
    assert run("sample", "--frames", tmp_path / "missing.json", "--out", tmp_path / "o") == 2
    frames = _frame_manifest(tmp_path, [RigidPose.identity()])
    assert run("sample", "--frames", frames, "--strategy", "visibility",
               "--out", tmp_path / "o") == 2


def test_sweep_outputs(tmp_path):
    out = tmp_path / "s"
    assert run("sweep", "--shapes", "box", "--trans-levels", "0,0.01", "--rot-levels", "0",
               "--trials", 2, "--size", 40, "--out", out) == 0
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == ("shape,trans_err,rot_err,metric,refined_mean,refined_std,"
                       "unrefined_mean,unrefined_std,n")
    assert len(rows) == 1 + 2 * 3
    trials = (out / "trials.csv").read_text().splitlines()
    assert len(trials) == 1 + 2 * 2
    zero = [r.split(",") for r in rows[1:] if r.split(",")[1] == "0.0" and r.split(",")[3] == "l1"]
    assert abs(float(zero[0][4]) - float(zero[0][6])) <= 1e-6
    assert run("sweep", "--shapes", "cone", "--out", out) == 2
    assert run("sweep", "--trials", 0, "--out", out) == 2


def test_eval_recall(tmp_path, capsys):
    rng = np.random.default_rng(1)
    poses = [random_pose(rng) for _ in range(4)]
    gt = tmp_path / "gt.json"
    gt.write_text(json.dumps({"poses": [p.to_json() for p in poses]}))
    assert run("eval", "--gt", gt, "--est", gt, "--shape", "box", "--out", tmp_path / "a") == 0
    assert json.loads(capsys.readouterr().out)["recall"] == 1.0
    far = tmp_path / "far.json"
    far.write_text(json.dumps({"poses": [RigidPose(p.rotation, p.translation + [0.1, 0, 0])
                                         .to_json() for p in poses]}))
    assert run("eval", "--gt", gt, "--est", far, "--shape", "box", "--out", tmp_path / "b") == 0
    summary = json.loads((tmp_path / "b" / "eval.json").read_text())
    assert summary["recall"] == 0.0
    rows = (tmp_path / "b" / "eval.csv").read_text().splitlines()[1:]
    assert summary["recall"] == np.mean([int(r.split(",")[3]) for r in rows])
    # a single pose file works too
    one = tmp_path / "one.json"
    write_pose(one, poses[0])
    assert run("eval", "--gt", one, "--est", one, "--shape", "cylinder", "--symmetric",
               "--out", tmp_path / "c") == 0


def test_eval_errors(tmp_path):
    gt = tmp_path / "gt.json"
    write_pose(gt, RigidPose.identity())
    two = tmp_path / "two.json"
    two.write_text(json.dumps({"poses": [RigidPose.identity().to_json()] * 2}))
    assert run("eval", "--gt", gt, "--est", two, "--shape", "box", "--out", tmp_path / "o") == 2
    assert run("eval", "--gt", gt, "--est", gt, "--out", tmp_path / "o") == 2
    assert run("eval", "--gt", gt, "--est", gt, "--mesh", tmp_path / "none.obj",
               "--out", tmp_path / "o") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "posefuse.cli", "eval", "--gt", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "error" in proc.stderr and proc.stdout == ""
