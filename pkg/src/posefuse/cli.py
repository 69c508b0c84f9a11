"""Command-line front end: ``posefuse {gen-scene,render,sample,sweep,eval}``.

Every command takes ``--config`` (a JSON object of option values), ``--seed``,
``--workers`` and ``--out``. Flags given on the command line override the
config file, which overrides the built-in defaults. Machine-readable results
go to files under ``--out`` (written atomically, manifest last) and a short
JSON summary goes to standard output; logs go to standard error.

Exit codes: 0 success (warnings included), 2 usage or input error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fileio import (dumps_json, read_camera, read_json, read_mask, read_mesh, read_png,
                     read_pose, write_camera, write_json, write_obj, write_png, write_pose)
from .geometry import RigidPose, TriangleMesh
from .metrics import (DEFAULT_ROT_LEVELS, DEFAULT_TRANS_LEVELS, evaluate_pose, map_jobs,
                      sensitivity_sweep)

log = logging.getLogger("posefuse")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3


class InputError(Exception):
    """Bad arguments or unreadable/invalid input files."""


class InvariantError(Exception):
    """A result violated one of the library's guarantees."""


COMMON_DEFAULTS = {"seed": 0, "workers": 1, "out": None}

DEFAULTS = {
    "gen-scene": {"shape": "box", "n_sources": 5, "trans_err": 0.01, "rot_err": 0.05,
                  "size": 256, "augment": False},
    "render": {"scene": None, "target_pose": None, "hemisphere": False, "az_step": 5.0,
               "el_step": 5.0, "radius": 0.6, "inplane": False, "refine": True, "k": 6,
               "max_iters": 50, "step_delta": 1.0, "temperature": 0.05,
               "lambda_i": 5.0, "lambda_f": 10.0, "lambda_s": 1.0},
    "sample": {"frames": None, "strategy": "diversity", "mesh": None, "camera": None,
               "max_count": 16, "trans_mm": 300.0, "rot_deg": 45.0},
    "sweep": {"shapes": ["box", "cylinder"], "trans_levels": list(DEFAULT_TRANS_LEVELS),
              "rot_levels": list(DEFAULT_ROT_LEVELS), "trials": 50, "size": 256,
              "refine": True, "max_iters": 50, "step_delta": 1.0, "temperature": 0.05},
    "eval": {"gt": None, "est": None, "mesh": None, "shape": None, "symmetric": False,
             "fraction": 0.1},
}


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen-scene", help="write a synthetic trial set")
    common(g)
    g.add_argument("--shape")
    g.add_argument("--n-sources", type=int)
    g.add_argument("--trans-err", type=float, help="max translation error per axis, meters")
    g.add_argument("--rot-err", type=float, help="max rotation error per Euler angle, radians")
    g.add_argument("--size", type=int, help="image width and height in pixels")
    g.add_argument("--augment", action="store_true", default=None)

    r = sub.add_parser("render", help="fuse source views at target poses")
    common(r)
    r.add_argument("--scene", help="scene manifest (from gen-scene) or its directory")
    r.add_argument("--target-pose", help="pose JSON; defaults to the scene's target pose")
    r.add_argument("--hemisphere", action="store_true", default=None)
    r.add_argument("--az-step", type=float)
    r.add_argument("--el-step", type=float)
    r.add_argument("--radius", type=float)
    r.add_argument("--inplane", action="store_true", default=None)
    r.add_argument("--no-refine", dest="refine", action="store_false", default=None)
    r.add_argument("--k", type=int, help="views per target in hemisphere mode")
    r.add_argument("--max-iters", type=int)
    r.add_argument("--step-delta", type=float)
    r.add_argument("--temperature", type=float)

    s = sub.add_parser("sample", help="select source frames")
    common(s)
    s.add_argument("--frames", help="frame manifest JSON")
    s.add_argument("--strategy", choices=("diversity", "visibility"))
    s.add_argument("--mesh")
    s.add_argument("--camera")
    s.add_argument("--max-count", type=int)
    s.add_argument("--trans-mm", type=float)
    s.add_argument("--rot-deg", type=float)

    w = sub.add_parser("sweep", help="pose-noise sensitivity sweep")
    common(w)
    w.add_argument("--shapes", type=_str_list)
    w.add_argument("--trans-levels", type=_float_list, help="comma-separated meters")
    w.add_argument("--rot-levels", type=_float_list, help="comma-separated radians")
    w.add_argument("--trials", type=int)
    w.add_argument("--size", type=int)
    w.add_argument("--no-refine", dest="refine", action="store_false", default=None)
    w.add_argument("--max-iters", type=int)
    w.add_argument("--step-delta", type=float)
    w.add_argument("--temperature", type=float)

    e = sub.add_parser("eval", help="ADD/ADI pose scores")
    common(e)
    e.add_argument("--gt", help="ground-truth pose JSON (single pose or {'poses': [...]})")
    e.add_argument("--est", help="estimated pose JSON, same layout as --gt")
    e.add_argument("--mesh")
    e.add_argument("--shape", help="box or cylinder, instead of --mesh")
    e.add_argument("--symmetric", action="store_true", default=None)
    e.add_argument("--fraction", type=float)
    return p


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(COMMON_DEFAULTS)
    opts.update(DEFAULTS[command])
    if args.config:
        try:
            cfg = read_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        for key, val in cfg.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise InputError(f"unknown config key {key!r} for {command}")
            opts[key] = val
    for key, val in vars(args).items():
        if key in opts and val is not None:
            opts[key] = val
    if opts["out"] is None:
        raise InputError("--out is required")
    if int(opts["workers"]) < 1:
        raise InputError("--workers must be at least 1")
    return opts


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _refine_config(opts):
    from .refine import RefineConfig

    try:
        return RefineConfig(step_delta=float(opts["step_delta"]),
                            max_iters=int(opts["max_iters"]),
                            temperature=float(opts["temperature"]))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _mesh_from(opts) -> TriangleMesh:
    from .scenegen import make_primitive

    if opts.get("mesh"):
        return read_mesh(opts["mesh"])
    if opts.get("shape"):
        return make_primitive(opts["shape"])
    raise InputError("a mesh (--mesh) or primitive shape (--shape) is required")


# gen-scene -----------------------------------------------------------------


def cmd_gen_scene(opts) -> dict:
    from .scenegen import make_trial_set

    if opts["shape"] not in ("box", "cylinder"):
        raise InputError(f"unknown shape {opts['shape']!r}")
    if opts["n_sources"] < 1:
        raise InputError("--n-sources must be at least 1")
    if opts["trans_err"] < 0 or opts["rot_err"] < 0:
        raise InputError("error ranges must be nonnegative")
    out = _out_dir(opts)
    ts = make_trial_set(opts["shape"], n_sources=int(opts["n_sources"]),
                        trans_err_max=float(opts["trans_err"]), rot_err_max=float(opts["rot_err"]),
                        seed=int(opts["seed"]), size=int(opts["size"]),
                        augment=bool(opts["augment"]))
    write_obj(out / "mesh.obj", ts.mesh)
    write_camera(out / "camera.json", ts.camera)
    write_pose(out / "target_pose.json", ts.target_pose)
    write_png(out / "target.png", ts.target_image)
    write_png(out / "target_mask.png", ts.target_mask)
    write_png(out / "texture.png", ts.texture)
    sources = []
    for k, s in enumerate(ts.sources):
        d = f"sources/{k:02d}"
        write_png(out / d / "image.png", s.image)
        write_png(out / d / "mask.png", s.mask)
        write_pose(out / d / "pose.json", s.perturbed_pose)
        write_pose(out / d / "exact_pose.json", s.exact_pose)
        sources.append({"id": k, "image": f"{d}/image.png", "mask": f"{d}/mask.png",
                        "pose": f"{d}/pose.json", "exact_pose": f"{d}/exact_pose.json"})
    manifest = {"kind": "scene", "shape": ts.kind, "seed": ts.seed, "mesh": "mesh.obj",
                "camera": "camera.json", "target_pose": "target_pose.json",
                "target_image": "target.png", "target_mask": "target_mask.png",
                "texture": "texture.png", "trans_err": ts.trans_err, "rot_err": ts.rot_err,
                "light_dir": list(ts.light_dir), "sources": sources}
    write_json(out / "manifest.json", manifest)
    return {"manifest": str(out / "manifest.json"), "sources": len(sources)}


# render --------------------------------------------------------------------


def _load_scene(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise InputError(f"scene manifest not found: {path}")
    root = path.parent
    man = read_json(path)
    try:
        mesh = read_mesh(root / man["mesh"])
        camera = read_camera(root / man["camera"])
        views = []
        for src in man["sources"]:
            views.append((int(src["id"]), read_png(root / src["image"]),
                          read_mask(root / src["mask"]), read_pose(root / src["pose"])))
    except KeyError as exc:
        raise InputError(f"scene manifest lacks {exc}") from exc
    return root, man, mesh, camera, views


def _render_job(job):
    from .fusion import LossWeights, image_loss, smooth_loss
    from .geometry import is_rotation
    from .raster import SourceView
    from .refine import render_nol

    (index, pose, mesh, camera, views, cfg, refine, gt, weights) = job
    srcs = [SourceView(img, mask, p) for _, img, mask, p in views]
    res = render_nol(srcs, mesh, camera, pose, cfg, refine=refine)
    for p in res.poses:
        if not is_rotation(p.rotation, 1e-9):
            raise InvariantError("refined rotation left SO(3)")
    info = {"index": index, "status": res.status,
            "views": [int(v[0]) for v in views],
            "refined_poses": [p.to_json() for p in res.poses],
            "traces": [t.to_json() for t in res.traces]}
    if not res.final.mask.any():
        info["status"] = "empty"
    elif gt is not None:
        gt_img, gt_mask = gt
        m = gt_mask & res.final.mask
        if m.any():
            info["image_loss"] = image_loss(res.rendering, gt_img, m, weights)
        info["smooth_loss"] = smooth_loss(res.final.weighted, res.final.mask, weights.lambda_s)
    return res.rendering, info


def cmd_render(opts) -> dict:
    from .fusion import LossWeights
    from .sampling import FrameRecord, hemisphere_poses, inplane_angles, roll_pose
    from .sampling import select_views_for_target

    if not opts["scene"]:
        raise InputError("--scene is required")
    root, man, mesh, camera, views = _load_scene(opts["scene"])
    if not 1 <= len(views) <= 8 and not opts["hemisphere"]:
        raise InputError("between 1 and 8 source views are supported")
    if not 1 <= int(opts["k"]) <= 8:
        raise InputError("--k must be between 1 and 8")
    cfg = _refine_config(opts)
    weights = LossWeights(opts["lambda_i"], opts["lambda_f"], opts["lambda_s"])
    out = _out_dir(opts)

    targets = []  # (pose, label)
    if opts["hemisphere"]:
        try:
            grid = hemisphere_poses(opts["az_step"], opts["el_step"], opts["radius"])
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        targets = [(p, {"azimuth": a, "elevation": e}) for p, (a, e) in zip(grid.poses, grid.angles)]
    else:
        pose_file = opts["target_pose"] or (root / man["target_pose"] if "target_pose" in man else None)
        if pose_file is None:
            raise InputError("--target-pose is required for this scene")
        targets = [(read_pose(pose_file), {})]
    if opts["inplane"]:
        targets = [(roll_pose(p, a), dict(lab, roll=a)) for p, lab in targets
                   for a in inplane_angles()]

    gt = None
    if not opts["hemisphere"] and not opts["inplane"] and not opts["target_pose"] \
            and "target_image" in man:
        gt = (read_png(root / man["target_image"]), read_mask(root / man["target_mask"]))

    records = None
    if opts["hemisphere"]:
        records = [FrameRecord.from_pose(v[0], v[3], mesh, camera) for v in views]
    jobs, skipped = [], []
    for i, (pose, label) in enumerate(targets):
        chosen = views
        if records is not None:
            sel = select_views_for_target(pose, records, mesh, camera, int(opts["k"]))
            ids = {f.frame_id for f in sel.frames}
            chosen = [v for v in views if v[0] in ids]
            if not chosen:
                skipped.append(i)
                continue
        jobs.append((i, pose, mesh, camera, chosen, cfg, bool(opts["refine"]), gt, weights))
    results = map_jobs(_render_job, jobs, int(opts["workers"]))

    entries = []
    by_index = {info["index"]: (img, info) for img, info in results}
    for i, (pose, label) in enumerate(targets):
        entry = {"index": i, "target_pose": pose.to_json(), **label}
        if i in by_index:
            img, info = by_index[i]
            name = f"renders/{i:04d}.png"
            write_png(out / name, img)
            if opts["refine"]:
                trace_name = f"traces/{i:04d}.json"
                write_json(out / trace_name, {"views": info["views"], "traces": info["traces"],
                                              "refined_poses": info["refined_poses"]})
                entry["trace"] = trace_name
                for t in info["traces"]:
                    if t["stop_reason"] == "starved":
                        log.warning("target %d: a view was starved during refinement", i)
            entry.update({"image": name, "status": info["status"], "views": info["views"]})
            for key in ("image_loss", "smooth_loss"):
                if key in info:
                    entry[key] = info[key]
        else:
            # keep one image per target pose; nothing could be fused here
            name = f"renders/{i:04d}.png"
            write_png(out / name, np.zeros(camera.shape + (3,)))
            entry.update({"image": name, "status": "no_views", "views": []})
            log.warning("target %d: no source view sees the target surface", i)
        entries.append(entry)
    write_json(out / "manifest.json", {"kind": "render", "refine": bool(opts["refine"]),
                                       "targets": entries})
    return {"rendered": len(results), "skipped": len(skipped)}


# sample --------------------------------------------------------------------


def cmd_sample(opts) -> dict:
    from .sampling import diversity_sample, greedy_visibility_sample, load_frame_manifest

    if not opts["frames"]:
        raise InputError("--frames is required")
    try:
        frames = load_frame_manifest(opts["frames"])
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed frame manifest: {exc}") from exc
    if not frames:
        raise InputError("frame manifest is empty")
    out = _out_dir(opts)
    if opts["strategy"] == "diversity":
        sel = diversity_sample(frames, float(opts["trans_mm"]), float(opts["rot_deg"]),
                               int(opts["max_count"]), int(opts["seed"]))
    elif opts["strategy"] == "visibility":
        if not (opts["mesh"] and opts["camera"]):
            raise InputError("visibility sampling needs --mesh and --camera")
        sel = greedy_visibility_sample(frames, read_mesh(opts["mesh"]), read_camera(opts["camera"]))
    else:
        raise InputError(f"unknown strategy {opts['strategy']!r}")
    ids = [f.frame_id for f in sel]
    result = {"strategy": opts["strategy"], "seed": int(opts["seed"]), "ids": ids}
    write_json(out / "selection.json", result)
    return result


# sweep ---------------------------------------------------------------------


def cmd_sweep(opts) -> dict:
    from .fileio import atomic_write_text

    for shape in opts["shapes"]:
        if shape not in ("box", "cylinder"):
            raise InputError(f"unknown shape {shape!r}")
    levels = [(t, r) for t in opts["trans_levels"] for r in opts["rot_levels"]]
    if not levels:
        raise InputError("error levels must not be empty")
    if int(opts["trials"]) < 1:
        raise InputError("--trials must be positive")
    cfg = _refine_config(opts)
    out = _out_dir(opts)
    rep = sensitivity_sweep(opts["shapes"], levels, int(opts["trials"]), cfg, int(opts["seed"]),
                            int(opts["size"]), int(opts["workers"]), bool(opts["refine"]))
    atomic_write_text(out / "report.csv", rep.to_csv())
    atomic_write_text(out / "trials.csv", rep.trials_csv())
    atomic_write_text(out / "report.json", rep.to_json() + "\n")
    write_json(out / "manifest.json", {"kind": "sweep", "report_csv": "report.csv",
                                       "trials_csv": "trials.csv", "report_json": "report.json",
                                       "cells": len(rep.cells), "trials": len(rep.trials)})
    return {"cells": len(rep.cells), "trials": len(rep.trials)}


# eval ----------------------------------------------------------------------


def _pose_list(path) -> list:
    data = read_json(path)
    if isinstance(data, dict) and "poses" in data:
        data = data["poses"]
    if isinstance(data, dict):
        data = [data]
    return [RigidPose.from_json(d) for d in data]


def cmd_eval(opts) -> dict:
    from .fileio import atomic_write_text

    if not (opts["gt"] and opts["est"]):
        raise InputError("--gt and --est are required")
    gt, est = _pose_list(opts["gt"]), _pose_list(opts["est"])
    if len(gt) != len(est):
        raise InputError("--gt and --est hold different numbers of poses")
    if not gt:
        raise InputError("no poses to evaluate")
    mesh = _mesh_from(opts)
    out = _out_dir(opts)
    lines = ["index,add_mm,adi_mm,correct"]
    rows = []
    for i, (a, b) in enumerate(zip(gt, est)):
        r = evaluate_pose(mesh, a, b, bool(opts["symmetric"]), float(opts["fraction"]))
        if r.adi_mm > r.add_mm + 1e-9:
            raise InvariantError("ADI exceeded ADD")
        rows.append(r)
        lines.append(f"{i},{r.add_mm!r},{r.adi_mm!r},{int(r.correct)}")
    recall = float(np.mean([r.correct for r in rows]))
    atomic_write_text(out / "eval.csv", "\n".join(lines) + "\n")
    summary = {"n": len(rows), "recall": recall, "symmetric": bool(opts["symmetric"]),
               "fraction": float(opts["fraction"]), "diameter_mm": rows[0].diameter_mm,
               "mean_add_mm": float(np.mean([r.add_mm for r in rows])),
               "mean_adi_mm": float(np.mean([r.adi_mm for r in rows]))}
    write_json(out / "eval.json", summary)
    return summary


COMMANDS = {"gen-scene": cmd_gen_scene, "render": cmd_render, "sample": cmd_sample,
            "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args.command, args)
        result = COMMANDS[args.command](opts)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OSError, ValueError, KeyError) as exc:
        # library functions reject malformed inputs with ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    sys.stdout.write(dumps_json(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
