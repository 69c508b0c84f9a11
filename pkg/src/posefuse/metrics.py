"""Pose-error scores, masked image-quality metrics and the pose-noise sensitivity sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import RigidPose, TriangleMesh

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 8
CORRECT_FRACTION = 0.1


def add_score(mesh: TriangleMesh, pose_gt: RigidPose, pose_est: RigidPose) -> float:
    """Mean distance between corresponding transformed vertices, in millimeters."""
    a = pose_gt.apply(mesh.vertices)
    b = pose_est.apply(mesh.vertices)
    return float(np.linalg.norm(a - b, axis=1).mean() * 1000.0)


def adi_score(mesh: TriangleMesh, pose_gt: RigidPose, pose_est: RigidPose,
              chunk: int = 2048) -> float:
    """Mean distance from each ground-truth vertex to the nearest estimated vertex, in mm."""
    a = pose_gt.apply(mesh.vertices)
    b = pose_est.apply(mesh.vertices)
    b_sq = (b * b).sum(axis=1)
    nearest = np.empty(len(a))
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = (blk * blk).sum(axis=1)[:, None] - 2.0 * blk @ b.T + b_sq[None]
        k = d2.argmin(axis=1)
        # recompute the winners directly to avoid cancellation error
        nearest[s:s + chunk] = np.linalg.norm(blk - b[k], axis=1)
    return float(nearest.mean() * 1000.0)


def pose_correct(score_mm: float, diameter_mm: float, fraction: float = CORRECT_FRACTION) -> bool:
    """Strictly below ``fraction`` of the diameter."""
    if not diameter_mm > 0:
        raise ValueError("diameter must be positive")
    return bool(score_mm < fraction * diameter_mm)


@dataclass(frozen=True)
class PoseEvalResult:
    add_mm: float
    adi_mm: float
    correct: bool
    diameter_mm: float
    threshold_fraction: float = CORRECT_FRACTION


def evaluate_pose(mesh: TriangleMesh, pose_gt: RigidPose, pose_est: RigidPose,
                  symmetric: bool = False, fraction: float = CORRECT_FRACTION) -> PoseEvalResult:
    """ADD and ADI; correctness uses ADI for symmetric objects and ADD otherwise."""
    add = add_score(mesh, pose_gt, pose_est)
    adi = min(adi_score(mesh, pose_gt, pose_est), add)
    diam = mesh.diameter * 1000.0
    return PoseEvalResult(add, adi, pose_correct(adi if symmetric else add, diam, fraction),
                          diam, fraction)


class ImageMetrics(NamedTuple):
    l1: float
    psnr: float
    ssim: float


def _ssim_map(a: np.ndarray, b: np.ndarray, win: int) -> np.ndarray:
    from scipy import ndimage

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    f = lambda x: ndimage.uniform_filter(x, size=win, mode="reflect")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) *
                                                        (var_a + var_b + c2))


def image_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> ImageMetrics:
    """Masked L1, PSNR (capped at 99 dB) and SSIM over 8x8 windows touching the mask.

    Images are in [0, 1]. SSIM uses a sliding 8x8 box window per channel and
    averages the map over pixels whose window intersects the mask.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt differ in shape")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError("mask does not match image size")
    if not mask.any():
        raise ValueError("empty mask")
    diff = pred - gt
    if diff.ndim == 2:
        diff = diff[..., None]
        pred, gt = pred[..., None], gt[..., None]
    l1 = float(np.abs(diff[mask]).mean())
    mse = float((diff[mask] ** 2).mean())
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))

    from scipy import ndimage

    touch = ndimage.maximum_filter(mask.astype(np.uint8), size=SSIM_WINDOW) > 0
    smap = np.mean([_ssim_map(pred[..., c], gt[..., c], SSIM_WINDOW)
                    for c in range(pred.shape[-1])], axis=0)
    return ImageMetrics(l1, psnr, float(smap[touch].mean()))


# sensitivity sweep ---------------------------------------------------------

DEFAULT_TRANS_LEVELS = (0.0, 0.0025, 0.005, 0.0075, 0.01)
DEFAULT_ROT_LEVELS = (0.0, 0.0125, 0.025, 0.0375, 0.05)
METRIC_NAMES = ("l1", "psnr", "ssim")
REPORT_COLUMNS = ("shape", "trans_err", "rot_err", "metric", "refined_mean", "refined_std",
                  "unrefined_mean", "unrefined_std", "n")
TRIAL_COLUMNS = ("shape", "trans_err", "rot_err", "trial", "seed", "l1_refined",
                 "l1_unrefined", "psnr_refined", "psnr_unrefined", "ssim_refined",
                 "ssim_unrefined")


class TrialOutcome(NamedTuple):
    shape: str
    trans_err: float
    rot_err: float
    trial: int
    seed: int
    refined: ImageMetrics
    unrefined: ImageMetrics


def trial_seed(base_seed: int, shape: str, level_index: int, trial: int) -> int:
    """Seed of one trial; same for every shape so both shapes see matching scenes."""
    del shape, level_index
    return int(base_seed) * 100_003 + int(trial)


def run_trial(job) -> TrialOutcome:
    """Render one seeded trial with and without refinement and score both against ground truth."""
    from .raster import SourceView
    from .refine import RefineConfig, render_nol
    from .scenegen import make_trial_set

    shape, t_err, r_err, trial, seed, size, cfg, refine = job
    cfg = cfg or RefineConfig()
    ts = make_trial_set(shape, trans_err_max=t_err, rot_err_max=r_err, seed=seed, size=size)
    views = [SourceView(s.image, s.mask, s.perturbed_pose) for s in ts.sources]
    res = render_nol(views, ts.mesh, ts.camera, ts.target_pose, cfg, refine=refine)
    unref = image_metrics(res.initial.rendering, ts.target_image, ts.target_mask)
    ref = image_metrics(res.final.rendering, ts.target_image, ts.target_mask)
    return TrialOutcome(shape, t_err, r_err, trial, seed, ref, unref)


def map_jobs(fn, jobs: list, workers: int = 1) -> list:
    """Ordered map, in-process for one worker and over processes otherwise."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=1))


@dataclass
class SweepCell:
    shape: str
    trans_err: float
    rot_err: float
    n: int
    seeds: list
    refined: dict
    unrefined: dict


@dataclass
class SweepReport:
    cells: list
    trials: list = field(default_factory=list)

    def cell(self, shape: str, trans_err: float, rot_err: float) -> SweepCell:
        for c in self.cells:
            if c.shape == shape and c.trans_err == trans_err and c.rot_err == rot_err:
                return c
        raise KeyError((shape, trans_err, rot_err))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in self.cells:
            for m in METRIC_NAMES:
                w.writerow([c.shape, repr(c.trans_err), repr(c.rot_err), m,
                            repr(c.refined[m][0]), repr(c.refined[m][1]),
                            repr(c.unrefined[m][0]), repr(c.unrefined[m][1]), c.n])
        return buf.getvalue()

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for t in self.trials:
            w.writerow([t.shape, repr(t.trans_err), repr(t.rot_err), t.trial, t.seed,
                        repr(t.refined.l1), repr(t.unrefined.l1), repr(t.refined.psnr),
                        repr(t.unrefined.psnr), repr(t.refined.ssim), repr(t.unrefined.ssim)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"cells": [asdict(c) for c in self.cells]}, indent=2, sort_keys=True)


def _summary(values: Sequence[float]) -> list:
    arr = np.asarray(values, dtype=np.float64)
    return [float(arr.mean()), float(arr.std())]


def sensitivity_sweep(shapes: Sequence[str] = ("box", "cylinder"), error_levels=None,
                      trials: int = 50, cfg=None, seed: int = 0, size: int = 128,
                      workers: int = 1, refine: bool = True) -> SweepReport:
    """Render seeded trials per (shape, error level) with and without refinement.

    ``error_levels`` is a sequence of ``(trans_err_m, rot_err_rad)`` pairs;
    the default is the full 5 x 5 grid of translation and rotation levels.
    Results do not depend on ``workers``.
    """
    if error_levels is None:
        error_levels = [(t, r) for t in DEFAULT_TRANS_LEVELS for r in DEFAULT_ROT_LEVELS]
    error_levels = [(float(t), float(r)) for t, r in error_levels]
    if not error_levels:
        raise ValueError("error_levels must not be empty")
    if trials < 1:
        raise ValueError("trials must be positive")
    jobs = []
    for shape in shapes:
        for li, (t, r) in enumerate(error_levels):
            for i in range(trials):
                jobs.append((shape, t, r, i, trial_seed(seed, shape, li, i), size, cfg, refine))
    outcomes = map_jobs(run_trial, jobs, workers)

    cells = []
    for shape in shapes:
        for t, r in error_levels:
            rows = [o for o in outcomes if o.shape == shape and o.trans_err == t and o.rot_err == r]
            cells.append(SweepCell(
                shape, t, r, len(rows), [o.seed for o in rows],
                {m: _summary([getattr(o.refined, m) for o in rows]) for m in METRIC_NAMES},
                {m: _summary([getattr(o.unrefined, m) for o in rows]) for m in METRIC_NAMES}))
    return SweepReport(cells, outcomes)


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy import stats

    return float(stats.spearmanr(x, y).statistic)
