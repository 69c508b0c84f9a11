"""Gradient-based correction of source poses and the full render pipeline.

Each source pose is refined independently against the frozen first-pass
fusion ``X^S``. Translation is stepped directly; rotation is stepped in
Euler angles of a local offset and converted back to a rotation matrix.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .fusion import DEFAULT_TEMPERATURE, FusionResult, fuse
from .geometry import EPSILON_VIS, Camera, PoseDelta, RigidPose, TriangleMesh, apply_delta
from .raster import (FeatureMap, ProjectedMap, SourceView, TargetSurface, pose_gradient,
                     project_view, sample_at_pose, target_surface, with_features)

log = logging.getLogger(__name__)

MIN_PIXELS = 32


@dataclass(frozen=True)
class RefineConfig:
    """Step ``delta`` multiplies the per-block step sizes (meters, radians).

    Each iteration moves translation by ``delta * trans_step`` and rotation by
    ``delta * rot_step`` along the unit-normalized negative gradient block.
    """

    step_delta: float = 1.0
    max_iters: int = 50
    patience: int = 1
    trans_step: float = 1e-3
    rot_step: float = math.radians(0.2)
    temperature: float = DEFAULT_TEMPERATURE
    epsilon_vis: float = EPSILON_VIS

    def __post_init__(self):
        if not self.step_delta > 0:
            raise ValueError("step_delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class RefineTrace:
    errors: list
    final_pose: RigidPose
    iterations_run: int
    stop_reason: str
    poses: list = field(default_factory=list)

    def to_json(self, include_poses: bool = False) -> dict:
        out = {"errors": [float(e) for e in self.errors],
               "iterations_run": self.iterations_run,
               "stop_reason": self.stop_reason,
               "final_pose": self.final_pose.to_json()}
        if include_poses:
            out["poses"] = [p.to_json() for p in self.poses]
        return out

    def dumps(self, include_poses: bool = False) -> str:
        return json.dumps(self.to_json(include_poses), indent=2, sort_keys=True)


class ProjectionError(NamedTuple):
    value: float
    count: int
    starved: bool


def _region(p: ProjectedMap, reference: FeatureMap, mask) -> np.ndarray:
    region = p.valid_mask & reference.valid_mask
    if mask is not None:
        region = region & np.asarray(mask, dtype=bool)
    if p.interior is not None:
        region = region & p.interior
    return region


def projection_error(p: ProjectedMap, reference: FeatureMap, mask=None) -> ProjectionError:
    """Mean over usable pixels of the channel-mean absolute difference.

    Usable pixels are valid in ``p`` and ``reference``, inside ``mask`` and
    interior. Fewer than 32 of them flag the result as starved; none at all
    gives an infinite error.
    """
    region = _region(p, reference, mask)
    n = int(region.sum())
    if n == 0:
        return ProjectionError(math.inf, 0, True)
    diff = np.abs(p.features.values[region] - reference.values[region]).mean(axis=1)
    return ProjectionError(float(diff.mean()), n, n < MIN_PIXELS)


def error_residual(p: ProjectedMap, reference: FeatureMap, mask=None) -> FeatureMap:
    """dE/dP of :func:`projection_error`: ``sign(P - ref) / (N * C)`` on usable pixels."""
    region = _region(p, reference, mask)
    n = int(region.sum())
    vals = np.zeros_like(p.features.values)
    if n:
        c = vals.shape[-1]
        vals[region] = np.sign(p.features.values[region] - reference.values[region]) / (n * c)
    return FeatureMap(vals, region)


def _shared_errors(pa: ProjectedMap, pb: ProjectedMap, reference: FeatureMap, mask):
    """Projection errors of two maps over the pixels usable in both."""
    region = _region(pa, reference, mask) & _region(pb, reference, mask)
    if not region.any():
        return math.inf, math.inf
    ref = reference.values[region]
    return (float(np.abs(pa.features.values[region] - ref).mean()),
            float(np.abs(pb.features.values[region] - ref).mean()))


def _step(pose: RigidPose, grad: PoseDelta, cfg: RefineConfig) -> RigidPose:
    gt, ge = grad.d_translation, grad.d_euler
    nt, ne = np.linalg.norm(gt), np.linalg.norm(ge)
    dt = -cfg.step_delta * cfg.trans_step * gt / nt if nt > 0 else np.zeros(3)
    de = -cfg.step_delta * cfg.rot_step * ge / ne if ne > 0 else np.zeros(3)
    return apply_delta(pose, dt, de)


def refine_pose(view: SourceView, mesh: TriangleMesh, camera: Camera, target_pose: RigidPose,
                reference: FeatureMap, cfg: RefineConfig = RefineConfig(), mask=None,
                surface: TargetSurface = None, source_index: int = 0):
    """Descend the projection error of one view; returns ``(pose, trace)``.

    A step counts as a decrease only when the error drops both on its own
    usable region and on the pixels usable before and after the step, so a
    step cannot win by merely shedding badly matching pixels. The loop stops
    after ``patience`` consecutive steps without a decrease, at a zero
    gradient, or after ``max_iters`` steps, and always returns the best pose
    seen. A starved starting region returns the input pose.
    """
    view = with_features(view, mesh, camera)
    if surface is None:
        surface = target_surface(mesh, target_pose, camera)

    def evaluate(pose):
        pm = project_view(view.with_pose(pose), mesh, camera, target_pose, source_index,
                          surface, cfg.epsilon_vis)
        return pm, projection_error(pm, reference, mask)

    pose = view.pose
    pm, err = evaluate(pose)
    errors = [err.value]
    poses = [pose]
    if err.starved:
        return pose, RefineTrace(errors, pose, 0, "starved", poses)

    best_pose, best_err = pose, err.value
    fails = 0
    reason = "max_iters"
    it = 0
    while it < cfg.max_iters:
        grad = pose_gradient(view.with_pose(pose), mesh, camera, target_pose,
                             error_residual(pm, reference, mask), surface, cfg.epsilon_vis)
        if grad.starved or not np.any(grad.as_vector()):
            reason = "converged"
            break
        pose = _step(pose, grad, cfg)
        it += 1
        prev = pm
        pm, err = evaluate(pose)
        errors.append(err.value)
        poses.append(pose)
        before, after = _shared_errors(prev, pm, reference, mask)
        if err.value < best_err and after < before:
            best_pose, best_err = pose, err.value
            fails = 0
        else:
            fails += 1
            if fails >= cfg.patience:
                reason = "converged"
                break
    return best_pose, RefineTrace(errors, best_pose, it, reason, poses)


def finite_diff_gradient(view: SourceView, mesh: TriangleMesh, camera: Camera,
                         target_pose: RigidPose, reference: FeatureMap,
                         h_t: float = 1e-6, h_r: float = 1e-6, mask=None,
                         surface: TargetSurface = None) -> PoseDelta:
    """Central differences of the projection error over the six pose offsets.

    The pixel set is frozen at the unperturbed pose, so the difference
    quotient measures the same interior-pixel energy the analytic gradient
    differentiates. The energy has kinks wherever a sample crosses a texel
    edge or a residual changes sign, so steps are kept small (1 um, 1 urad).
    """
    if not (h_t > 0 and h_r > 0):
        raise ValueError("step sizes must be positive")
    view = with_features(view, mesh, camera)
    if surface is None:
        surface = target_surface(mesh, target_pose, camera)
    pm = project_view(view, mesh, camera, target_pose, 0, surface)
    region = _region(pm, reference, mask)
    if not region.any():
        return PoseDelta.zero(starved=True)
    rows, cols = np.nonzero(region)
    lookup = np.full(camera.shape, -1, dtype=np.int64)
    lookup[surface.rows, surface.cols] = np.arange(len(surface.rows))
    pts = surface.points[lookup[rows, cols]]
    ref = reference.values[rows, cols]

    def energy(pose):
        vals, _ = sample_at_pose(view, mesh, camera, pose, pts)
        return np.abs(vals - ref).mean()

    grad = np.zeros(6)
    for k in range(6):
        h = h_t if k < 3 else h_r
        off = np.zeros(6)
        off[k] = h
        plus = energy(apply_delta(view.pose, off[:3], off[3:]))
        minus = energy(apply_delta(view.pose, -off[:3], -off[3:]))
        grad[k] = (plus - minus) / (2 * h)
    return PoseDelta(grad[:3], grad[3:])


@dataclass
class RenderResult:
    rendering: np.ndarray
    poses: list
    traces: list
    initial: FusionResult
    final: FusionResult
    status: str = "ok"


def render_nol(views: Sequence[SourceView], mesh: TriangleMesh, camera: Camera,
               target_pose: RigidPose, cfg: RefineConfig = RefineConfig(),
               refine: bool = True) -> RenderResult:
    """Fuse, refine every source pose against the first fusion, fuse again."""
    if not 1 <= len(views) <= 8:
        raise ValueError("between 1 and 8 source views are supported")
    views = [with_features(v, mesh, camera) for v in views]
    surface = target_surface(mesh, target_pose, camera)
    projected = [project_view(v, mesh, camera, target_pose, k, surface, cfg.epsilon_vis)
                 for k, v in enumerate(views)]
    initial = fuse(projected, cfg.temperature)
    if not refine:
        return RenderResult(initial.rendering, [v.pose for v in views], [], initial, initial)

    poses, traces = [], []
    for k, v in enumerate(views):
        pose, trace = refine_pose(v, mesh, camera, target_pose, initial.weighted, cfg,
                                  initial.mask, surface, k)
        poses.append(pose)
        traces.append(trace)
    status = "ok"
    if all(t.stop_reason == "starved" for t in traces):
        log.warning("every view starved; returning the unrefined rendering")
        return RenderResult(initial.rendering, poses, traces, initial, initial, "starved")
    final_proj = [
        projected[k] if poses[k] is views[k].pose else
        project_view(views[k].with_pose(poses[k]), mesh, camera, target_pose, k, surface,
                     cfg.epsilon_vis)
        for k in range(len(views))
    ]
    final = fuse(final_proj, cfg.temperature)
    return RenderResult(final.rendering, poses, traces, initial, final, status)
