"""Source-frame selection, hemisphere pose grids and in-plane rotation variants."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import (Camera, RigidPose, TriangleMesh, euler_to_rotation, pose_distance,
                       visible_vertices)

log = logging.getLogger(__name__)

DIVERSITY_TRANS_MM = 300.0
DIVERSITY_ROT_DEG = 45.0
DIVERSITY_CAP = 16
INFERENCE_VIEWS = 6
INPLANE_ANGLES = (-45.0, 45.0, 15.0)


@dataclass(frozen=True)
class FrameRecord:
    """A candidate source frame and the mesh vertices it sees."""

    frame_id: int
    pose: RigidPose
    visible: frozenset = field(default_factory=frozenset)
    visibility_fraction: float = 0.0
    image_path: str = None
    mask_path: str = None

    @classmethod
    def from_pose(cls, frame_id: int, pose: RigidPose, mesh: TriangleMesh, camera: Camera,
                  **paths) -> "FrameRecord":
        vis = frozenset(visible_vertices(mesh, pose, camera))
        return cls(frame_id, pose, vis, len(vis) / len(mesh.vertices), **paths)

    def to_json(self) -> dict:
        out = {"id": self.frame_id, "pose": self.pose.to_json()}
        if self.image_path is not None:
            out["image"] = self.image_path
        if self.mask_path is not None:
            out["mask"] = self.mask_path
        return out


def _pair_similar(a: RigidPose, b: RigidPose, trans_mm: float, rot_deg: float) -> bool:
    t, r = pose_distance(a, b)
    return t < trans_mm and r < rot_deg


def diversity_sample(frames: Sequence[FrameRecord], trans_mm: float = DIVERSITY_TRANS_MM,
                     rot_deg: float = DIVERSITY_ROT_DEG, max_count: int = DIVERSITY_CAP,
                     rng_seed=0) -> list:
    """Random pick-then-prune selection of mutually dissimilar frames.

    A frame is pruned only when it is closer than ``trans_mm`` *and* closer
    than ``rot_deg`` to the frame just picked. Stops when the pool is empty
    or ``max_count`` frames were chosen.
    """
    if not frames:
        raise ValueError("no frames to sample from")
    rng = np.random.default_rng(rng_seed)
    pool = list(frames)
    chosen = []
    while pool and len(chosen) < max_count:
        pick = pool.pop(int(rng.integers(len(pool))))
        chosen.append(pick)
        pool = [f for f in pool if not _pair_similar(f.pose, pick.pose, trans_mm, rot_deg)]
    return chosen


def greedy_visibility_sample(frames: Sequence[FrameRecord], mesh: TriangleMesh = None,
                             camera: Camera = None, restrict_to=None) -> list:
    """Greedy max-coverage over visible-vertex sets.

    Each round takes the frame adding the most vertices not yet seen, the
    lower frame id winning ties, and stops when no frame adds anything.
    ``restrict_to`` limits the vertices that count. ``mesh`` and ``camera``
    fill in visibility for records that carry an empty set.
    """
    sets = []
    for f in frames:
        vis = f.visible
        if not vis and mesh is not None and camera is not None:
            vis = frozenset(visible_vertices(mesh, f.pose, camera))
        if restrict_to is not None:
            vis = vis & frozenset(restrict_to)
        sets.append(vis)
    order = sorted(range(len(frames)), key=lambda i: frames[i].frame_id)
    seen = set()
    chosen = []
    remaining = set(order)
    while remaining:
        best, gain = None, 0
        for i in order:
            if i not in remaining:
                continue
            g = len(sets[i] - seen)
            if g > gain:
                best, gain = i, g
        if best is None:
            break
        chosen.append(frames[best])
        seen |= sets[best]
        remaining.discard(best)
    return chosen


class Selection(NamedTuple):
    frames: list
    status: str


def select_views_for_target(target_pose: RigidPose, candidates: Sequence[FrameRecord],
                            mesh: TriangleMesh, camera: Camera,
                            k: int = INFERENCE_VIEWS) -> Selection:
    """Up to ``k`` frames chosen greedily for the vertices visible at ``target_pose``."""
    if not candidates:
        raise ValueError("no candidate frames")
    target_vis = visible_vertices(mesh, target_pose, camera)
    picked = greedy_visibility_sample(candidates, mesh, camera, restrict_to=target_vis)[:k]
    if not picked:
        log.warning("no candidate sees the target-visible surface")
        return Selection([], "no_overlap")
    return Selection(picked, "ok")


@dataclass(frozen=True)
class PoseGrid:
    az_step: float
    el_step: float
    radius: float
    poses: list
    angles: list

    def __len__(self):
        return len(self.poses)


def _divides(total: float, step: float) -> bool:
    q = total / step
    return step > 0 and abs(q - round(q)) < 1e-9


def hemisphere_pose(azimuth_deg: float, elevation_deg: float, radius: float) -> RigidPose:
    """Camera on the upper hemisphere looking at the origin.

    The image x axis is the horizontal tangent ``(-sin az, cos az, 0)``, which
    stays defined at the pole.
    """
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                             math.sin(el)])
    forward = -eye / radius
    right = np.array([-math.sin(az), math.cos(az), 0.0])
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return RigidPose(rot, -rot @ eye)


def hemisphere_poses(az_step_deg: float = 5.0, el_step_deg: float = 5.0,
                     radius: float = 0.6) -> PoseGrid:
    """Azimuths ``0, step, ..., 360 - step`` times elevations ``step, ..., 90``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if not (_divides(360.0, az_step_deg) and _divides(90.0, el_step_deg)):
        raise ValueError("steps must divide 360 and 90 degrees")
    n_az = int(round(360.0 / az_step_deg))
    n_el = int(round(90.0 / el_step_deg))
    poses, angles = [], []
    for j in range(1, n_el + 1):
        for i in range(n_az):
            az, el = i * az_step_deg, j * el_step_deg
            poses.append(hemisphere_pose(az, el, radius))
            angles.append((az, el))
    return PoseGrid(az_step_deg, el_step_deg, radius, poses, angles)


def inplane_angles(lo: float = INPLANE_ANGLES[0], hi: float = INPLANE_ANGLES[1],
                   step: float = INPLANE_ANGLES[2]) -> list:
    if not (step > 0 and hi >= lo and _divides(hi - lo, step)):
        raise ValueError("step must divide the angle range")
    n = int(round((hi - lo) / step))
    return [lo + i * step for i in range(n + 1)]


def roll_pose(pose: RigidPose, angle_deg: float) -> RigidPose:
    """Rotate the camera about its optical axis; positive turns the image clockwise."""
    if angle_deg == 0:
        return pose
    r = euler_to_rotation((0.0, 0.0, math.radians(angle_deg)))
    return RigidPose(r @ pose.rotation, r @ pose.translation)


def roll_image(image: np.ndarray, angle_deg: float, camera: Camera = None) -> np.ndarray:
    """Resample ``image`` as seen after :func:`roll_pose` by the same angle.

    Rotation is about the principal point (image center when ``camera`` is
    omitted) with bilinear sampling and zero fill.
    """
    from scipy import ndimage

    img = np.asarray(image)
    if angle_deg == 0:
        return img.copy()
    h, w = img.shape[:2]
    cx, cy = (camera.cx, camera.cy) if camera is not None else ((w - 1) / 2, (h - 1) / 2)
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map of a pure roll (square pixels assumed)
    x, y = cols - cx, rows - cy
    src_x = c * x + s * y + cx
    src_y = -s * x + c * y + cy
    order = 0 if img.dtype == bool else 1
    data = img.astype(np.float64)
    if data.ndim == 2:
        out = ndimage.map_coordinates(data, [src_y, src_x], order=order, cval=0.0)
    else:
        out = np.stack([ndimage.map_coordinates(data[..., k], [src_y, src_x], order=order,
                                                cval=0.0) for k in range(data.shape[2])], axis=2)
    return out > 0.5 if img.dtype == bool else out.astype(img.dtype, copy=False)


def inplane_rotations(item, lo: float = INPLANE_ANGLES[0], hi: float = INPLANE_ANGLES[1],
                      step: float = INPLANE_ANGLES[2], camera: Camera = None) -> list:
    """Rolled copies of a pose or an image, one per angle from ``lo`` to ``hi``."""
    angles = inplane_angles(lo, hi, step)
    if isinstance(item, RigidPose):
        return [roll_pose(item, a) for a in angles]
    return [roll_image(item, a, camera) for a in angles]


def load_frame_manifest(path) -> list:
    """Frames from a JSON manifest ``{"frames": [{"id", "pose", "image"?, "mask"?}]}``."""
    with open(path) as fh:
        data = json.load(fh)
    frames = data.get("frames", data) if isinstance(data, dict) else data
    return [FrameRecord(int(f["id"]), RigidPose.from_json(f["pose"]),
                        image_path=f.get("image"), mask_path=f.get("mask")) for f in frames]


def frames_to_manifest(frames: Sequence[FrameRecord]) -> dict:
    return {"frames": [f.to_json() for f in frames]}
