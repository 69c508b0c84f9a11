"""Meshes, cameras, rigid poses and the projective geometry shared by all modules.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (OpenCV style). A pose maps model
  coordinates into the camera frame, ``p_cam = R @ p_model + t``.
* Pixel centers sit at integer coordinates: pixel ``(row i, col j)`` is
  centered at ``(u, v) = (j, i)``.
* Euler angles are fixed-axis X, then Y, then Z: ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
* Lengths are meters unless a name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

EPSILON_Z = 1e-6
EPSILON_VIS = 3e-3
GIMBAL_TOL = 1e-6


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle mesh with welded vertices.

    Normals are recomputed from the faces when not given. The diameter is the
    exact maximum pairwise vertex distance.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray = None
    diameter: float = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0 or len(f) == 0:
            raise ValueError("mesh needs at least one vertex and one face")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

        if self.vertex_normals is None:
            n = _vertex_normals(v, f)
        else:
            n = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        n.setflags(write=False)
        object.__setattr__(self, "vertex_normals", n)

        if self.diameter is None:
            object.__setattr__(self, "diameter", _max_pairwise_distance(v))
        if not self.diameter > 0:
            raise ValueError("mesh diameter must be positive")

    @property
    def face_normals(self) -> np.ndarray:
        """Unit normals following the counter-clockwise winding of each face."""
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def face_centers(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)


def _vertex_normals(v, f):
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, f[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    # isolated vertices get an arbitrary unit normal
    n[norm[:, 0] == 0] = (0.0, 0.0, 1.0)
    norm[norm == 0] = 1.0
    return n / norm


def _max_pairwise_distance(v, chunk=1024):
    best = 0.0
    for start in range(0, len(v), chunk):
        block = v[start:start + chunk]
        d2 = ((block[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform from model coordinates to the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.rotation, tol)

    def to_json(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.ravel()],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_json(cls, obj: dict) -> "RigidPose":
        rot = obj["rotation"]
        trans = obj["translation"]
        if len(np.ravel(rot)) != 9 or len(np.ravel(trans)) != 3:
            raise ValueError("pose JSON needs 9 rotation and 3 translation numbers")
        return cls(np.reshape(rot, (3, 3)), trans)


class EulerAngles(NamedTuple):
    rx: float
    ry: float
    rz: float
    degenerate: bool = False


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "Camera":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                   int(obj["width"]), int(obj["height"]))


@dataclass(frozen=True)
class PoseDelta:
    """Derivative (or step) with respect to translation and local Euler angles."""

    d_translation: np.ndarray
    d_euler: np.ndarray
    # set when no pixel carried gradient signal
    starved: bool = False

    def __post_init__(self):
        dt = np.array(self.d_translation, dtype=np.float64).reshape(3)
        de = np.array(self.d_euler, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(dt)) and np.all(np.isfinite(de))):
            raise ValueError("pose delta must be finite")
        object.__setattr__(self, "d_translation", dt)
        object.__setattr__(self, "d_euler", de)

    @classmethod
    def zero(cls, starved: bool = False) -> "PoseDelta":
        return cls(np.zeros(3), np.zeros(3), starved)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_translation, self.d_euler])


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=np.float64)
    return (np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol)


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(e) -> np.ndarray:
    """Rotation matrix ``Rz(rz) @ Ry(ry) @ Rx(rx)`` for fixed-axis XYZ angles."""
    rx, ry, rz = float(e[0]), float(e[1]), float(e[2])
    if not all(map(math.isfinite, (rx, ry, rz))):
        raise ValueError("Euler angles must be finite")
    return _rz(rz) @ _ry(ry) @ _rx(rx)


def rotation_to_euler(r: np.ndarray) -> EulerAngles:
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (``ry = ±pi/2``) only ``rx ∓ rz`` is determined; ``rz`` is
    then set to 0 and the result carries ``degenerate=True``.
    """
    r = np.asarray(r, dtype=np.float64)
    s = -r[2, 0]
    s = min(1.0, max(-1.0, s))
    # cos(ry) from the two entries of the first column, more stable than sqrt(1 - s^2)
    c = math.hypot(r[0, 0], r[1, 0])
    ry = math.atan2(s, c)
    if abs(abs(ry) - math.pi / 2) <= GIMBAL_TOL or c < 1e-12:
        rz = 0.0
        if s > 0:
            rx = math.atan2(r[0, 1], r[1, 1])
        else:
            rx = math.atan2(-r[0, 1], r[1, 1])
        return EulerAngles(rx, ry, rz, True)
    rx = math.atan2(r[2, 1], r[2, 2])
    rz = math.atan2(r[1, 0], r[0, 0])
    return EulerAngles(rx, ry, rz, False)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def apply_delta(pose: RigidPose, d_translation, d_euler) -> RigidPose:
    """Offset a pose: ``t + d_translation`` and ``euler_to_rotation(d_euler) @ R``.

    The rotation offset is expressed in camera axes about the model origin,
    so the translation is untouched by a pure rotation step.
    """
    return RigidPose(euler_to_rotation(d_euler) @ pose.rotation,
                     pose.translation + np.asarray(d_translation, dtype=np.float64))


class Projection(NamedTuple):
    uv: np.ndarray      # (N, 2) pixel coordinates
    depth: np.ndarray   # (N,) camera-frame z
    valid: np.ndarray   # (N,) False for points at or behind the camera plane


def project(camera: Camera, pose: RigidPose, points: np.ndarray) -> Projection:
    """Pinhole projection of model-frame points.

    Points with camera depth ``<= EPSILON_Z`` are flagged invalid; their
    ``uv`` entries are NaN rather than a mirrored projection.
    """
    p = pose.apply(np.atleast_2d(points))
    z = p[:, 2]
    valid = z > EPSILON_Z
    safe_z = np.where(valid, z, 1.0)
    u = camera.fx * p[:, 0] / safe_z + camera.cx
    v = camera.fy * p[:, 1] / safe_z + camera.cy
    uv = np.stack([u, v], axis=1)
    uv[~valid] = np.nan
    return Projection(uv, z, valid)


def face_view_angles(mesh: TriangleMesh, pose: RigidPose, camera: Camera = None) -> np.ndarray:
    """Cosine between each face normal and the ray from the face to the camera.

    Positive for front-facing faces, 1 for a face seen head-on, 0 edge-on.
    The camera intrinsics do not enter; the argument is accepted for symmetry
    with the other per-view functions.
    """
    centers = pose.apply(mesh.face_centers)
    normals = mesh.face_normals @ pose.rotation.T
    to_cam = -centers
    to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
    return np.clip((normals * to_cam).sum(axis=1), -1.0, 1.0)


def visible_vertices(mesh: TriangleMesh, pose: RigidPose, camera: Camera,
                     epsilon: float = EPSILON_VIS, depth: np.ndarray = None) -> set:
    """Indices of mesh vertices not hidden by the mesh itself.

    A vertex counts as visible when it projects inside the image and its
    depth is at most ``epsilon`` behind the depth buffer at its nearest pixel.
    ``depth`` may pass a precomputed depth buffer for the same pose.
    """
    from .raster import rasterize

    proj = project(camera, pose, mesh.vertices)
    if depth is None:
        depth = rasterize(mesh, pose, camera).depth
    uv = np.nan_to_num(proj.uv, nan=-1.0)
    col = np.rint(uv[:, 0]).astype(np.int64)
    row = np.rint(uv[:, 1]).astype(np.int64)
    inside = proj.valid & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    idx = np.nonzero(inside)[0]
    zbuf = depth[row[idx], col[idx]]
    ok = proj.depth[idx] <= zbuf + epsilon
    return set(int(i) for i in idx[ok])


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    cos = (np.trace(r_a @ r_b.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def pose_distance(a: RigidPose, b: RigidPose) -> tuple:
    """``(translation_mm, rotation_deg)`` between two poses (geodesic rotation angle)."""
    trans = float(np.linalg.norm(a.translation - b.translation)) * 1000.0
    return trans, rotation_angle_deg(a.rotation, b.rotation)


def perturb_pose(pose: RigidPose, trans_range_m: float, rot_range_rad: float,
                 rng_seed=None) -> RigidPose:
    """Uniform pose noise: ``U(-r, r)`` per translation axis and per Euler angle."""
    if trans_range_m < 0 or rot_range_rad < 0:
        raise ValueError("perturbation ranges must be non-negative")
    rng = np.random.default_rng(rng_seed)
    dt = rng.uniform(-trans_range_m, trans_range_m, size=3)
    de = rng.uniform(-rot_range_rad, rot_range_rad, size=3)
    if trans_range_m == 0:
        dt[:] = 0.0
    if rot_range_rad == 0:
        return RigidPose(pose.rotation, pose.translation + dt)
    return apply_delta(pose, dt, de)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Pose of the model frame seen by a camera at ``eye`` aimed at ``target``.

    The image ``-y`` axis follows ``up`` as closely as possible. When the
    viewing direction is parallel to ``up`` the world x axis is used instead.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return RigidPose(rot, -rot @ eye)
