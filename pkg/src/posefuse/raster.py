"""Z-buffer rasterization, 17-channel feature encoding and view reprojection.

A source view is reprojected to a target pose by rasterizing the mesh at the
target pose, lifting every covered pixel to its model-space surface point,
projecting that point into the source view and sampling the source feature
map bilinearly there. Gradients of the sampled values with respect to the
source pose flow only through the sampling position.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .geometry import (EPSILON_VIS, EPSILON_Z, Camera, PoseDelta, RigidPose,
                       TriangleMesh, face_view_angles)

N_FEATURES = 17
N_PYRAMID = 13
# (downsampling factor, channel count) per pyramid level
PYRAMID_LEVELS = ((1, 4), (2, 3), (4, 3), (8, 3))
# normal turn (degrees) above which a shared edge counts as a crease
CREASE_DEG = 30.0
ANGLE_SUPERSAMPLE = 3


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray      # (H, W, C)
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if vals.ndim != 3 or mask.shape != vals.shape[:2]:
            raise ValueError("values must be HxWxC and valid_mask HxW")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class FragmentBuffer:
    face_id: np.ndarray      # (H, W) int, -1 where uncovered
    barycentric: np.ndarray  # (H, W, 3) perspective-correct weights
    depth: np.ndarray        # (H, W) camera z, +inf where uncovered

    @property
    def coverage(self) -> np.ndarray:
        return self.face_id >= 0


@dataclass(frozen=True)
class SourceView:
    image: np.ndarray       # (H, W, 3) in [0, 1]
    mask: np.ndarray        # (H, W) bool
    pose: RigidPose
    features: FeatureMap = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if img.ndim != 3 or img.shape[2] != 3 or mask.shape != img.shape[:2]:
            raise ValueError("image must be HxWx3 with an HxW mask")
        if self.features is not None and self.features.values.shape[:2] != mask.shape:
            raise ValueError("features and image differ in size")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", mask)

    def with_pose(self, pose: RigidPose) -> "SourceView":
        """Same observation under another pose annotation; features are kept."""
        return replace(self, pose=pose)


@dataclass(frozen=True)
class ProjectedMap:
    features: FeatureMap
    valid_mask: np.ndarray
    source_index: int = 0
    # target pixels away from silhouette and occlusion edges
    interior: np.ndarray = None


class TargetSurface(NamedTuple):
    """Covered pixels of a target rendering lifted back to model space."""

    fragments: FragmentBuffer
    rows: np.ndarray
    cols: np.ndarray
    points: np.ndarray      # (N, 3) model-frame surface points
    interior: np.ndarray    # (H, W) bool


def rasterize(mesh: TriangleMesh, pose: RigidPose, camera: Camera) -> FragmentBuffer:
    """Depth-tested rasterization with perspective-correct barycentrics.

    Pixel centers inside a triangle (edge functions >= 0) are covered; the
    nearest face wins and exact depth ties go to the lower face index. Faces
    with any vertex at or behind the camera plane are culled whole.
    """
    h, w = camera.height, camera.width
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)

    p = pose.apply(mesh.vertices)
    z = p[:, 2]
    safe_z = np.where(z > EPSILON_Z, z, 1.0)
    xs = camera.fx * p[:, 0] / safe_z + camera.cx
    ys = camera.fy * p[:, 1] / safe_z + camera.cy

    faces = mesh.faces
    keep = np.all(z[faces] > EPSILON_Z, axis=1)
    fx_ = xs[faces]
    fy_ = ys[faces]
    fz = z[faces]
    x_lo = np.maximum(np.ceil(fx_.min(axis=1)), 0).astype(np.int64)
    x_hi = np.minimum(np.floor(fx_.max(axis=1)), w - 1).astype(np.int64)
    y_lo = np.maximum(np.ceil(fy_.min(axis=1)), 0).astype(np.int64)
    y_hi = np.minimum(np.floor(fy_.max(axis=1)), h - 1).astype(np.int64)
    area = ((fx_[:, 1] - fx_[:, 0]) * (fy_[:, 2] - fy_[:, 0])
            - (fx_[:, 2] - fx_[:, 0]) * (fy_[:, 1] - fy_[:, 0]))
    keep &= (x_lo <= x_hi) & (y_lo <= y_hi) & (np.abs(area) > 1e-12)

    for f in np.nonzero(keep)[0]:
        (x0, x1, x2), (y0, y1, y2) = fx_[f], fy_[f]
        py, px = np.mgrid[y_lo[f]:y_hi[f] + 1, x_lo[f]:x_hi[f] + 1].astype(np.float64)
        inv_area = 1.0 / area[f]
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        iz = fz[f]
        q0, q1, q2 = l0 / iz[0], l1 / iz[1], l2 / iz[2]
        s = q0 + q1 + q2
        d = np.divide(1.0, s, out=np.full_like(s, np.inf), where=inside)
        win = (slice(y_lo[f], y_hi[f] + 1), slice(x_lo[f], x_hi[f] + 1))
        upd = inside & (d < depth[win])
        if not upd.any():
            continue
        depth[win][upd] = d[upd]
        face_id[win][upd] = f
        bary[win][upd] = np.stack([q0[upd], q1[upd], q2[upd]], axis=1) / s[upd, None]
    return FragmentBuffer(face_id, bary, depth)


def _shift(a, dy, dx, fill):
    out = np.full_like(a, fill)
    h, w = a.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def interior_mask(fragments: FragmentBuffer, mesh: TriangleMesh,
                  crease_deg: float = CREASE_DEG) -> np.ndarray:
    """Covered pixels whose 8 neighbours lie on the same smooth surface patch.

    A neighbour breaks interiority when it is uncovered (silhouette), shows a
    face sharing no vertex with the pixel's face (occlusion edge), or a face
    whose normal turns by more than ``crease_deg`` (crease). Seams between
    nearly coplanar triangles are not boundaries.
    """
    fid = fragments.face_id
    cov = fid >= 0
    safe = np.maximum(fid, 0)
    tri = np.where(cov[..., None], mesh.faces[safe], -1)
    normals = mesh.face_normals
    cos_lim = np.cos(np.radians(crease_deg))
    result = cov.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb_fid = _shift(fid, dy, dx, -1)
            nb_safe = np.maximum(nb_fid, 0)
            nb_tri = np.where((nb_fid >= 0)[..., None], mesh.faces[nb_safe], -2)
            same = nb_fid == fid
            shares = (tri[..., :, None] == nb_tri[..., None, :]).any(axis=(-1, -2))
            smooth = (normals[safe] * normals[nb_safe]).sum(axis=-1) >= cos_lim
            result &= (nb_fid >= 0) & (same | (shares & smooth))
    return result


def target_surface(mesh: TriangleMesh, pose: RigidPose, camera: Camera) -> TargetSurface:
    frags = rasterize(mesh, pose, camera)
    rows, cols = np.nonzero(frags.coverage)
    fids = frags.face_id[rows, cols]
    b = frags.barycentric[rows, cols]
    tri = mesh.vertices[mesh.faces[fids]]
    points = (b[:, :, None] * tri).sum(axis=1)
    return TargetSurface(frags, rows, cols, points, interior_mask(frags, mesh))


def _gaussian_gray(gray, factor):
    return ndimage.gaussian_filter(gray, sigma=0.5 * factor, mode="nearest")


def _downsample(img, factor):
    if factor == 1:
        return img
    h, w = img.shape
    ph, pw = -h % factor, -w % factor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hh, ww = img.shape
    return img.reshape(hh // factor, factor, ww // factor, factor).mean(axis=(1, 3))


def _upsample(coarse, factor, h, w):
    if factor == 1:
        return coarse
    off = (factor - 1) / 2.0
    yy = (np.arange(h) - off) / factor
    xx = (np.arange(w) - off) / factor
    gy, gx = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(coarse, [gy, gx], order=1, mode="nearest")


def _gradient(level):
    # an axis with a single sample has no derivative; call it flat
    gy = np.gradient(level, axis=0) if level.shape[0] > 1 else np.zeros_like(level)
    gx = np.gradient(level, axis=1) if level.shape[1] > 1 else np.zeros_like(level)
    return gy, gx


def pyramid_features(image: np.ndarray) -> np.ndarray:
    """Fixed multi-scale descriptor with 4 + 3 + 3 + 3 channels.

    Every level holds the blurred intensity and the absolute x and y
    derivatives at that scale; the finest level adds the full gradient
    magnitude. Coarse levels are bilinearly upsampled back to full size.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    out = []
    for factor, n in PYRAMID_LEVELS:
        level = _downsample(_gaussian_gray(gray, factor), factor)
        gy, gx = _gradient(level)
        chans = [level, np.abs(gx), np.abs(gy)]
        if n == 4:
            chans.append(np.hypot(gx, gy))
        out.extend(_upsample(c, factor, h, w) for c in chans)
    return np.stack(out, axis=2)


def _supersampled_camera(camera: Camera, s: int) -> Camera:
    return Camera(camera.fx * s, camera.fy * s, (camera.cx + 0.5) * s - 0.5,
                  (camera.cy + 0.5) * s - 0.5, camera.width * s, camera.height * s)


def face_angle_map(mesh: TriangleMesh, pose: RigidPose, camera: Camera,
                   supersample: int = ANGLE_SUPERSAMPLE) -> np.ndarray:
    """Per-pixel face cosine toward the camera, 0 off the object.

    Values are averaged over ``supersample**2`` samples per pixel, like a
    sensor integrating over the pixel area.
    """
    s = max(int(supersample), 1)
    cam = _supersampled_camera(camera, s) if s > 1 else camera
    fid = rasterize(mesh, pose, cam).face_id
    cosines = face_view_angles(mesh, pose, camera)
    fine = np.where(fid >= 0, cosines[np.maximum(fid, 0)], 0.0)
    if s == 1:
        return fine
    return fine.reshape(camera.height, s, camera.width, s).mean(axis=(1, 3))


def encode_features(view: SourceView, mesh: TriangleMesh, camera: Camera) -> FeatureMap:
    """Color (3) + face angle at the annotated pose (1) + pyramid (13)."""
    img = view.image
    angles = face_angle_map(mesh, view.pose, camera)
    values = np.concatenate([img, angles[..., None], pyramid_features(img)], axis=2)
    return FeatureMap(values, np.ones(img.shape[:2], dtype=bool))


def with_features(view: SourceView, mesh: TriangleMesh, camera: Camera) -> SourceView:
    if view.features is not None:
        return view
    return replace(view, features=encode_features(view, mesh, camera))


class _Sample(NamedTuple):
    values: np.ndarray   # (N, C)
    valid: np.ndarray    # (N,)
    cam_points: np.ndarray
    uv: np.ndarray
    d_du: np.ndarray     # (N, C)
    d_dv: np.ndarray     # (N, C)


def _bilinear(values, u, v, with_derivative=False):
    h, w, _ = values.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), np.int64)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (u - x0)[:, None]
    ay = (v - y0)[:, None]
    f00 = values[y0, x0]
    f01 = values[y0, x1]
    f10 = values[y1, x0]
    f11 = values[y1, x1]
    top = f00 + ax * (f01 - f00)
    bot = f10 + ax * (f11 - f10)
    out = top + ay * (bot - top)
    if not with_derivative:
        return out, (y0, x0, y1, x1)
    d_du = (1.0 - ay) * (f01 - f00) + ay * (f11 - f10)
    d_dv = bot - top
    return out, (y0, x0, y1, x1), d_du, d_dv


def _sample_source(view: SourceView, camera: Camera, pose: RigidPose, points: np.ndarray,
                   source_depth: np.ndarray, epsilon: float = EPSILON_VIS,
                   with_derivative: bool = False) -> _Sample:
    feats = view.features.values
    h, w = camera.height, camera.width
    p = pose.apply(points)
    z = p[:, 2]
    ok = z > EPSILON_Z
    safe_z = np.where(ok, z, 1.0)
    u = camera.fx * p[:, 0] / safe_z + camera.cx
    v = camera.fy * p[:, 1] / safe_z + camera.cy
    ok &= (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    res = _bilinear(feats, u, v, with_derivative)
    vals, (y0, x0, y1, x1) = res[0], res[1]
    m = view.mask
    ok &= m[y0, x0] & m[y0, x1] & m[y1, x0] & m[y1, x1]
    ri = np.clip(np.rint(v), 0, h - 1).astype(np.int64)
    ci = np.clip(np.rint(u), 0, w - 1).astype(np.int64)
    ok &= z <= source_depth[ri, ci] + epsilon
    d_du = res[2] if with_derivative else None
    d_dv = res[3] if with_derivative else None
    return _Sample(vals, ok, p, np.stack([u, v], axis=1), d_du, d_dv)


def project_view(view: SourceView, mesh: TriangleMesh, camera: Camera, target_pose: RigidPose,
                 source_index: int = 0, surface: TargetSurface = None,
                 epsilon: float = EPSILON_VIS) -> ProjectedMap:
    """Re-render ``view``'s features at ``target_pose``.

    A target pixel is valid when its surface point projects into the source
    image with all four bilinear taps inside the source mask and is not
    occluded in the source view (depth test against a source-pose depth
    buffer, tolerance ``epsilon``). Invalid pixels hold zeros.
    """
    view = with_features(view, mesh, camera)
    if surface is None:
        surface = target_surface(mesh, target_pose, camera)
    src_depth = rasterize(mesh, view.pose, camera).depth
    s = _sample_source(view, camera, view.pose, surface.points, src_depth, epsilon)
    c = view.features.channels
    values = np.zeros((camera.height, camera.width, c))
    valid = np.zeros(camera.shape, dtype=bool)
    r, cc = surface.rows[s.valid], surface.cols[s.valid]
    values[r, cc] = s.values[s.valid]
    valid[r, cc] = True
    return ProjectedMap(FeatureMap(values, valid), valid, source_index, surface.interior)


def pose_gradient(view: SourceView, mesh: TriangleMesh, camera: Camera, target_pose: RigidPose,
                  residual: FeatureMap, surface: TargetSurface = None,
                  epsilon: float = EPSILON_VIS) -> PoseDelta:
    """Chain-rule gradient of ``sum(residual * P)`` w.r.t. the source pose.

    ``residual`` holds dE/dP per pixel and channel (zero where unused). Only
    interior target pixels that are valid under the current source pose
    contribute. Rotation derivatives are taken w.r.t. a local Euler offset
    ``euler_to_rotation(e) @ R`` at ``e = 0``, matching :func:`apply_delta`.
    The returned delta has ``starved=True`` when no pixel contributes.
    """
    view = with_features(view, mesh, camera)
    if surface is None:
        surface = target_surface(mesh, target_pose, camera)
    src_depth = rasterize(mesh, view.pose, camera).depth
    res = residual.values[surface.rows, surface.cols]
    use = residual.valid_mask[surface.rows, surface.cols] & surface.interior[surface.rows, surface.cols]
    use &= np.any(res != 0, axis=1)
    if not use.any():
        return PoseDelta.zero(starved=True)
    pts = surface.points[use]
    s = _sample_source(view, camera, view.pose, pts, src_depth, epsilon, with_derivative=True)
    keep = s.valid
    if not keep.any():
        return PoseDelta.zero(starved=True)
    r = res[use][keep]
    g_u = (r * s.d_du[keep]).sum(axis=1)
    g_v = (r * s.d_dv[keep]).sum(axis=1)
    p = s.cam_points[keep]
    iz = 1.0 / p[:, 2]
    x, y = p[:, 0] * iz, p[:, 1] * iz
    dp = np.stack([g_u * camera.fx * iz,
                   g_v * camera.fy * iz,
                   -(g_u * camera.fx * x + g_v * camera.fy * y) * iz], axis=1)
    q = p - view.pose.translation
    d_t = dp.sum(axis=0)
    d_e = np.cross(q, dp).sum(axis=0)
    return PoseDelta(d_t, d_e)


def sample_at_pose(view: SourceView, mesh: TriangleMesh, camera: Camera, pose: RigidPose,
                   points: np.ndarray, epsilon: float = EPSILON_VIS):
    """Sampled features and validity of model points under an arbitrary source pose."""
    view = with_features(view, mesh, camera)
    src_depth = rasterize(mesh, pose, camera).depth
    s = _sample_source(view, camera, pose, points, src_depth, epsilon)
    return s.values, s.valid


def dump_feature_map(fmap: FeatureMap, path) -> None:
    """Little-endian float32 dump with a ``(H, W, C)`` uint32 header."""
    h, w, c = fmap.values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(fmap.values, dtype="<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        h, w, c = struct.unpack("<III", fh.read(12))
        vals = np.frombuffer(fh.read(), dtype="<f4").reshape(h, w, c)
    return FeatureMap(vals.astype(np.float64), np.ones((h, w), dtype=bool))
