"""Seeded synthetic scenes with exact ground truth.

Primitive meshes get a deterministic surface parameterization: each face is
textured by a planar projection along its dominant normal axis, with the six
axis directions mapped to separate cells of the texture image. Shading is
Lambertian with a light fixed in the model frame, so a surface point has the
same color in every view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Camera, RigidPose, TriangleMesh, look_at, perturb_pose, visible_vertices
from .raster import CREASE_DEG, _supersampled_camera, rasterize

DEFAULT_LIGHT = (0.3, -0.4, 0.87)
AMBIENT = 0.35
# lens blur of rendered views, pixels
PSF_SIGMA = 0.5

# augmentation ranges (color in 8-bit units)
COLOR_ADD = (-15.0, 15.0)
CONTRAST = (0.8, 1.3)
MULTIPLY = (0.8, 1.2)
BLUR_SIGMA = (0.0, 0.5)
NOISE_STD = 10.0
# pose perturbation maxima
TRANS_ERR = 0.01
ROT_ERR = 0.05

# cracker box / soup can scale
BOX_DIMS = (0.16, 0.21, 0.06)
CYLINDER_DIMS = (0.04, 0.14)


def make_primitive(kind: str, dimensions=None, segments: int = 36,
                   subdivisions: int = 1) -> TriangleMesh:
    """Closed box or cylinder centered at the origin with outward winding.

    Box dimensions are ``(sx, sy, sz)``; each face is split into a
    ``subdivisions x subdivisions`` grid. Cylinder dimensions are
    ``(radius, height)`` with the axis along z.
    """
    if kind == "box":
        dims = BOX_DIMS if dimensions is None else dimensions
        return _box(np.asarray(dims, dtype=np.float64), subdivisions)
    if kind == "cylinder":
        dims = CYLINDER_DIMS if dimensions is None else dimensions
        if segments < 36:
            raise ValueError("cylinder needs at least 36 segments")
        return _cylinder(float(dims[0]), float(dims[1]), segments)
    raise ValueError(f"unknown primitive kind {kind!r}")


def _box(dims, n):
    if np.any(dims <= 0) or n < 1:
        raise ValueError("box dimensions and subdivisions must be positive")
    half = dims / 2.0
    verts = []
    faces = []
    index = {}

    def vid(p):
        key = tuple(np.round(p / dims * 2 * n).astype(int))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    g = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * half[axis]
                        p[a] = g[i + di] * half[a]
                        p[b] = g[j + dj] * half[b]
                        quad.append(vid(p))
                    # (a, b, axis) is right-handed, so this order faces +axis
                    if sign < 0:
                        quad = quad[::-1]
                    faces.append((quad[0], quad[1], quad[2]))
                    faces.append((quad[0], quad[2], quad[3]))
    return TriangleMesh(np.array(verts), np.array(faces))


def _cylinder(r, h, seg):
    if r <= 0 or h <= 0:
        raise ValueError("cylinder dimensions must be positive")
    ang = 2 * math.pi * np.arange(seg) / seg
    ring = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(seg, -h / 2)])
    top = np.column_stack([ring, np.full(seg, h / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -h / 2]], [[0, 0, h / 2]]])
    cb, ct = 2 * seg, 2 * seg + 1
    faces = []
    for i in range(seg):
        j = (i + 1) % seg
        faces.append((i, j, seg + j))
        faces.append((i, seg + j, seg + i))
        faces.append((cb, j, i))
        faces.append((ct, seg + i, seg + j))
    return TriangleMesh(verts, np.array(faces))


def _value_noise(rng, size, cell):
    n = int(math.ceil(size / cell)) + 2
    grid = rng.random((n, n, 3))
    coords = np.arange(size) / cell
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([ndimage.map_coordinates(grid[..., c], [gy, gx], order=3, mode="nearest")
                     for c in range(3)], axis=2)


def procedural_texture(seed, size: int = 256, octaves: int = 3) -> np.ndarray:
    """Multi-octave RGB value noise with rectangular glyph marks, values in [0, 1]."""
    if size < 64:
        raise ValueError("texture size must be at least 64")
    rng = np.random.default_rng(seed)
    tex = np.zeros((size, size, 3))
    amp_total = 0.0
    cell = size / 6.0
    amp = 1.0
    for _ in range(octaves):
        tex += amp * _value_noise(rng, size, cell)
        amp_total += amp
        amp *= 0.55
        cell /= 2.0
    tex /= amp_total
    # stretch contrast around the mean so noise is not washed out
    tex = 0.5 + 1.8 * (tex - tex.mean(axis=(0, 1)))
    for _ in range(rng.integers(12, 24)):
        gh = int(rng.integers(size // 40 + 2, size // 10 + 3))
        gw = int(rng.integers(size // 20 + 2, size // 5 + 3))
        y = int(rng.integers(0, size - gh))
        x = int(rng.integers(0, size - gw))
        tex[y:y + gh, x:x + gw] = rng.random(3)
    tex = ndimage.gaussian_filter(tex, sigma=(1.0, 1.0, 0.0), mode="nearest")
    return np.clip(tex, 0.0, 1.0)


def surface_uv(mesh: TriangleMesh, points: np.ndarray, face_ids: np.ndarray,
               tex_size: int) -> np.ndarray:
    """Texel coordinates ``(u, v)`` of surface points from a per-face planar mapping."""
    normals = mesh.face_normals[face_ids]
    axis = np.abs(normals).argmax(axis=1)
    sign = normals[np.arange(len(axis)), axis] > 0
    cell = axis * 2 + sign
    lo = mesh.vertices.min(axis=0)
    ext = mesh.vertices.max(axis=0) - lo
    rel = (points - lo) / ext
    a = rel[np.arange(len(axis)), (axis + 1) % 3]
    b = rel[np.arange(len(axis)), (axis + 2) % 3]
    cw, ch = tex_size / 3.0, tex_size / 2.0
    u = (cell % 3) * cw + np.clip(a, 0, 1) * (cw - 1)
    v = (cell // 3) * ch + np.clip(b, 0, 1) * (ch - 1)
    return np.stack([u, v], axis=1)


def corner_normals(mesh: TriangleMesh, crease_deg: float = CREASE_DEG) -> np.ndarray:
    """Auto-smoothed shading normals per face corner, shape ``(F, 3, 3)``.

    A corner averages the (area-weighted) normals of the faces around its
    vertex that turn by at most ``crease_deg`` from the corner's own face.
    """
    v, f = mesh.vertices, mesh.faces
    raw = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    unit = mesh.face_normals
    cos_lim = math.cos(math.radians(crease_deg))
    incident = [[] for _ in range(len(v))]
    for fi, tri in enumerate(f):
        for vi in tri:
            incident[vi].append(fi)
    out = np.empty((len(f), 3, 3))
    for fi, tri in enumerate(f):
        for k, vi in enumerate(tri):
            nb = np.asarray(incident[vi])
            nb = nb[unit[nb] @ unit[fi] >= cos_lim]
            n = raw[nb].sum(axis=0)
            out[fi, k] = n / np.linalg.norm(n)
    return out


def _shade(mesh, texture, frags, light_dir, shape, normals):
    img = np.zeros(shape + (3,))
    rows, cols = np.nonzero(frags.coverage)
    if len(rows):
        fids = frags.face_id[rows, cols]
        b = frags.barycentric[rows, cols]
        pts = (b[:, :, None] * mesh.vertices[mesh.faces[fids]]).sum(axis=1)
        uv = surface_uv(mesh, pts, fids, texture.shape[0])
        color = np.stack([ndimage.map_coordinates(texture[..., c], [uv[:, 1], uv[:, 0]],
                                                  order=1, mode="nearest")
                          for c in range(3)], axis=1)
        n = (b[:, :, None] * normals[fids]).sum(axis=1)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        light = np.asarray(light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = np.clip(n @ light, 0.0, 1.0)
        img[rows, cols] = color * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    return img


def render_gt_view(mesh: TriangleMesh, texture: np.ndarray, pose: RigidPose, camera: Camera,
                   light_dir=DEFAULT_LIGHT, supersample: int = 3, psf_sigma: float = PSF_SIGMA):
    """Texture-mapped, Lambert-shaded render on a black background.

    ``light_dir`` points from the surface toward the light, in model
    coordinates; shading normals are auto-smoothed (see
    :func:`corner_normals`). Colors average a ``supersample x supersample`` grid of
    samples per pixel (pixel-area integration) and are then blurred by a
    Gaussian lens PSF of ``psf_sigma`` pixels; the mask and depth are taken
    at pixel centers. Returns ``(image, mask, depth)``.
    """
    frags = rasterize(mesh, pose, camera)
    normals = corner_normals(mesh)
    s = int(supersample)
    if s <= 1:
        img = _shade(mesh, texture, frags, light_dir, camera.shape, normals)
    else:
        fine_cam = _supersampled_camera(camera, s)
        fine = _shade(mesh, texture, rasterize(mesh, pose, fine_cam), light_dir, fine_cam.shape,
                      normals)
        img = fine.reshape(camera.height, s, camera.width, s, 3).mean(axis=(1, 3))
    if psf_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(psf_sigma, psf_sigma, 0.0), mode="constant")
    return img, frags.coverage, frags.depth


@dataclass(frozen=True)
class AugmentParams:
    color_add: float = 0.0       # 8-bit units
    contrast: float = 1.0
    multiply: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0       # 8-bit units

    @classmethod
    def sample(cls, rng) -> "AugmentParams":
        rng = np.random.default_rng(rng)
        return cls(float(rng.uniform(*COLOR_ADD)), float(rng.uniform(*CONTRAST)),
                   float(rng.uniform(*MULTIPLY)), float(rng.uniform(*BLUR_SIGMA)), NOISE_STD)


def color_augment(image: np.ndarray, params: AugmentParams, seed=None) -> np.ndarray:
    """Add, contrast-normalize, multiply, blur and add Gaussian noise, then clamp to [0, 1]."""
    rng = np.random.default_rng(seed)
    x = np.asarray(image, dtype=np.float64) + params.color_add / 255.0
    if params.contrast != 1.0:
        mean = x.mean(axis=(0, 1), keepdims=True)
        x = mean + params.contrast * (x - mean)
    if params.multiply != 1.0:
        x = x * params.multiply
    if params.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(params.blur_sigma, params.blur_sigma, 0.0))
    if params.noise_std > 0:
        x = x + rng.normal(0.0, params.noise_std / 255.0, size=x.shape)
    return np.clip(x, 0.0, 1.0)


@dataclass
class TrialSource:
    image: np.ndarray
    mask: np.ndarray
    exact_pose: RigidPose
    perturbed_pose: RigidPose


@dataclass
class TrialSet:
    kind: str
    mesh: TriangleMesh
    texture: np.ndarray
    camera: Camera
    target_pose: RigidPose
    target_image: np.ndarray
    target_mask: np.ndarray
    sources: list
    trans_err: float
    rot_err: float
    seed: int
    light_dir: tuple = field(default=DEFAULT_LIGHT)


def trial_camera(size: int = 128) -> Camera:
    return Camera.centered(size, size, 1.8 * size)


def spherical(azimuth_deg, elevation_deg, radius):
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                              math.sin(el)])


def random_target_pose(rng, radius: float = 0.6) -> RigidPose:
    return look_at(spherical(rng.uniform(0, 360), rng.uniform(15, 60), radius))


def _source_eyes(target_pose: RigidPose, rng, n, radius, spread_deg=(18.0, 32.0)):
    """Camera centers tilted away from the target viewing direction at distinct clock angles."""
    eye = -target_pose.rotation.T @ target_pose.translation
    fwd = eye / np.linalg.norm(eye)
    helper = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(fwd, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(fwd, e1)
    phase = rng.uniform(0, 2 * math.pi)
    eyes = []
    for k in range(n):
        clock = phase + 2 * math.pi * k / n + rng.uniform(-0.3, 0.3)
        tilt = math.radians(rng.uniform(*spread_deg))
        d = math.cos(tilt) * fwd + math.sin(tilt) * (math.cos(clock) * e1 + math.sin(clock) * e2)
        if d[2] < 0.05:  # keep above the table plane
            d[2] = 0.05
            d /= np.linalg.norm(d)
        eyes.append(radius * d)
    return eyes


def make_trial_set(kind: str, target_pose: RigidPose = None, n_sources: int = 5,
                   trans_err_max: float = TRANS_ERR, rot_err_max: float = ROT_ERR,
                   seed: int = 0, size: int = 128, augment: bool = False,
                   texture_size: int = 256) -> TrialSet:
    """Ground-truth target render plus ``n_sources`` posed source renders.

    Exact source poses look at the object from directions 18-32 degrees away
    from the target view; the perturbed poses add uniform per-axis noise
    bounded by the given maxima.
    """
    if trans_err_max < 0 or rot_err_max < 0:
        raise ValueError("error ranges must be nonnegative")
    rng = np.random.default_rng(seed)
    mesh = make_primitive(kind)
    texture = procedural_texture(int(rng.integers(2**31)), texture_size)
    camera = trial_camera(size)
    if target_pose is None:
        target_pose = random_target_pose(rng)
    radius = float(np.linalg.norm(target_pose.translation))
    target_image, target_mask, _ = render_gt_view(mesh, texture, target_pose, camera)
    target_visible = visible_vertices(mesh, target_pose, camera)

    sources = []
    attempts = 0
    while len(sources) < n_sources:
        attempts += 1
        eyes = _source_eyes(target_pose, rng, n_sources, radius)
        sources = []
        for eye in eyes:
            exact = look_at(eye)
            if target_visible and not (visible_vertices(mesh, exact, camera) & target_visible):
                break
            img, mask, _ = render_gt_view(mesh, texture, exact, camera)
            if augment:
                img = color_augment(img, AugmentParams.sample(rng), int(rng.integers(2**31)))
            noisy = perturb_pose(exact, trans_err_max, rot_err_max, int(rng.integers(2**31)))
            sources.append(TrialSource(img, mask, exact, noisy))
        if attempts > 20:
            raise RuntimeError("could not place sources overlapping the target surface")
    return TrialSet(kind, mesh, texture, camera, target_pose, target_image, target_mask,
                    sources, trans_err_max, rot_err_max, seed)
