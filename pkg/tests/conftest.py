import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from posefuse.geometry import Camera, RigidPose, TriangleMesh, look_at  # noqa: E402
from posefuse.scenegen import make_primitive, make_trial_set  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_camera():
    return Camera.centered(64, 64, 115.0)


@pytest.fixture(scope="session")
def box_mesh():
    return make_primitive("box")


@pytest.fixture(scope="session")
def cylinder_mesh():
    return make_primitive("cylinder")


@pytest.fixture(scope="session")
def unit_box():
    return make_primitive("box", (1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def box_trial():
    return make_trial_set("box", seed=11, size=96)


@pytest.fixture(scope="session")
def exact_box_trial():
    return make_trial_set("box", seed=11, size=96, trans_err_max=0.0, rot_err_max=0.0)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng, scale=1.0):
    return RigidPose(random_rotation(rng), rng.uniform(-scale, scale, size=3))


def icosphere(subdiv=1, radius=0.1):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def front_pose(distance=0.6):
    """Camera on +z looking down at the origin."""
    return look_at((0.0, 0.0, distance), up=(0.0, 1.0, 0.0))


def gradient_scene(kind, seed, size=128):
    """One source view at its perturbed pose, scored against its own exact-pose projection.

    Returns ``(view, mesh, camera, target_pose, reference, surface)``.
    """
    from posefuse.raster import SourceView, project_view, target_surface, with_features

    ts = make_trial_set(kind, seed=seed, size=size)
    src = ts.sources[seed % len(ts.sources)]
    exact = with_features(SourceView(src.image, src.mask, src.exact_pose), ts.mesh, ts.camera)
    surf = target_surface(ts.mesh, ts.target_pose, ts.camera)
    ref = project_view(exact, ts.mesh, ts.camera, ts.target_pose, surface=surf).features
    return exact.with_pose(src.perturbed_pose), ts.mesh, ts.camera, ts.target_pose, ref, surf


def block_errors(analytic, numeric):
    """Relative error of the translation and rotation blocks."""
    a, n = analytic.as_vector(), numeric.as_vector()
    return (float(np.linalg.norm(a[:3] - n[:3]) / np.linalg.norm(n[:3])),
            float(np.linalg.norm(a[3:] - n[3:]) / np.linalg.norm(n[3:])))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
