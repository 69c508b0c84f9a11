"""File formats: OBJ/PLY meshes, 8-bit PNG images, pose/camera JSON and atomic writes."""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, RigidPose, TriangleMesh

# atomic output -------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# poses and cameras ---------------------------------------------------------


def write_pose(path, pose: RigidPose) -> None:
    write_json(path, pose.to_json())


def read_pose(path) -> RigidPose:
    return RigidPose.from_json(read_json(path))


def write_camera(path, camera: Camera) -> None:
    write_json(path, camera.to_json())


def read_camera(path) -> Camera:
    return Camera.from_json(read_json(path))


# images --------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_png(image: np.ndarray) -> bytes:
    """PNG bytes of a float image in [0, 1] or a boolean mask."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_png(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(image))


def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


# meshes --------------------------------------------------------------------


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    """Positions and faces of a Wavefront OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PLY header")
        tok = line.decode("ascii").split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None, None))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> TriangleMesh:
    """Vertex positions and faces from ASCII or binary PLY; other properties are skipped."""
    with open(path, "rb") as fh:
        fmt, elements = _ply_header(fh)
        verts, faces = None, []
        if fmt == "ascii":
            tokens = fh.read().decode("ascii").split()
            pos = 0

            def take(kind):
                nonlocal pos
                val = tokens[pos]
                pos += 1
                return float(val) if kind in "fd" else int(val)
        else:
            data = fh.read()
            end = "<" if fmt == "binary_little_endian" else ">"
            pos = 0

            def take(kind):
                nonlocal pos
                size = struct.calcsize(kind)
                val = struct.unpack_from(end + kind, data, pos)[0]
                pos += size
                return val

        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype, count_t, item_t in props:
                    if ptype == "list":
                        n = take(count_t)
                        row[pname] = [take(item_t) for _ in range(n)]
                    else:
                        row[pname] = take(ptype)
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)
            elif name == "face":
                for r in rows:
                    idx = r.get("vertex_indices", r.get("vertex_index"))
                    for k in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[k], idx[k + 1]))
    if verts is None:
        raise ValueError("PLY has no vertex element")
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def write_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    head = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
            f"element vertex {len(mesh.vertices)}", "property float x", "property float y",
            "property float z", f"element face {len(mesh.faces)}",
            "property list uchar int vertex_indices", "end_header"]
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        body = b"".join(struct.pack("<fff", *v) for v in mesh.vertices.tolist())
        body += b"".join(struct.pack("<Biii", 3, *f) for f in mesh.faces.tolist())
    else:
        lines = [" ".join(repr(float(np.float32(x))) for x in v) for v in mesh.vertices.tolist()]
        lines += ["3 " + " ".join(str(i) for i in f) for f in mesh.faces.tolist()]
        body = ("\n".join(lines) + "\n").encode("ascii")
    atomic_write_bytes(path, out + body)


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r}")
