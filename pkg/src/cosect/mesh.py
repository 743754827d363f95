"""Triangle meshes: isosurface extraction from SDF grids, OBJ/PLY I/O and basic measures."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .errors import MalformedMeshFile
from .voxgrid import ScalarGrid


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    quality: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.quality is not None:
            self.quality = np.asarray(self.quality, dtype=np.float32).reshape(-1)
            if len(self.quality) != len(self.vertices):
                raise ValueError("quality attribute length differs from vertex count")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        """Enclosed volume by the divergence theorem (positive for outward orientation)."""
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def transformed(self, pose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.triangles.copy(), self.quality)


def edge_use_counts(m: TriMesh) -> np.ndarray:
    """Number of triangles incident to each distinct undirected edge."""
    t = m.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def is_closed(m: TriMesh) -> bool:
    if m.is_empty:
        return False
    return bool(np.all(edge_use_counts(m) == 2))


def marching_cubes(u: ScalarGrid, iso: float = 0.0, mask=None) -> TriMesh:
    """Zero-isosurface of ``u`` in world coordinates, normals facing increasing ``u``.

    ``mask`` optionally restricts extraction to voxels marked True (used for
    partially observed fields such as fused TSDFs).
    """
    vals = u.values
    if not vals.min() < iso < vals.max():
        return TriMesh.empty()
    try:
        verts, faces, _, _ = _skimage_mc(
            vals, level=iso, allow_degenerate=False, mask=mask, method="lewiner"
        )
    except (ValueError, RuntimeError):
        return TriMesh.empty()
    if len(faces) == 0:
        return TriMesh.empty()
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    world = np.asarray(u.spec.origin) + u.spec.voxel_size * verts.astype(np.float64)
    return TriMesh(world, faces)


# ---------------------------------------------------------------------------
# I/O

def save_mesh(path, m: TriMesh) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _save_obj(path, m)
    elif suffix == ".ply":
        _save_ply(path, m)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r}")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".obj":
            return _load_obj(path)
        if suffix == ".ply":
            return _load_ply(path)
    except OSError as e:
        raise MalformedMeshFile(f"{path}: {e.strerror}") from None
    raise MalformedMeshFile(f"{path}: unsupported format {suffix!r}")


def _save_obj(path: Path, m: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in m.vertices.astype(np.float32)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.triangles]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _load_obj(path: Path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise MalformedMeshFile(f"{path}:{lineno}: cannot parse {line!r}") from None
    try:
        return TriMesh(np.array(verts, dtype=np.float32).reshape(-1, 3), np.array(faces).reshape(-1, 3))
    except ValueError as e:
        raise MalformedMeshFile(f"{path}: {e}") from None


def _save_ply(path: Path, m: TriMesh) -> None:
    head = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(m.vertices)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if m.quality is not None:
        head.append("property float quality")
        fields.append(("quality", "<f4"))
    head += [f"element face {len(m.triangles)}", "property list uchar int vertex_indices", "end_header"]
    vrec = np.zeros(len(m.vertices), dtype=fields)
    for k, name in enumerate("xyz"):
        vrec[name] = m.vertices[:, k]
    if m.quality is not None:
        vrec["quality"] = m.quality
    frec = np.zeros(len(m.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = m.triangles
    path.write_bytes(("\n".join(head) + "\n").encode("ascii") + vrec.tobytes() + frec.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
}


def _load_ply(path: Path) -> TriMesh:
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedMeshFile(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise MalformedMeshFile(f"{path}: only binary little-endian PLY is supported")
    elements, current = [], None
    for line in header:
        parts = line.split()
        if parts and parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts and parts[0] == "property" and current is not None:
            if parts[1] == "list":
                current["props"].append(("list", parts[2], parts[3], parts[4]))
            else:
                current["props"].append((parts[2], parts[1]))
    verts = np.zeros((0, 3))
    quality = None
    faces = np.zeros((0, 3), dtype=np.int64)
    offset = 0
    try:
        for el in elements:
            if el["name"] == "face":
                lst = [p for p in el["props"] if p[0] == "list"]
                if len(el["props"]) != 1 or not lst:
                    raise MalformedMeshFile(f"{path}: unsupported face layout")
                _, ctype, itype, _ = lst[0]
                dt = np.dtype([("n", _PLY_TYPES[ctype]), ("i", _PLY_TYPES[itype], (3,))])
                rec = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                if el["count"] and np.any(rec["n"] != 3):
                    raise MalformedMeshFile(f"{path}: only triangle faces are supported")
                faces = rec["i"].astype(np.int64)
                offset += dt.itemsize * el["count"]
            else:
                if any(p[0] == "list" for p in el["props"]):
                    raise MalformedMeshFile(f"{path}: list property in element {el['name']}")
                dt = np.dtype([(name, _PLY_TYPES[typ]) for name, typ in el["props"]])
                rec = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                offset += dt.itemsize * el["count"]
                if el["name"] == "vertex":
                    verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
                    if "quality" in rec.dtype.names:
                        quality = rec["quality"].copy()
        return TriMesh(verts, faces, quality)
    except (KeyError, ValueError) as e:
        raise MalformedMeshFile(f"{path}: {e}") from None
