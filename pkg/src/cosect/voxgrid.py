"""Dense voxel grids: placement, sampling, refinement and the csvf/csvb file format.

Arrays are indexed ``values[ix, iy, iz]``; on disk the linear order is x-fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

OUTSIDE = None  # marker returned by trilinear_sample outside the grid

_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"grid dims must be three integers >= 2, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def bounds(self):
        """World-space (min, max) corners of the volume covered by the voxels."""
        o = np.asarray(self.origin)
        h = self.voxel_size
        return o - h / 2, o + (np.asarray(self.dims) - 0.5) * h

    def centers(self) -> np.ndarray:
        """Voxel centers as a ``dims + (3,)`` float64 array."""
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def cube(cls, lo, side: float, n: int) -> "GridSpec":
        """An n^3 grid whose voxels exactly tile the cube [lo, lo + side]."""
        h = side / n
        return cls((n, n, n), h, tuple(np.asarray(lo, float) + h / 2))


@dataclass
class ScalarGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != self.spec.dims:
            raise ValueError(f"values shape {v.shape} does not match dims {self.spec.dims}")
        if not np.isfinite(v).all():
            raise ValueError("grid values must be finite")
        self.values = v

    @classmethod
    def zeros(cls, spec: GridSpec) -> "ScalarGrid":
        return cls(spec, np.zeros(spec.dims, np.float32))

    @classmethod
    def full(cls, spec: GridSpec, value: float) -> "ScalarGrid":
        return cls(spec, np.full(spec.dims, value, np.float32))


@dataclass
class BitGrid:
    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.shape != self.spec.dims:
            raise ValueError(f"bits shape {b.shape} does not match dims {self.spec.dims}")
        self.bits = b

    @classmethod
    def filled(cls, spec: GridSpec, value: bool) -> "BitGrid":
        return cls(spec, np.full(spec.dims, bool(value)))


def voxel_to_world(spec: GridSpec, v) -> np.ndarray:
    return np.asarray(spec.origin) + spec.voxel_size * np.asarray(v, dtype=np.float64)


def world_to_voxel(spec: GridSpec, x) -> np.ndarray:
    """Continuous voxel coordinates of world point(s) ``x``.

    Results within 1e-9 (relative) of an integer are snapped onto it so that
    integer voxel indices round-trip exactly through voxel_to_world.
    """
    c = (np.asarray(x, dtype=np.float64) - np.asarray(spec.origin)) / spec.voxel_size
    r = np.rint(c)
    return np.where(np.abs(c - r) <= _SNAP * np.maximum(1.0, np.abs(r)), r, c)


def nearest_voxel(spec: GridSpec, x) -> np.ndarray:
    return np.rint(world_to_voxel(spec, x)).astype(np.int64)


def contains(spec: GridSpec, idx) -> np.ndarray:
    """True where integer voxel indices ``idx`` (..., 3) lie inside the grid."""
    idx = np.asarray(idx)
    return np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=-1)


def sample_many(values: np.ndarray, spec: GridSpec, pts):
    """Trilinear interpolation at many world points.

    Returns ``(vals, inside)``; ``vals`` is 0 wherever the interpolation cell of
    a point is not fully inside the grid.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    c = world_to_voxel(spec, pts)
    hi = np.asarray(spec.dims) - 1
    inside = np.all((c >= 0) & (c <= hi), axis=1)
    c = np.clip(c, 0, hi)
    i0 = np.minimum(np.floor(c).astype(np.int64), hi - 1)
    f = c - i0
    vals = np.zeros(len(pts))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                vals += wx * wy * wz * values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    vals[~inside] = 0.0
    return vals, inside


def trilinear_sample(g: ScalarGrid, x):
    vals, inside = sample_many(g.values, g.spec, x)
    return float(vals[0]) if inside[0] else OUTSIDE


def upsample_split(g: ScalarGrid) -> ScalarGrid:
    """Split every voxel into 8 children carrying the parent value."""
    h = g.spec.voxel_size
    spec = GridSpec(
        tuple(2 * d for d in g.spec.dims),
        h / 2,
        tuple(o - h / 4 for o in g.spec.origin),
    )
    v = g.values
    for axis in range(3):
        v = np.repeat(v, 2, axis=axis)
    return ScalarGrid(spec, v)


def _header(tag, spec: GridSpec) -> bytes:
    fields = [tag, *map(str, spec.dims), repr(spec.voxel_size), *map(repr, spec.origin)]
    return (" ".join(fields) + "\n").encode("ascii")


def save_volume(path, grid) -> None:
    """Write a ScalarGrid as ``csvf`` or a BitGrid as ``csvb``."""
    if isinstance(grid, ScalarGrid):
        head = _header("csvf", grid.spec)
        body = grid.values.astype("<f4").ravel(order="F").tobytes()
    elif isinstance(grid, BitGrid):
        head = _header("csvb", grid.spec)
        body = grid.bits.astype(np.uint8).ravel(order="F").tobytes()
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    Path(path).write_bytes(head + body)


def load_volume(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing volume header")
    parts = data[:nl].decode("ascii").split()
    if len(parts) != 8 or parts[0] not in ("csvf", "csvb"):
        raise ValueError(f"{path}: bad volume header {data[:nl]!r}")
    dims = tuple(int(p) for p in parts[1:4])
    spec = GridSpec(dims, float(parts[4]), tuple(float(p) for p in parts[5:8]))
    body = data[nl + 1:]
    if parts[0] == "csvf":
        arr = np.frombuffer(body, dtype="<f4")
        if arr.size != spec.count:
            raise ValueError(f"{path}: expected {spec.count} values, found {arr.size}")
        return ScalarGrid(spec, arr.reshape(dims, order="F"))
    arr = np.frombuffer(body, dtype=np.uint8)
    if arr.size != spec.count:
        raise ValueError(f"{path}: expected {spec.count} values, found {arr.size}")
    return BitGrid(spec, arr.reshape(dims, order="F") != 0)
