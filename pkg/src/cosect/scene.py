"""Rigid poses, oriented point sets, keyframes, object models and the sequence layout."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import InvalidDepth, MalformedDataset, MissingPose
from .voxgrid import BitGrid, GridSpec, ScalarGrid


@dataclass
class Pose:
    """Rigid transform x -> R x + t (object or camera coordinates to world)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def rotate(self, vecs) -> np.ndarray:
        return np.asarray(vecs, dtype=np.float64) @ self.R.T

    def is_valid(self, tol=1e-6) -> bool:
        ortho = np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
        return bool(ortho and abs(np.linalg.det(self.R) - 1.0) <= tol)


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def invert(p: Pose) -> Pose:
    return p.inverse()


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def project(self, pts):
        """Pixel coordinates (col, row) and depth z of camera-space points."""
        pts = np.asarray(pts, dtype=np.float64)
        z = pts[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.fx * pts[..., 0] / z + self.cx
            row = self.fy * pts[..., 1] / z + self.cy
        return col, row, z

    def rays(self) -> np.ndarray:
        """Per-pixel camera-space directions with unit z, shape (H, W, 3)."""
        rows, cols = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(cols)], axis=-1
        )


@dataclass(frozen=True)
class OrientedPoint:
    p: tuple
    n: tuple
    a: float = 1.0


@dataclass
class PointSet:
    """Oriented points in structure-of-arrays form: positions, unit normals, weights."""

    p: np.ndarray
    n: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.n = np.asarray(self.n, dtype=np.float64).reshape(-1, 3)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        if not (len(self.p) == len(self.n) == len(self.a)):
            raise ValueError("point, normal and weight counts differ")

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_points(cls, pts) -> "PointSet":
        pts = list(pts)
        if not pts:
            return cls.empty()
        return cls([q.p for q in pts], [q.n for q in pts], [q.a for q in pts])

    @classmethod
    def concat(cls, sets) -> "PointSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.p for s in sets]),
            np.concatenate([s.n for s in sets]),
            np.concatenate([s.a for s in sets]),
        )

    def __len__(self):
        return len(self.p)

    def __iter__(self):
        for p, n, a in zip(self.p, self.n, self.a):
            yield OrientedPoint(tuple(p), tuple(n), float(a))

    def subset(self, keep) -> "PointSet":
        return PointSet(self.p[keep], self.n[keep], self.a[keep])

    def transformed(self, pose: Pose) -> "PointSet":
        return PointSet(pose.apply(self.p), pose.rotate(self.n), self.a)


@dataclass
class Keyframe:
    timestep: int
    camera_pose: Pose
    depth: np.ndarray
    intrinsics: Intrinsics
    object_mask: np.ndarray
    assoc: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.object_mask = np.asarray(self.object_mask, dtype=np.uint8)
        self.assoc = np.asarray(self.assoc, dtype=np.float32)
        if not (self.depth.shape == self.object_mask.shape == self.assoc.shape):
            raise ValueError("depth, mask and assoc rasters differ in shape")
        if (self.depth < 0).any():
            raise ValueError("negative depth")


@dataclass
class ObjectModel:
    id: int
    spec: GridSpec
    trajectory: Dict[int, Pose] = field(default_factory=dict)
    points: Dict[int, PointSet] = field(default_factory=dict)
    sdf: Optional[ScalarGrid] = None
    hull: Optional[BitGrid] = None
    inter: Optional[ScalarGrid] = None

    @property
    def is_background(self) -> bool:
        return self.id == 0

    def pose_at(self, t: int) -> Pose:
        if self.is_background:
            return self.trajectory.get(t, Pose.identity())
        try:
            return self.trajectory[t]
        except KeyError:
            raise MissingPose(f"object {self.id} has no pose at timestep {t}") from None

    def all_points(self) -> PointSet:
        return PointSet.concat([self.points[t] for t in sorted(self.points)])


def backproject(depth, intrinsics: Intrinsics, pixel) -> np.ndarray:
    col, row = pixel
    z = float(depth[row, col])
    if z <= 0:
        raise InvalidDepth(f"no depth at pixel {pixel}")
    return z * np.array(
        [(col - intrinsics.cx) / intrinsics.fx, (row - intrinsics.cy) / intrinsics.fy, 1.0]
    )


def backproject_all(depth, intrinsics: Intrinsics) -> np.ndarray:
    return np.asarray(depth, dtype=np.float64)[..., None] * intrinsics.rays()


def depth_normals(depth, intrinsics: Intrinsics, max_jump: float = 0.05):
    """Per-pixel camera-space normals from central differences of backprojected points.

    Returns ``(normals, valid)``. A pixel is valid only if it and its four
    neighbours have depth and no neighbour differs by more than ``max_jump``
    times the centre depth (depth discontinuity). Normals face the camera.
    """
    depth = np.asarray(depth, dtype=np.float64)
    P = backproject_all(depth, intrinsics)
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, valid

    c = depth[1:-1, 1:-1]
    ok = c > 0
    for nb in (depth[1:-1, 2:], depth[1:-1, :-2], depth[2:, 1:-1], depth[:-2, 1:-1]):
        ok &= (nb > 0) & (np.abs(nb - c) <= max_jump * c)
    tx = P[1:-1, 2:] - P[1:-1, :-2]
    ty = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    flip = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1]) > 0
    n[flip] *= -1
    n[~ok] = 0.0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return normals, valid


def _mask_interior(mask, oid):
    """Pixels labelled ``oid`` whose four neighbours carry the same label."""
    m = mask == oid
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2] & m[2:, 1:-1] & m[:-2, 1:-1]
    return inner


def _frame_points(kf: Keyframe, oid: int, local_from_world: Pose) -> PointSet:
    normals, valid = depth_normals(kf.depth, kf.intrinsics)
    sel = valid & _mask_interior(kf.object_mask, oid)
    if not sel.any():
        return PointSet.empty()
    P = backproject_all(kf.depth, kf.intrinsics)[sel]
    local = local_from_world @ kf.camera_pose
    return PointSet(local.apply(P), local.rotate(normals[sel]), kf.assoc[sel])


def extract_object_points(kf: Keyframe, model: ObjectModel) -> PointSet:
    """Oriented points of ``model`` seen in ``kf``, in the model's local frame.

    Pixels on the boundary of the object's mask are skipped (their normals mix
    surfaces). Points outside the model's grid volume are dropped.
    """
    local_from_world = model.pose_at(kf.timestep).inverse()
    pts = _frame_points(kf, model.id, local_from_world)
    lo, hi = model.spec.bounds()
    keep = np.all((pts.p >= lo) & (pts.p <= hi), axis=1)
    return pts.subset(keep)


def cube_spec_around(pts, resolution: int, pad: float = 0.25) -> GridSpec:
    """Cubic grid around the bounding box of ``pts``, padded by ``pad`` per side."""
    pts = np.asarray(pts, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = float((hi - lo).max()) * (1 + 2 * pad)
    if side <= 0:
        side = 1e-2
    center = (lo + hi) / 2
    return GridSpec.cube(center - side / 2, side, resolution)


# ---------------------------------------------------------------------------
# sequence layout on disk

def _write_raster(path: Path, tag: str, arr, dtype) -> None:
    arr = np.asarray(arr)
    H, W = arr.shape
    path.write_bytes(f"{tag} {W} {H}\n".encode("ascii") + arr.astype(dtype).tobytes(order="C"))


def _read_raster(path: Path, tag: str, dtype) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise MalformedDataset(path, f"cannot read: {e.strerror}") from None
    nl = data.find(b"\n")
    head = data[:nl].decode("ascii", "replace").split() if nl >= 0 else []
    if len(head) != 3 or head[0] != tag:
        raise MalformedDataset(path, f"expected '{tag} <W> <H>' header")
    W, H = int(head[1]), int(head[2])
    arr = np.frombuffer(data[nl + 1:], dtype=dtype)
    if arr.size != W * H:
        raise MalformedDataset(path, f"expected {W * H} values, found {arr.size}")
    return arr.reshape(H, W).copy()


def write_poses(path: Path, traj: Dict[int, Pose]) -> None:
    lines = []
    for t in sorted(traj):
        m = np.hstack([traj[t].R, traj[t].t[:, None]]).ravel()
        lines.append(" ".join([str(int(t))] + [repr(float(v)) for v in m]))
    path.write_text("\n".join(lines) + "\n")


def read_poses(path: Path) -> Dict[int, Pose]:
    if not path.exists():
        raise MalformedDataset(path, "pose file missing")
    traj = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 13:
            raise MalformedDataset(path, f"line {lineno}: expected 13 fields, got {len(parts)}")
        try:
            t = int(parts[0])
            m = np.array([float(v) for v in parts[1:]]).reshape(3, 4)
        except ValueError:
            raise MalformedDataset(path, f"line {lineno}: not numeric") from None
        pose = Pose(m[:, :3], m[:, 3])
        if not pose.is_valid(1e-5):
            raise MalformedDataset(path, f"line {lineno}: rotation is not orthonormal")
        traj[t] = pose
    return traj


def save_sequence(path, frames, trajectories: Dict[int, Dict[int, Pose]], background_box=None) -> None:
    """Write frames (Keyframe objects for every timestep) and object trajectories.

    ``background_box`` is an optional ``(lo, side, resolution)`` placement for
    the background volume, stored in ``background.txt``.
    """
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    intr = frames[0].intrinsics
    (root / "intrinsics.txt").write_text(
        f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n"
    )
    for kf in frames:
        stem = root / "frames" / f"{kf.timestep:06d}"
        _write_raster(stem.with_suffix(".depth"), "fdep", kf.depth, "<f4")
        _write_raster(stem.with_suffix(".mask"), "fmsk", kf.object_mask, np.uint8)
        _write_raster(stem.with_suffix(".assoc"), "fasc", kf.assoc, "<f4")
    write_poses(root / "poses" / "obj0cam.txt", {kf.timestep: kf.camera_pose for kf in frames})
    for oid, traj in trajectories.items():
        write_poses(root / "poses" / f"obj{oid}.txt", traj)
    if background_box is not None:
        lo, side, res = background_box
        (root / "background.txt").write_text(
            " ".join(repr(float(v)) for v in lo) + f" {float(side)!r} {int(res)}\n"
        )


def _read_intrinsics(path: Path) -> Intrinsics:
    try:
        vals = path.read_text().split()
    except OSError:
        raise MalformedDataset(path, "intrinsics file missing") from None
    if len(vals) != 6:
        raise MalformedDataset(path, "expected 'fx fy cx cy W H'")
    try:
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        W, H = int(vals[4]), int(vals[5])
    except ValueError:
        raise MalformedDataset(path, "not numeric") from None
    return Intrinsics(fx, fy, cx, cy, W, H)


def load_frame(root: Path, t: int, intr: Intrinsics, cam: Dict[int, Pose]) -> Keyframe:
    stem = root / "frames" / f"{t:06d}"
    depth = _read_raster(stem.with_suffix(".depth"), "fdep", "<f4")
    mask = _read_raster(stem.with_suffix(".mask"), "fmsk", np.uint8)
    assoc = _read_raster(stem.with_suffix(".assoc"), "fasc", "<f4")
    if depth.shape != (intr.height, intr.width) or mask.shape != depth.shape or assoc.shape != depth.shape:
        raise MalformedDataset(stem, "raster size disagrees with intrinsics")
    if t not in cam:
        raise MalformedDataset(root / "poses" / "obj0cam.txt", f"no camera pose for frame {t}")
    return Keyframe(t, cam[t], depth, intr, mask, assoc)


def frame_timesteps(path) -> list:
    root = Path(path)
    return sorted(int(p.stem) for p in (root / "frames").glob("*.depth"))


def load_sequence(
    path,
    keyframe_stride: int = 10,
    object_resolution: int = 64,
    background_resolution: Optional[int] = None,
    max_keyframes: Optional[int] = None,
):
    """Load keyframes and build object-model skeletons (no points attached yet).

    Keyframes are the frames whose timestep is a multiple of ``keyframe_stride``.
    Object grids are cubes around the first keyframe's points of the object,
    padded by 25% per side; the background grid comes from ``background.txt``
    or, if absent, from the first keyframe's background points.
    ``background_resolution`` overrides the stored resolution (default 256
    when nothing is stored).
    """
    root = Path(path)
    if not (root / "frames").is_dir():
        raise MalformedDataset(root, "no frames/ directory")
    intr = _read_intrinsics(root / "intrinsics.txt")
    cam = read_poses(root / "poses" / "obj0cam.txt")
    steps = [t for t in frame_timesteps(root) if t % keyframe_stride == 0]
    if max_keyframes is not None:
        steps = steps[:max_keyframes]
    if not steps:
        raise MalformedDataset(root / "frames", "no keyframes found")
    keyframes = [load_frame(root, t, intr, cam) for t in steps]

    ids = sorted(set().union(*(np.unique(kf.object_mask).tolist() for kf in keyframes)) | {0})
    models = []
    for oid in ids:
        if oid == 0:
            traj = {}
            if (root / "poses" / "obj0.txt").exists():
                traj = read_poses(root / "poses" / "obj0.txt")
        else:
            traj = read_poses(root / "poses" / f"obj{oid}.txt")
        missing = [kf.timestep for kf in keyframes if oid != 0 and kf.timestep not in traj]
        if missing:
            raise MalformedDataset(root / "poses" / f"obj{oid}.txt", f"no pose for timesteps {missing[:5]}")
        models.append(_skeleton(root, oid, traj, keyframes, object_resolution, background_resolution))
    return keyframes, models


def _skeleton(root, oid, traj, keyframes, obj_res, bg_res) -> ObjectModel:
    model = ObjectModel(oid, GridSpec((2, 2, 2), 1.0), traj)
    if oid == 0 and (root / "background.txt").exists():
        vals = (root / "background.txt").read_text().split()
        if len(vals) != 5:
            raise MalformedDataset(root / "background.txt", "expected 'x y z side resolution'")
        lo = [float(v) for v in vals[:3]]
        model.spec = GridSpec.cube(lo, float(vals[3]), int(vals[4]) if bg_res is None else bg_res)
        return model
    bg_res = 256 if bg_res is None else bg_res
    for kf in keyframes:
        pts = _frame_points(kf, oid, model.pose_at(kf.timestep).inverse())
        if len(pts):
            model.spec = cube_spec_around(pts.p, bg_res if oid == 0 else obj_res)
            return model
    raise MalformedDataset(root / "frames", f"object {oid} has no valid points in any keyframe")


def attach_points(models, keyframes) -> None:
    """Extract each keyframe's oriented points into every model (in place)."""
    for model in models:
        for kf in keyframes:
            if model.is_background or kf.timestep in model.trajectory:
                model.points[kf.timestep] = extract_object_points(kf, model)
