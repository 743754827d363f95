"""Synthetic dynamic scenes: analytic shapes on scripted rigid trajectories, rendered by sphere tracing."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .scene import Intrinsics, Keyframe, Pose, save_sequence
from .voxgrid import GridSpec, ScalarGrid

MAX_RANGE = 10.0
HIT_EPS = 1e-4
MAX_STEPS = 256


@dataclass(frozen=True)
class Plane:
    normal: tuple
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")


@dataclass(frozen=True)
class Sphere:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Box:
    half: tuple

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError("box half-extents must be positive")


@dataclass(frozen=True)
class ShapeUnion:
    children: tuple


Shape = Union[Plane, Sphere, Box, ShapeUnion]


def analytic_sdf(shape: Shape, x) -> np.ndarray:
    """Signed distance of local point(s) ``x`` (negative inside)."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(shape, Plane):
        return x @ np.asarray(shape.normal, dtype=np.float64) - shape.offset
    if isinstance(shape, Sphere):
        return np.linalg.norm(x, axis=-1) - shape.radius
    if isinstance(shape, Box):
        q = np.abs(x) - np.asarray(shape.half, dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)
    if isinstance(shape, ShapeUnion):
        return np.min([analytic_sdf(c, x) for c in shape.children], axis=0)
    raise TypeError(f"unknown shape {shape!r}")


def shape_bounds(shape: Shape):
    if isinstance(shape, Sphere):
        r = shape.radius
        return -np.full(3, r), np.full(3, r)
    if isinstance(shape, Box):
        b = np.asarray(shape.half, dtype=np.float64)
        return -b, b
    if isinstance(shape, ShapeUnion):
        bs = [shape_bounds(c) for c in shape.children]
        return np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0)
    raise ValueError(f"{type(shape).__name__} is unbounded")


def _nlerp(q0, q1, s):
    if np.dot(q0, q1) < 0:
        q1 = -q1
    q = (1 - s) * q0 + s * q1
    return q / np.linalg.norm(q)


@dataclass
class Trajectory:
    """Keyframed rigid poses; translation is interpolated linearly, rotation by normalized quaternion lerp."""

    times: Sequence[int]
    poses: Sequence[Pose]

    def __post_init__(self):
        order = np.argsort(self.times)
        self.times = [int(self.times[i]) for i in order]
        self.poses = [self.poses[i] for i in order]
        self._quats = [Rotation.from_matrix(p.R).as_quat() for p in self.poses]

    @classmethod
    def constant(cls, pose: Pose) -> "Trajectory":
        return cls([0], [pose])

    def __call__(self, t: float) -> Pose:
        times = self.times
        if t <= times[0]:
            return self.poses[0]
        if t >= times[-1]:
            return self.poses[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        s = (t - times[k]) / (times[k + 1] - times[k])
        q = _nlerp(self._quats[k], self._quats[k + 1], s)
        tr = (1 - s) * self.poses[k].t + s * self.poses[k + 1].t
        return Pose(Rotation.from_quat(q).as_matrix(), tr)


@dataclass
class SceneObject:
    id: int
    shape: Shape
    trajectory: Trajectory


@dataclass
class ScriptedScene:
    objects: List[SceneObject]
    camera: Trajectory
    intrinsics: Intrinsics
    frame_count: int
    background_box: Optional[tuple] = None  # (lo, side, resolution)
    noise_std: float = 0.0
    soft_assoc: bool = False
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        if any(not 0 <= i <= 255 for i in ids):
            raise ValueError("object ids must fit in one byte")

    def object(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def posed_sdf(self, x_world, t):
        """Per-object signed distances at world points, shape (n_objects, N)."""
        x_world = np.asarray(x_world, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(self.objects), len(x_world)))
        for k, obj in enumerate(self.objects):
            local = obj.trajectory(t).inverse().apply(x_world)
            out[k] = analytic_sdf(obj.shape, local)
        return out


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with camera z forward, x right, y down."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


def render_frame(scene: ScriptedScene, t: int) -> Keyframe:
    """Sphere-trace depth, object ids and association weights for frame ``t``."""
    if not 0 <= t < scene.frame_count:
        raise ValueError(f"frame {t} outside [0, {scene.frame_count})")
    intr = scene.intrinsics
    cam = scene.camera(t)
    rays = intr.rays().reshape(-1, 3)
    ray_len = np.linalg.norm(rays, axis=1)
    dirs = cam.rotate(rays / ray_len[:, None])
    n = len(rays)
    depth = np.zeros(n)
    mask = np.zeros(n, dtype=np.uint8)

    if scene.objects:
        s = np.zeros(n)
        active = np.arange(n)
        for _ in range(MAX_STEPS):
            if active.size == 0:
                break
            pts = cam.t + s[active, None] * dirs[active]
            d = scene.posed_sdf(pts, t).min(axis=0)
            hit = np.abs(d) < HIT_EPS
            if hit.any():
                idx = active[hit]
                depth[idx] = s[idx] / ray_len[idx]
            s[active] += d
            alive = ~hit & (s[active] <= MAX_RANGE)
            active = active[alive]
        valid = depth > 0
        if valid.any():
            pts = cam.t + (depth[valid] * ray_len[valid])[:, None] * dirs[valid]
            ids = np.array([o.id for o in scene.objects], dtype=np.uint8)
            mask[valid] = ids[np.argmin(scene.posed_sdf(pts, t), axis=0)]

    H, W = intr.height, intr.width
    depth = depth.reshape(H, W)
    mask = mask.reshape(H, W)
    valid = depth > 0
    if scene.noise_std > 0:
        rng = np.random.default_rng([scene.seed, t])
        noise = rng.normal(0.0, scene.noise_std, size=depth.shape)
        depth = np.where(valid, np.maximum(depth + noise, 1e-3), 0.0)
    assoc = valid.astype(np.float32)
    if scene.soft_assoc:
        assoc = np.where(valid, _soft_band(mask), 0.0)
    return Keyframe(t, cam, depth.astype(np.float32), intr, mask, assoc.astype(np.float32))


def _soft_band(mask) -> np.ndarray:
    """1.0 away from label boundaries, decaying linearly to 0.5 within 2 px of them."""
    dist = np.full(mask.shape, np.inf)
    for oid in np.unique(mask):
        region = mask == oid
        dist[region] = distance_transform_edt(region)[region]
    return np.clip(0.5 + 0.25 * (dist - 1.0), 0.5, 1.0)


def gt_mesh(shape: Shape, resolution: int = 128, pad: float = 0.1):
    """Ground-truth triangle mesh of a bounded shape, in its local frame."""
    from .mesh import marching_cubes

    if resolution < 32:
        raise ValueError("resolution must be at least 32")
    lo, hi = shape_bounds(shape)
    side = float((hi - lo).max()) * (1 + 2 * pad)
    center = (lo + hi) / 2
    spec = GridSpec.cube(center - side / 2, side, resolution)
    values = analytic_sdf(shape, spec.centers())
    return marching_cubes(ScalarGrid(spec, values))


def render_sequence(scene: ScriptedScene, out, threads: int = 1) -> list:
    """Render every frame of ``scene`` and write the sequence directory layout."""
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        frames = list(pool.map(lambda t: render_frame(scene, t), range(scene.frame_count)))
    trajectories = {
        o.id: {t: o.trajectory(t) for t in range(scene.frame_count)} for o in scene.objects
    }
    save_sequence(out, frames, trajectories, scene.background_box)
    gt_dir = Path(out) / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    from .mesh import save_mesh

    for o in scene.objects:
        if o.id != 0 and not isinstance(o.shape, Plane):
            save_mesh(gt_dir / f"obj{o.id}.ply", gt_mesh(o.shape))
    return frames


# ---------------------------------------------------------------------------
# scene description files (TOML)

def _parse_shape(d) -> Shape:
    kind = d.get("kind", "").lower()
    if kind == "plane":
        n = np.asarray(d["normal"], dtype=np.float64)
        return Plane(tuple(n / np.linalg.norm(n)), float(d.get("offset", 0.0)))
    if kind == "sphere":
        return Sphere(float(d["radius"]))
    if kind == "box":
        return Box(tuple(float(v) for v in d["half"]))
    if kind == "union":
        return ShapeUnion(tuple(_parse_shape(c) for c in d["children"]))
    raise ValueError(f"unknown shape kind {kind!r}")


def _parse_pose(d) -> Pose:
    if "look_at" in d:
        return look_at(d["position"], d["look_at"], d.get("up", (0.0, 0.0, 1.0)))
    w, x, y, z = d.get("rotation", (1.0, 0.0, 0.0, 0.0))
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    return Pose(R, d.get("translation", (0.0, 0.0, 0.0)))


def _parse_trajectory(keys) -> Trajectory:
    if not keys:
        return Trajectory.constant(Pose.identity())
    return Trajectory([int(k.get("t", 0)) for k in keys], [_parse_pose(k) for k in keys])


def scene_from_dict(cfg: dict) -> ScriptedScene:
    i = cfg["intrinsics"]
    intr = Intrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                      int(i["width"]), int(i["height"]))
    objects = [
        SceneObject(int(o["id"]), _parse_shape(o["shape"]), _parse_trajectory(o.get("keys", [])))
        for o in cfg.get("objects", [])
    ]
    bg = cfg.get("background")
    box = None
    if bg is not None:
        box = (tuple(float(v) for v in bg["lo"]), float(bg["side"]), int(bg.get("resolution", 256)))
    render = cfg.get("render", {})
    return ScriptedScene(
        objects=objects,
        camera=_parse_trajectory(cfg["camera"]["keys"]),
        intrinsics=intr,
        frame_count=int(cfg["frame_count"]),
        background_box=box,
        noise_std=float(render.get("noise_std", 0.0)),
        soft_assoc=bool(render.get("soft_assoc", False)),
        seed=int(render.get("seed", 0)),
        extra={k: v for k, v in cfg.items() if k not in
               {"intrinsics", "objects", "background", "render", "camera", "frame_count"}},
    )


def load_scene(path) -> ScriptedScene:
    with open(path, "rb") as f:
        return scene_from_dict(tomllib.load(f))


def box_slide_scene(frame_count: int = 100, width: int = 320, height: int = 240,
                    background_resolution: int = 256, camera_radius: float = 1.2,
                    camera_height: float = 1.8) -> ScriptedScene:
    """Box of half-extents (0.15, 0.1, 0.1) sliding 1 m across a ground plane; camera orbits 30 deg."""
    f = 300.0 * width / 320
    intr = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    last = frame_count - 1
    ground = SceneObject(0, Plane((0.0, 0.0, 1.0), 0.0), Trajectory.constant(Pose.identity()))
    box = SceneObject(
        1,
        Box((0.15, 0.1, 0.1)),
        Trajectory([0, last], [Pose(np.eye(3), (-0.5, 0.0, 0.1)), Pose(np.eye(3), (0.5, 0.0, 0.1))]),
    )
    radius, height_m = camera_radius, camera_height
    times = np.linspace(0, last, 4).round().astype(int)
    angles = np.radians(np.linspace(15.0, -15.0, 4))
    cams = [look_at((radius * np.sin(a), -radius * np.cos(a), height_m), (0.0, 0.0, 0.05))
            for a in angles]
    return ScriptedScene(
        objects=[ground, box],
        camera=Trajectory(list(times), cams),
        intrinsics=intr,
        frame_count=frame_count,
        background_box=((-2.0, -2.0, -1.0), 4.0, background_resolution),
    )
