"""Side information for the energy: observed free space (hull) and interpenetration depth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import Keyframe, ObjectModel, Pose, PointSet
from .voxgrid import BitGrid, GridSpec, ScalarGrid, sample_many

NO_SUPPORT = None

_CHUNK = 1 << 20


@dataclass
class HullGrid:
    spec: GridSpec
    unseen: BitGrid

    @classmethod
    def all_unseen(cls, spec: GridSpec) -> "HullGrid":
        return cls(spec, BitGrid.filled(spec, True))


@dataclass
class InterGrid:
    spec: GridSpec
    d: ScalarGrid

    @classmethod
    def zeros(cls, spec: GridSpec) -> "InterGrid":
        return cls(spec, ScalarGrid.zeros(spec))

    @property
    def active(self) -> np.ndarray:
        return self.d.values > 0


def _chunks(spec: GridSpec):
    """Slabs of voxel centers along x, each at most ~_CHUNK voxels."""
    nx, ny, nz = spec.dims
    step = max(1, _CHUNK // (ny * nz))
    h = spec.voxel_size
    ys = spec.origin[1] + h * np.arange(ny)
    zs = spec.origin[2] + h * np.arange(nz)
    for x0 in range(0, nx, step):
        xs = spec.origin[0] + h * np.arange(x0, min(nx, x0 + step))
        pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        yield slice(x0, x0 + len(xs)), pts


def pixel_depth(depth, col, row, lookup: str = "conservative"):
    """Measured depth seen by projected points; 0 where unavailable.

    ``nearest`` reads the closest pixel. ``conservative`` takes the minimum
    over the 2x2 pixels around the projection and reports 0 unless all four
    are valid, so silhouette edges never clear space behind the surface.
    """
    H, W = depth.shape
    out = np.zeros(len(col))
    fin = np.isfinite(col) & np.isfinite(row)
    if lookup == "nearest":
        c = np.floor(col[fin] + 0.5).astype(np.int64)
        r = np.floor(row[fin] + 0.5).astype(np.int64)
        ok = (c >= 0) & (c < W) & (r >= 0) & (r < H)
        idx = np.flatnonzero(fin)[ok]
        out[idx] = depth[r[ok], c[ok]]
        return out
    if lookup != "conservative":
        raise ValueError(f"unknown depth lookup {lookup!r}")
    c0 = np.floor(col[fin]).astype(np.int64)
    r0 = np.floor(row[fin]).astype(np.int64)
    ok = (c0 >= 0) & (c0 + 1 < W) & (r0 >= 0) & (r0 + 1 < H)
    c0, r0 = c0[ok], r0[ok]
    quad = np.stack([depth[r0, c0], depth[r0, c0 + 1], depth[r0 + 1, c0], depth[r0 + 1, c0 + 1]])
    val = np.where(np.all(quad > 0, axis=0), quad.min(axis=0), 0.0)
    out[np.flatnonzero(fin)[ok]] = val
    return out


def carve_free_space(hull: HullGrid, kf: Keyframe, volume_pose: Pose, margin=None,
                     lookup: str = "conservative") -> HullGrid:
    """Remove from the hull every voxel seen in front of the measured depth.

    ``volume_pose`` maps volume-local coordinates to world at the keyframe's
    timestep. A voxel is observed free when it projects into the image with
    positive depth onto valid depth (see ``pixel_depth``) and lies more than
    ``margin`` (default one voxel) in front of the measurement.
    """
    spec = hull.spec
    margin = spec.voxel_size if margin is None else margin
    cam_from_local = kf.camera_pose.inverse() @ volume_pose
    unseen = hull.unseen.bits.copy()
    for sl, pts in _chunks(spec):
        col, row, z = kf.intrinsics.project(cam_from_local.apply(pts))
        front = z > 0
        meas = np.zeros(len(pts))
        meas[front] = pixel_depth(kf.depth, col[front], row[front], lookup)
        free = front & (meas > 0) & (z < meas - margin)
        block = unseen[sl]
        block &= ~free.reshape(block.shape)
    return HullGrid(spec, BitGrid(spec, unseen))


def _point_sdf_many(tree: cKDTree, pts: PointSet, X, sigma, normalize="weights"):
    """Weighted point-based signed distance at many locations.

    Returns ``(values, supported)``; unsupported locations (no point within
    3 sigma) get value 0.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    vals = np.zeros(len(X))
    supported = np.zeros(len(X), dtype=bool)
    if len(X) == 0 or len(pts) == 0:
        return vals, supported
    radius = 3.0 * sigma
    lists = tree.query_ball_point(X, radius, return_sorted=True)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    if counts.sum() == 0:
        return vals, supported
    q = np.repeat(np.arange(len(X)), counts)
    idx = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists if l])
    diff = X[q] - pts.p[idx]
    w = np.exp(-np.einsum("ij,ij->i", diff, diff) / sigma ** 2) * pts.a[idx]
    f = np.einsum("ij,ij->i", diff, pts.n[idx])
    num = np.bincount(q, weights=w * f, minlength=len(X))
    den = np.bincount(q, weights=w, minlength=len(X))
    supported = counts > 0
    if normalize == "weights":
        ok = den > 0
        vals[ok] = num[ok] / den[ok]
        supported &= ok
    elif normalize == "count":
        vals = num / len(pts)
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    return vals, supported


def approx_point_sdf(points: PointSet, x, sigma: float, normalize: str = "weights"):
    """Signed distance at ``x`` estimated from oriented points, or NO_SUPPORT."""
    tree = cKDTree(points.p) if len(points) else None
    if tree is None:
        return NO_SUPPORT
    vals, ok = _point_sdf_many(tree, points, np.asarray(x).reshape(1, 3), sigma, normalize)
    return float(vals[0]) if ok[0] else NO_SUPPORT


def compute_d_inter(target: ObjectModel, others, timesteps, sigma=None, normalize="weights") -> InterGrid:
    """Maximum depth by which each voxel of ``target`` ever lies inside another model.

    Background models are evaluated through their optimized SDF (trilinear
    sampling); object models through their oriented points. Evaluations
    outside a grid or without point support count as no penetration.
    """
    spec = target.spec
    d = np.zeros(spec.dims)
    centers = spec.centers().reshape(-1, 3)
    sources = []
    for p in others:
        if p.id == target.id:
            continue
        if p.is_background:
            if p.sdf is None:
                raise ValueError("background SDF must be optimized before computing d_inter")
            sources.append((p, None, None))
        else:
            pts = p.all_points()
            if len(pts):
                sources.append((p, cKDTree(pts.p), pts))
    flat = d.reshape(-1)
    for t in timesteps:
        world_from_target = target.pose_at(t)
        for p, tree, pts in sources:
            x_t = (p.pose_at(t).inverse() @ world_from_target).apply(centers)
            if tree is None:
                u, ok = sample_many(p.sdf.values, p.spec, x_t)
            else:
                lo, hi = p.spec.bounds()
                sig = p.spec.voxel_size if sigma is None else sigma
                near = np.all((x_t >= lo - 3 * sig) & (x_t <= hi + 3 * sig), axis=1)
                u = np.zeros(len(x_t))
                ok = np.zeros(len(x_t), dtype=bool)
                if near.any():
                    u[near], ok[near] = _point_sdf_many(tree, pts, x_t[near], sig, normalize)
            pen = np.where(ok, -u, 0.0)
            np.maximum(flat, pen, out=flat)
    return InterGrid(spec, ScalarGrid(spec, d))
