"""Accuracy and completeness between a reconstructed and a reference mesh."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh
from .mesh import TriMesh


@dataclass
class EvalResult:
    accuracy: float
    completeness: float
    sample_count: int
    per_vertex_distance: Optional[np.ndarray] = None

    def line(self) -> str:
        return f"accuracy {self.accuracy!r} completeness {self.completeness!r}"


def sample_surface(m: TriMesh, n: int, seed=0) -> np.ndarray:
    """``n`` points drawn uniformly over the surface area of ``m``."""
    if m.is_empty:
        raise EmptyMesh("mesh")
    if n < 1:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    areas = m.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMesh("mesh")
    cdf = np.cumsum(areas / total)
    tri = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[tri] for x in m.corners())
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def closest_on_triangles(x, a, b, c) -> np.ndarray:
    """Closest point of each triangle (a, b, c) to the matching query x (row-wise).

    Region classification over vertices, edges and the face interior.
    """
    ab = b - a
    ac = c - a
    ap = x - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = x - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = x - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + v[:, None] * ab + w[:, None] * ac

        # edge bc
        e_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(e_bc[:, None], b + np.nan_to_num(t)[:, None] * (c - b), out)
        # edge ac
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        out = np.where(e_ac[:, None], a + np.nan_to_num(t)[:, None] * ac, out)
        # edge ab
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        out = np.where(e_ab[:, None], a + np.nan_to_num(t)[:, None] * ab, out)
    # vertices
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


class MeshDistance:
    """Exact unsigned point-to-mesh distance backed by a k-d tree over triangle centroids.

    A triangle can only be closer than the nearest-centroid bound if its
    centroid lies within that bound plus the largest centroid-to-vertex
    radius, so candidates are gathered from that ball.
    """

    def __init__(self, m: TriMesh):
        if m.is_empty:
            raise EmptyMesh("mesh")
        self.a, self.b, self.c = m.corners()
        self.centroids = (self.a + self.b + self.c) / 3.0
        rad = np.max(np.stack([np.linalg.norm(v - self.centroids, axis=1) for v in (self.a, self.b, self.c)]), axis=0)
        self.radius = float(rad.max())
        self.tree = cKDTree(self.centroids)

    def __call__(self, X, chunk: int = 4096) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(X))
        for s in range(0, len(X), chunk):
            out[s:s + chunk] = self._block(X[s:s + chunk])
        return out

    def _block(self, X):
        d0, i0 = self.tree.query(X)
        # exact distance to the nearest-centroid triangle gives an upper bound
        ub = np.linalg.norm(X - closest_on_triangles(X, self.a[i0], self.b[i0], self.c[i0]), axis=1)
        lists = self.tree.query_ball_point(X, ub + self.radius + 1e-12)
        counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
        q = np.repeat(np.arange(len(X)), counts)
        idx = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists]) if counts.sum() else np.zeros(0, np.int64)
        p = closest_on_triangles(X[q], self.a[idx], self.b[idx], self.c[idx])
        dist = np.linalg.norm(X[q] - p, axis=1)
        best = ub.copy()
        np.minimum.at(best, q, dist)
        return best


def point_to_mesh_distance(x, m: TriMesh):
    """Minimum distance from ``x`` (one point or an array of points) to ``m``."""
    x = np.asarray(x, dtype=np.float64)
    d = MeshDistance(m)(x.reshape(-1, 3))
    return float(d[0]) if x.ndim == 1 else d


def evaluate(recon: TriMesh, gt: TriMesh, n: int = 10000, seed=7, per_vertex: bool = False) -> EvalResult:
    """Mean sampled distance recon→gt (accuracy) and gt→recon (completeness)."""
    if recon.is_empty:
        raise EmptyMesh("recon")
    if gt.is_empty:
        raise EmptyMesh("gt")
    to_gt = MeshDistance(gt)
    to_recon = MeshDistance(recon)
    acc = float(to_gt(sample_surface(recon, n, seed)).mean())
    comp = float(to_recon(sample_surface(gt, n, seed)).mean())
    pvd = to_gt(recon.vertices).astype(np.float32) if per_vertex else None
    return EvalResult(acc, comp, n, pvd)
