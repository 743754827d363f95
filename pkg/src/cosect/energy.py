"""Discrete shape-completion energy on a voxel grid.

The energy of a field ``u`` (meters, one value per voxel center) is::

    h^3 * sum_v [ W u^2 - 2 B u
                  + beta_hull  [v observed free] max(0, h - u)^2
                  + beta_inter [d_v > 0]         max(0, d_v - u)^2 ]
    + h^3 * alpha * R(u)

where ``W``/``B`` are the splatted data statistics of the oriented points and
``R`` is the squared Frobenius norm of the discrete Hessian summed over all
stencil positions that fit inside the grid. Second differences are taken in
grid-index units so the balance between ``alpha`` and the other weights does
not depend on the physical voxel size.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeMismatch
from .scene import ObjectModel, PointSet
from .voxgrid import BitGrid, GridSpec, ScalarGrid, nearest_voxel, contains


@dataclass
class EnergyParams:
    alpha: float = 0.005
    beta_hull: float = 0.001
    beta_inter: float = 0.001
    sigma: Optional[float] = None  # None: the voxel size of the grid being solved
    cycle_len: int = 20
    max_cycles: int = 200
    rel_tol: float = 1e-6

    def __post_init__(self):
        if min(self.alpha, self.beta_hull, self.beta_inter) < 0:
            raise ValueError("energy weights must be non-negative")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.cycle_len < 1:
            raise ValueError("cycle_len must be at least 1")

    def sigma_for(self, spec: GridSpec) -> float:
        return spec.voxel_size if self.sigma is None else self.sigma

    def support_for(self, spec: GridSpec) -> float:
        return 3.0 * self.sigma_for(spec)


@dataclass
class DataField:
    W: ScalarGrid
    B: ScalarGrid

    @property
    def spec(self) -> GridSpec:
        return self.W.spec


def gaussian_weight(s, sigma):
    return np.exp(-(np.asarray(s) / sigma) ** 2)


# ---------------------------------------------------------------------------
# data term

@numba.njit(cache=True)
def _splat(p, n, a, origin, h, sigma, radius, W, B):
    nx, ny, nz = W.shape
    r2 = radius * radius
    inv_s2 = 1.0 / (sigma * sigma)
    reach = radius / h
    for i in range(p.shape[0]):
        cx = (p[i, 0] - origin[0]) / h
        cy = (p[i, 1] - origin[1]) / h
        cz = (p[i, 2] - origin[2]) / h
        x0 = max(int(np.ceil(cx - reach)), 0)
        x1 = min(int(np.floor(cx + reach)), nx - 1)
        y0 = max(int(np.ceil(cy - reach)), 0)
        y1 = min(int(np.floor(cy + reach)), ny - 1)
        z0 = max(int(np.ceil(cz - reach)), 0)
        z1 = min(int(np.floor(cz + reach)), nz - 1)
        for ix in range(x0, x1 + 1):
            dx = origin[0] + ix * h - p[i, 0]
            for iy in range(y0, y1 + 1):
                dy = origin[1] + iy * h - p[i, 1]
                for iz in range(z0, z1 + 1):
                    dz = origin[2] + iz * h - p[i, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 > r2:
                        continue
                    w = np.exp(-d2 * inv_s2) * a[i]
                    f = dx * n[i, 0] + dy * n[i, 1] + dz * n[i, 2]
                    W[ix, iy, iz] += w
                    B[ix, iy, iz] += w * f


def accumulate_data(points: PointSet, spec: GridSpec, params: EnergyParams) -> DataField:
    """Splat oriented points into per-voxel sums of weights and weighted signed distances."""
    W = np.zeros(spec.dims)
    B = np.zeros(spec.dims)
    if len(points):
        _splat(
            np.ascontiguousarray(points.p), np.ascontiguousarray(points.n),
            np.ascontiguousarray(points.a), np.asarray(spec.origin), spec.voxel_size,
            params.sigma_for(spec), params.support_for(spec), W, B,
        )
    return DataField(ScalarGrid(spec, W), ScalarGrid(spec, B))


def freeze_free_space(df: DataField, hull) -> DataField:
    """Drop data in voxels that were observed to be free."""
    if hull.spec != df.spec:
        raise ShapeMismatch("hull and data field grids differ")
    unseen = hull.unseen.bits
    return DataField(
        ScalarGrid(df.spec, np.where(unseen, df.W.values, 0.0)),
        ScalarGrid(df.spec, np.where(unseen, df.B.values, 0.0)),
    )


# ---------------------------------------------------------------------------
# foreground handling

def foreground_region(model: ObjectModel, radius_voxels: float = 2.0) -> BitGrid:
    """Voxels of the model's grid within ``radius_voxels`` voxels of its own points."""
    pts = model.all_points()
    bits = np.zeros(model.spec.dims, dtype=bool)
    if len(pts):
        tree = cKDTree(pts.p)
        centers = model.spec.centers().reshape(-1, 3)
        d, _ = tree.query(centers, distance_upper_bound=radius_voxels * model.spec.voxel_size)
        bits = np.isfinite(d).reshape(model.spec.dims)
    return BitGrid(model.spec, bits)


def remove_foreground_points(models):
    """Delete points of every model that fall inside another object's foreground region.

    Returns new ObjectModel instances; the inputs are not modified. The
    background (id 0) has no foreground region of its own.
    """
    regions = {m.id: foreground_region(m) for m in models if not m.is_background}
    out = []
    for p in models:
        new_points = {}
        for t, pts in p.points.items():
            keep = np.ones(len(pts), dtype=bool)
            if len(pts):
                world = p.pose_at(t).apply(pts.p)
                for o in models:
                    if o.id == p.id or o.is_background or t not in o.trajectory:
                        continue
                    local = o.trajectory[t].inverse().apply(world)
                    idx = nearest_voxel(o.spec, local)
                    inside = contains(o.spec, idx)
                    hit = np.zeros(len(pts), dtype=bool)
                    ii = idx[inside]
                    hit[inside] = regions[o.id].bits[ii[:, 0], ii[:, 1], ii[:, 2]]
                    keep &= ~hit
            new_points[t] = pts.subset(keep)
        out.append(replace(p, points=new_points))
    return out


# ---------------------------------------------------------------------------
# Hessian regularizer

# (weight, taps) with taps as (offset, coefficient); second differences in index units
STENCILS = []
for _a in range(3):
    _e = np.eye(3, dtype=int)[_a]
    STENCILS.append((1.0, ((tuple(-_e), 1.0), ((0, 0, 0), -2.0), (tuple(_e), 1.0))))
for _a, _b in ((0, 1), (0, 2), (1, 2)):
    _ea, _eb = np.eye(3, dtype=int)[_a], np.eye(3, dtype=int)[_b]
    STENCILS.append((2.0, (
        (tuple(_ea + _eb), 0.25), (tuple(_ea - _eb), -0.25),
        (tuple(-_ea + _eb), -0.25), (tuple(-_ea - _eb), 0.25),
    )))


def _valid_range(shape, taps):
    lo = [max(-min(off[a] for off, _ in taps), 0) for a in range(3)]
    hi = [shape[a] - max(max(off[a] for off, _ in taps), 0) for a in range(3)]
    return lo, hi


def _shifted(arr, lo, hi, off):
    return arr[lo[0] + off[0]:hi[0] + off[0], lo[1] + off[1]:hi[1] + off[1], lo[2] + off[2]:hi[2] + off[2]]


def stencil_apply(u, taps, absolute=False):
    """Second difference ``D u`` over the positions where the stencil fits."""
    lo, hi = _valid_range(u.shape, taps)
    if any(h <= l for l, h in zip(lo, hi)):
        return None, lo, hi
    out = 0.0
    for off, c in taps:
        out = out + (abs(c) if absolute else c) * _shifted(u, lo, hi, off)
    return out, lo, hi


def stencil_adjoint(v, lo, hi, taps, out, absolute=False):
    for off, c in taps:
        _shifted(out, lo, hi, off)[...] += (abs(c) if absolute else c) * v


def regularizer_reference(u):
    """Pure-numpy ``(A u, R(u))`` with ``R(u) = u^T A u``; slow, used for cross-checks."""
    u = np.asarray(u, dtype=np.float64)
    Au = np.zeros_like(u)
    R = 0.0
    for weight, taps in STENCILS:
        d, lo, hi = stencil_apply(u, taps)
        if d is None:
            continue
        R += weight * float(np.sum(d * d))
        stencil_adjoint(weight * d, lo, hi, taps, Au)
    return Au, R


def regularizer_diagonal(shape) -> np.ndarray:
    diag = np.zeros(shape)
    for weight, taps in STENCILS:
        lo, hi = _valid_range(shape, taps)
        if any(h <= l for l, h in zip(lo, hi)):
            continue
        for off, c in taps:
            _shifted(diag, lo, hi, off)[...] += weight * c * c
    return diag


def regularizer_abs_rowsum(shape) -> np.ndarray:
    """Row sums of ``|D|^T |D|``; bounds the absolute row sums of the regularizer matrix."""
    ones = np.ones(shape)
    out = np.zeros(shape)
    for weight, taps in STENCILS:
        d, lo, hi = stencil_apply(ones, taps, absolute=True)
        if d is not None:
            stencil_adjoint(weight * d, lo, hi, taps, out, absolute=True)
    return out


@numba.njit(cache=True)
def _regularizer(u, out):
    """out = A u; returns R(u). Mirrors regularizer_reference."""
    nx, ny, nz = u.shape
    out[:] = 0.0
    R = 0.0
    for i in range(1, nx - 1):
        for j in range(ny):
            for k in range(nz):
                d = u[i + 1, j, k] - 2.0 * u[i, j, k] + u[i - 1, j, k]
                R += d * d
                out[i + 1, j, k] += d
                out[i, j, k] -= 2.0 * d
                out[i - 1, j, k] += d
    for i in range(nx):
        for j in range(1, ny - 1):
            for k in range(nz):
                d = u[i, j + 1, k] - 2.0 * u[i, j, k] + u[i, j - 1, k]
                R += d * d
                out[i, j + 1, k] += d
                out[i, j, k] -= 2.0 * d
                out[i, j - 1, k] += d
    for i in range(nx):
        for j in range(ny):
            for k in range(1, nz - 1):
                d = u[i, j, k + 1] - 2.0 * u[i, j, k] + u[i, j, k - 1]
                R += d * d
                out[i, j, k + 1] += d
                out[i, j, k] -= 2.0 * d
                out[i, j, k - 1] += d
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            for k in range(nz):
                d = 0.25 * (u[i + 1, j + 1, k] - u[i + 1, j - 1, k] - u[i - 1, j + 1, k] + u[i - 1, j - 1, k])
                R += 2.0 * d * d
                c = 0.5 * d
                out[i + 1, j + 1, k] += c
                out[i + 1, j - 1, k] -= c
                out[i - 1, j + 1, k] -= c
                out[i - 1, j - 1, k] += c
    for i in range(1, nx - 1):
        for j in range(ny):
            for k in range(1, nz - 1):
                d = 0.25 * (u[i + 1, j, k + 1] - u[i + 1, j, k - 1] - u[i - 1, j, k + 1] + u[i - 1, j, k - 1])
                R += 2.0 * d * d
                c = 0.5 * d
                out[i + 1, j, k + 1] += c
                out[i + 1, j, k - 1] -= c
                out[i - 1, j, k + 1] -= c
                out[i - 1, j, k - 1] += c
    for i in range(nx):
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                d = 0.25 * (u[i, j + 1, k + 1] - u[i, j + 1, k - 1] - u[i, j - 1, k + 1] + u[i, j - 1, k - 1])
                R += 2.0 * d * d
                c = 0.5 * d
                out[i, j + 1, k + 1] += c
                out[i, j + 1, k - 1] -= c
                out[i, j - 1, k + 1] -= c
                out[i, j - 1, k - 1] += c
    return R


def regularizer(u):
    """``(A u, R(u))`` for a float64 field."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    Au = np.empty_like(u)
    R = _regularizer(u, Au)
    return Au, R


@numba.njit(cache=True)
def _sweep(u, Au, W, B, free, d, diagA, alpha, bh, bi, h, omega, floor, out):
    flat_u = u.ravel()
    flat_o = out.ravel()
    fAu = Au.ravel()
    fW = W.ravel()
    fB = B.ravel()
    ff = free.ravel()
    fd = d.ravel()
    fdiag = diagA.ravel()
    for v in range(flat_u.size):
        x = flat_u[v]
        g = fW[v] * x - fB[v] + alpha * fAu[v]
        H = fW[v] + alpha * fdiag[v]
        if ff[v] and x < h:
            g -= bh * (h - x)
            H += bh
        if fd[v] > 0.0 and x < fd[v]:
            g -= bi * (fd[v] - x)
            H += bi
        if H < floor:
            H = floor
        flat_o[v] = x - omega * g / H


# ---------------------------------------------------------------------------
# assembled energy

def _as_field(u) -> np.ndarray:
    if isinstance(u, ScalarGrid):
        u = u.values
    return np.ascontiguousarray(u, dtype=np.float64)


class DiscreteEnergy:
    """Energy of one volume with all coefficients resolved to float64 arrays.

    ``hull`` (a HullGrid) and ``inter`` (an InterGrid) are optional; passing
    None disables the corresponding penalty.
    """

    def __init__(self, df: DataField, params: EnergyParams, hull=None, inter=None):
        spec = df.spec
        for g in (hull, inter):
            if g is not None and g.spec != spec:
                raise ShapeMismatch(f"grid {g.spec} does not match data grid {spec}")
        self.spec = spec
        self.params = params
        self.h = spec.voxel_size
        self.W = np.ascontiguousarray(df.W.values, dtype=np.float64)
        self.B = np.ascontiguousarray(df.B.values, dtype=np.float64)
        if hull is not None and params.beta_hull > 0:
            self.free = np.ascontiguousarray(~hull.unseen.bits)
        else:
            self.free = np.zeros(spec.dims, dtype=bool)
        if inter is not None and params.beta_inter > 0:
            self.d = np.ascontiguousarray(inter.d.values, dtype=np.float64)
        else:
            self.d = np.zeros(spec.dims)
        self.diagA = regularizer_diagonal(spec.dims)
        self.floor = max(1e-12 * float(self.W.max(initial=0.0)), 1e-300)

    def _check(self, u):
        u = _as_field(u)
        if u.shape != self.spec.dims:
            raise ShapeMismatch(f"field shape {u.shape} does not match grid {self.spec.dims}")
        return u

    def value(self, u) -> float:
        u = self._check(u)
        p = self.params
        _, R = regularizer(u)
        total = float(np.sum(self.W * u * u - 2.0 * self.B * u)) + p.alpha * R
        if self.free.any():
            total += p.beta_hull * float(np.sum(np.maximum(0.0, self.h - u[self.free]) ** 2))
        act = self.d > 0
        if act.any():
            total += p.beta_inter * float(np.sum(np.maximum(0.0, self.d[act] - u[act]) ** 2))
        return self.h ** 3 * total

    def gradient(self, u) -> np.ndarray:
        u = self._check(u)
        p = self.params
        Au, _ = regularizer(u)
        g = self.W * u - self.B + p.alpha * Au
        g -= p.beta_hull * self.free * np.maximum(0.0, self.h - u)
        g -= p.beta_inter * (self.d > 0) * np.maximum(0.0, self.d - u)
        return 2.0 * self.h ** 3 * g

    def diagonal(self, u) -> np.ndarray:
        """Diagonal of the (lagged active-set) Hessian, divided by 2 h^3."""
        u = self._check(u)
        p = self.params
        H = self.W + p.alpha * self.diagA
        H = H + p.beta_hull * (self.free & (u < self.h)) + p.beta_inter * ((self.d > 0) & (u < self.d))
        return np.maximum(H, self.floor)

    def spectral_bound(self) -> float:
        """Gershgorin bound on the spectrum of the Jacobi-preconditioned Hessian."""
        p = self.params
        rows = self.W + p.alpha * regularizer_abs_rowsum(self.spec.dims)
        rows = rows + p.beta_hull * self.free + p.beta_inter * (self.d > 0)
        diag = np.maximum(self.W + p.alpha * self.diagA, self.floor)
        return max(float((rows / diag).max()), 1.0)

    def sweep(self, u, omega: float) -> np.ndarray:
        """One simultaneous Jacobi update ``u - omega * g / H`` of every voxel."""
        u = self._check(u)
        Au, _ = regularizer(u)
        out = np.empty_like(u)
        p = self.params
        _sweep(u, Au, self.W, self.B, self.free, self.d, self.diagA, p.alpha,
               p.beta_hull, p.beta_inter, self.h, float(omega), self.floor, out)
        return out


def energy_value(u, df: DataField, hull, inter, params: EnergyParams) -> float:
    return DiscreteEnergy(df, params, hull, inter).value(u)


def energy_gradient(u, df: DataField, hull, inter, params: EnergyParams) -> np.ndarray:
    return DiscreteEnergy(df, params, hull, inter).gradient(u)
