"""Fast-Jacobi minimization of the volume energy, coarse-to-fine start and scene ordering."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .constraints import HullGrid, InterGrid, carve_free_space, compute_d_inter
from .energy import (
    DataField,
    DiscreteEnergy,
    EnergyParams,
    accumulate_data,
    freeze_free_space,
    remove_foreground_points,
)
from .errors import BadResolution, Divergence
from .voxgrid import GridSpec, ScalarGrid, upsample_split

log = logging.getLogger(__name__)

COARSEST = 32


@dataclass
class SolveReport:
    cycles_run: int
    initial_energy: float
    final_energy: float
    converged: bool
    wall_time: float
    fallback_cycles: int = 0

    def line(self, label="") -> str:
        head = f"{label} " if label else ""
        return (f"{head}cycles {self.cycles_run} initial {self.initial_energy!r} "
                f"final {self.final_energy!r} converged {int(self.converged)} "
                f"wall_time {self.wall_time:.3f}")


def relaxation_schedule(n: int) -> np.ndarray:
    """Cyclic over-relaxation factors 1 / cos^2(pi (2k+1) / (4n+2)), k = 0..n-1, ascending."""
    k = np.arange(n)
    return 1.0 / np.cos(np.pi * (2 * k + 1) / (4 * n + 2)) ** 2


def _steps(energy: DiscreteEnergy, schedule) -> np.ndarray:
    """Per-sweep step sizes: the schedule scaled into the stable range of the operator.

    ``schedule`` is "cyclic", "damped" or an explicit sequence of step sizes.
    """
    if not isinstance(schedule, str):
        return np.asarray(schedule, dtype=np.float64).reshape(-1)
    n = energy.params.cycle_len
    base = 1.0 / energy.spectral_bound()
    if schedule == "cyclic":
        return base * relaxation_schedule(n)
    if schedule == "damped":
        return np.full(n, base)
    raise ValueError(f"unknown schedule {schedule!r}")


def jacobi_sweep(u, energy: DiscreteEnergy, omega: float) -> np.ndarray:
    return energy.sweep(u, omega)


def jacobi_cycle(u, energy: DiscreteEnergy, steps=None, check: bool = True) -> np.ndarray:
    """Run one cycle of sweeps; raises Divergence if the cycle raised the energy."""
    if steps is None:
        steps = _steps(energy, "cyclic")
    u = np.asarray(u, dtype=np.float64)
    before = energy.value(u) if check else None
    for omega in steps:
        u = energy.sweep(u, omega)
    if check:
        after = energy.value(u)
        if after - before > 1e-6 * max(abs(before), 1e-300):
            raise Divergence(f"cycle raised energy from {before!r} to {after!r}")
    return u


def optimize_volume(u0, df: DataField, hull=None, inter=None, params: Optional[EnergyParams] = None,
                    schedule="cyclic"):
    """Minimize the volume energy starting from ``u0``; returns ``(u, SolveReport)``.

    Cycles run until the relative energy decrease of a cycle drops below
    ``params.rel_tol`` or ``params.max_cycles`` is reached. A cyclic cycle
    that raises the energy is retried with constant damped steps; if that
    also fails the solve stops (within tolerance) or raises Divergence.
    """
    params = params or EnergyParams()
    start = time.perf_counter()
    energy = DiscreteEnergy(df, params, hull, inter)
    u = np.asarray(u0.values if isinstance(u0, ScalarGrid) else u0, dtype=np.float64)
    steps = _steps(energy, schedule)
    safe = None
    E0 = E = energy.value(u)
    converged = False
    fallbacks = 0
    cycles = 0
    while cycles < params.max_cycles:
        cycles += 1
        cand = u
        for omega in steps:
            cand = energy.sweep(cand, omega)
        E_new = energy.value(cand)
        if E_new > E:
            fallbacks += 1
            if safe is None:
                safe = _steps(energy, "damped")
            cand = u
            for omega in safe:
                cand = energy.sweep(cand, omega)
            E_new = energy.value(cand)
            if E_new > E:
                if E_new - E > 1e-6 * max(abs(E), 1e-300):
                    raise Divergence(f"energy rose from {E!r} to {E_new!r} in cycle {cycles}")
                converged = True
                break
        decrease = E - E_new
        u, E = cand, E_new
        if decrease <= params.rel_tol * max(abs(E), 1e-300):
            converged = True
            break
    report = SolveReport(cycles, E0, E, converged, time.perf_counter() - start, fallbacks)
    log.debug("optimize_volume %s", report.line())
    return ScalarGrid(df.spec, u), report


# ---------------------------------------------------------------------------
# coarse-to-fine

def pyramid_levels(dims, start: int = COARSEST) -> list:
    """Resolutions visited by the coarse-to-fine scheme, coarsest first."""
    dims = tuple(int(d) for d in dims)
    if len(set(dims)) != 1:
        raise BadResolution(f"coarse-to-fine needs a cubic grid, got {dims}")
    n = dims[0]
    level = min(n, start)
    levels = [level]
    while levels[-1] < n:
        levels.append(levels[-1] * 2)
    if levels[-1] != n:
        raise BadResolution(f"{n} is not {level} times a power of two")
    return levels


def level_spec(target: GridSpec, n: int) -> GridSpec:
    lo, _ = target.bounds()
    return GridSpec.cube(lo, target.voxel_size * target.dims[0], n)


def coarse_to_fine_init(points, target_spec: GridSpec, params: EnergyParams, reports=None) -> ScalarGrid:
    """Initial field at the target resolution from data+regularizer solves on coarser grids.

    Every level below the target is solved without hull or intersection
    penalties and split into eight children to start the next level. The
    returned field has not been optimized at the target level itself.
    """
    levels = pyramid_levels(target_spec.dims)
    if len(levels) == 1:
        df = accumulate_data(points, target_spec, params)
        return ScalarGrid(target_spec, initial_guess(points, df))
    u = None
    for n in levels[:-1]:
        spec = level_spec(target_spec, n)
        df = accumulate_data(points, spec, params)
        u0 = initial_guess(points, df) if u is None else u
        grid, rep = optimize_volume(u0, df, None, None, params)
        if reports is not None:
            reports.append((n, rep))
        u = upsample_split(grid).values
    return ScalarGrid(target_spec, u)


BEHIND_COS = 0.9


def initial_guess(points, df: DataField) -> np.ndarray:
    """Starting field: B/W where data exists, elsewhere the distance to the nearest point.

    The distance is negated only for voxels lying behind that point's surface
    within a narrow cone around the inward normal (cosine above BEHIND_COS).
    Voxels beyond a silhouette edge start outside, so unobserved regions are
    not pre-filled with the extension of the nearest tangent plane.
    """
    W = df.W.values.astype(np.float64)
    B = df.B.values.astype(np.float64)
    has = W > 0
    u = np.where(has, B / np.where(has, W, 1.0), 0.0)
    if len(points) and not has.all():
        x = df.spec.centers()[~has]
        r, i = cKDTree(points.p).query(x)
        t = np.einsum("ij,ij->i", x - points.p[i], points.n[i])
        u[~has] = np.where(t < -BEHIND_COS * r, t, r)
    return u


# ---------------------------------------------------------------------------
# scene orchestration

@dataclass
class SceneFlags:
    hull: bool = True
    inter: bool = True
    coarse_to_fine: bool = True


def carve_hull(model, keyframes) -> HullGrid:
    hull = HullGrid.all_unseen(model.spec)
    for kf in keyframes:
        if model.is_background or kf.timestep in model.trajectory:
            hull = carve_free_space(hull, kf, model.pose_at(kf.timestep))
    return hull


def optimize_scene(models, keyframes, params: Optional[EnergyParams] = None,
                   flags: Optional[SceneFlags] = None, trace=None, reports=None):
    """Optimize every model's SDF: background first, then objects against it.

    Models that already carry an SDF are warm-started from it at full
    resolution; others are initialized coarse-to-fine. Returns new model
    instances with ``sdf`` and ``hull`` set. ``trace`` (a list) receives
    ``(event, model_id)`` tuples in execution order; ``reports`` (a dict)
    receives the SolveReport of each model.
    """
    params = params or EnergyParams()
    flags = flags or SceneFlags()
    trace = trace if trace is not None else []
    reports = reports if reports is not None else {}
    models = remove_foreground_points(models)
    timesteps = [kf.timestep for kf in keyframes]

    prepared = {}
    for m in models:
        pts = m.all_points()
        hull = carve_hull(m, keyframes)
        df = freeze_free_space(accumulate_data(pts, m.spec, params), hull)
        prepared[m.id] = (pts, hull, df)

    def solve(m, inter):
        pts, hull, df = prepared[m.id]
        if m.sdf is not None and m.sdf.spec == m.spec:
            u0 = m.sdf
        elif flags.coarse_to_fine:
            u0 = coarse_to_fine_init(pts, m.spec, params)
        else:
            u0 = ScalarGrid(m.spec, initial_guess(pts, df))
        trace.append(("optimize", m.id))
        u, rep = optimize_volume(u0, df, hull if flags.hull else None, inter, params)
        reports[m.id] = rep
        return replace(m, sdf=u, hull=hull.unseen, inter=None if inter is None else inter.d)

    out = {}
    background = [m for m in models if m.is_background]
    for m in background:
        out[m.id] = solve(m, None)
    for m in models:
        if m.is_background:
            continue
        inter = None
        if flags.inter:
            trace.append(("d_inter", m.id))
            others = [out.get(p.id, p) for p in models if p.id != m.id]
            inter = compute_d_inter(m, others, timesteps)
        out[m.id] = solve(m, inter)
    return [out[m.id] for m in models]


def keyframe_batches(keyframes, batches: int) -> list:
    """Split keyframes into ``batches`` consecutive groups of near-equal size."""
    if batches < 1:
        raise ValueError("need at least one batch")
    bounds = np.linspace(0, len(keyframes), min(batches, len(keyframes)) + 1).round().astype(int)
    return [list(keyframes[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def optimize_incremental(models, keyframes, batches: int, params: Optional[EnergyParams] = None,
                         flags: Optional[SceneFlags] = None, history=None):
    """Feed keyframes in consecutive batches, warm-starting every round from the last result.

    ``models`` must carry points for all keyframes; each round only sees the
    points of keyframes delivered so far. ``history`` (a list) receives the
    per-round report dicts.
    """
    seen = []
    current = list(models)
    for batch in keyframe_batches(keyframes, batches):
        seen += batch
        steps = {kf.timestep for kf in seen}
        round_models = [
            replace(m, points={t: p for t, p in m.points.items() if t in steps}, sdf=c.sdf)
            for m, c in zip(models, current)
        ]
        reports = {}
        current = optimize_scene(round_models, seen, params, flags, reports=reports)
        if history is not None:
            history.append(reports)
    return current
