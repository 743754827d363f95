"""End-to-end runs: ablation variants, the projective TSDF baseline and the table writer."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .constraints import _chunks
from .energy import EnergyParams
from .evaluation import evaluate
from .mesh import TriMesh, load_mesh, marching_cubes, save_mesh
from .scene import attach_points, load_sequence
from .solver import SceneFlags, optimize_scene
from .voxgrid import ScalarGrid

log = logging.getLogger(__name__)

# method name -> optimizer switches; "tsdf" is the fusion baseline
VARIANTS: Dict[str, Optional[SceneFlags]] = {
    "tsdf": None,
    "baseline": SceneFlags(hull=False, inter=False),
    "baseline+hull": SceneFlags(hull=True, inter=False),
    "baseline+inter": SceneFlags(hull=False, inter=True),
    "full": SceneFlags(hull=True, inter=True),
}


@dataclass
class PipelineConfig:
    sequence: Path
    output: Path
    params: EnergyParams = field(default_factory=EnergyParams)
    variants: Sequence[str] = tuple(VARIANTS)
    keyframe_stride: int = 10
    samples: int = 10000
    seed: int = 7
    object_resolution: int = 64
    background_resolution: Optional[int] = None
    max_keyframes: Optional[int] = None

    def __post_init__(self):
        self.sequence = Path(self.sequence)
        self.output = Path(self.output)
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")


# ---------------------------------------------------------------------------
# TSDF baseline

@dataclass
class FusedVolume:
    values: ScalarGrid
    weights: ScalarGrid

    def mesh(self) -> TriMesh:
        return marching_cubes(self.values, mask=self.weights.values > 0)


def fuse_tsdf(model, keyframes, truncation: Optional[float] = None, max_weight: float = 64.0) -> FusedVolume:
    """Projective weighted-average TSDF of ``model`` over the keyframes' masked depth."""
    spec = model.spec
    trunc = 4.0 * spec.voxel_size if truncation is None else truncation
    tsdf = np.full(spec.dims, trunc)
    weight = np.zeros(spec.dims)
    for kf in keyframes:
        if not (model.is_background or kf.timestep in model.trajectory):
            continue
        cam_from_local = kf.camera_pose.inverse() @ model.pose_at(kf.timestep)
        H, W = kf.depth.shape
        for sl, pts in _chunks(spec):
            col, row, z = kf.intrinsics.project(cam_from_local.apply(pts))
            ok = z > 0
            c = np.full(len(pts), -1, dtype=np.int64)
            r = np.full(len(pts), -1, dtype=np.int64)
            c[ok] = np.floor(col[ok] + 0.5).astype(np.int64)
            r[ok] = np.floor(row[ok] + 0.5).astype(np.int64)
            ok &= (c >= 0) & (c < W) & (r >= 0) & (r < H)
            meas = np.zeros(len(pts))
            meas[ok] = kf.depth[r[ok], c[ok]]
            ok &= meas > 0
            ok[ok] &= kf.object_mask[r[ok], c[ok]] == model.id
            sdf = meas - z
            ok &= sdf >= -trunc
            t_blk = tsdf[sl].reshape(-1)
            w_blk = weight[sl].reshape(-1)
            val = np.minimum(sdf[ok], trunc)
            w_old = w_blk[ok]
            t_blk[ok] = (t_blk[ok] * w_old + val) / (w_old + 1.0)
            w_blk[ok] = np.minimum(w_old + 1.0, max_weight)
            tsdf[sl] = t_blk.reshape(tsdf[sl].shape)
            weight[sl] = w_blk.reshape(weight[sl].shape)
    return FusedVolume(ScalarGrid(spec, tsdf), ScalarGrid(spec, weight))


def tsdf_baseline(models, keyframes) -> Dict[int, FusedVolume]:
    return {m.id: fuse_tsdf(m, keyframes) for m in models}


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationRow:
    object_id: int
    method: str
    accuracy: float
    completeness: float

    def line(self) -> str:
        return f"{self.object_id}\t{self.method}\t{self.accuracy:.8g}\t{self.completeness:.8g}"


def write_table(path, rows) -> None:
    lines = ["object\tmethod\taccuracy\tcompleteness"] + [r.line() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        oid, method, acc, comp = line.split("\t")
        rows.append(AblationRow(int(oid), method, float(acc), float(comp)))
    return rows


def load_inputs(config: PipelineConfig):
    keyframes, models = load_sequence(
        config.sequence,
        keyframe_stride=config.keyframe_stride,
        object_resolution=config.object_resolution,
        background_resolution=config.background_resolution,
        max_keyframes=config.max_keyframes,
    )
    attach_points(models, keyframes)
    return keyframes, models


def variant_meshes(method: str, models, keyframes, params: EnergyParams) -> Dict[int, TriMesh]:
    flags = VARIANTS[method]
    if flags is None:
        return {oid: fused.mesh() for oid, fused in tsdf_baseline(
            [m for m in models if not m.is_background], keyframes).items()}
    fresh = [replace(m, sdf=None) for m in models]
    out = optimize_scene(fresh, keyframes, params, flags)
    return {m.id: marching_cubes(m.sdf) for m in out if not m.is_background}


def run_pipeline(config: PipelineConfig) -> list:
    """Run every configured variant, write meshes and ``ablation.txt``; returns the table rows."""
    keyframes, models = load_inputs(config)
    out_dir = config.output
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_dir = config.sequence / "gt"
    rows = []
    for method in config.variants:
        start = time.perf_counter()
        meshes = variant_meshes(method, models, keyframes, config.params)
        log.info("%s done in %.1f s", method, time.perf_counter() - start)
        for oid in sorted(meshes):
            m = meshes[oid]
            save_mesh(out_dir / f"obj{oid}.{method}.ply", m)
            gt_path = gt_dir / f"obj{oid}.ply"
            if not gt_path.exists():
                continue
            res = evaluate(m, load_mesh(gt_path), config.samples, config.seed)
            rows.append(AblationRow(oid, method, res.accuracy, res.completeness))
    write_table(out_dir / "ablation.txt", rows)
    return rows
