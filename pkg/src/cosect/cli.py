"""Command line entry point: synth, optimize, extract, evaluate, pipeline."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .energy import EnergyParams
from .errors import CosectError
from .evaluation import evaluate
from .mesh import TriMesh, load_mesh, marching_cubes, save_mesh
from .pipeline import VARIANTS, PipelineConfig, run_pipeline
from .scene import attach_points, load_sequence
from .solver import SceneFlags, optimize_incremental, optimize_scene
from .synthcam import box_slide_scene, load_scene, render_sequence
from .voxgrid import ScalarGrid, load_volume, save_volume

log = logging.getLogger("cosect")


def thread_count() -> int:
    """Worker cap from COSECT_THREADS (default: all cores)."""
    raw = os.environ.get("COSECT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _apply_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _params(args) -> EnergyParams:
    p = EnergyParams()
    over = {k: getattr(args, k) for k in ("alpha", "beta_hull", "beta_inter") if getattr(args, k, None) is not None}
    return replace(p, **over)


def _scene(args):
    scene = load_scene(args.scene) if args.scene else box_slide_scene(
        background_resolution=args.background_resolution or 256)
    if args.scene and args.background_resolution and scene.background_box:
        lo, side, _ = scene.background_box
        scene.background_box = (lo, side, args.background_resolution)
    if getattr(args, "noise_std", None) is not None:
        scene.noise_std = args.noise_std
    if getattr(args, "soft_assoc", False):
        scene.soft_assoc = True
    return scene


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    render_sequence(_scene(args), args.out, threads=thread_count())
    print(f"wrote sequence to {args.out}")
    return 0


def cmd_optimize(args) -> int:
    keyframes, models = load_sequence(
        args.sequence, keyframe_stride=args.keyframe_stride,
        object_resolution=args.object_resolution, background_resolution=args.background_resolution,
    )
    attach_points(models, keyframes)
    params = _params(args)
    flags = SceneFlags(hull=not args.no_hull, inter=not args.no_inter)
    if args.incremental:
        history = []
        result = optimize_incremental(models, keyframes, args.batches, params, flags, history)
        reports = history[-1]
    else:
        reports = {}
        result = optimize_scene(models, keyframes, params, flags, reports=reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for m in result:
        save_volume(out / f"obj{m.id}.csvf", m.sdf)
        save_volume(out / f"obj{m.id}.hull.csvb", m.hull)
        lines.append(reports[m.id].line(f"obj{m.id}"))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_extract(args) -> int:
    vol = load_volume(args.volume)
    if not isinstance(vol, ScalarGrid):
        raise CosectError(f"{args.volume}: not a scalar volume")
    m = marching_cubes(vol, args.iso)
    save_mesh(args.out, m)
    print(f"{len(m.vertices)} vertices {len(m.triangles)} triangles")
    return 0


def cmd_evaluate(args) -> int:
    recon = load_mesh(args.recon)
    gt = load_mesh(args.gt)
    res = evaluate(recon, gt, args.samples, args.seed, per_vertex=bool(args.color_out))
    print(res.line())
    if args.color_out:
        save_mesh(args.color_out, TriMesh(recon.vertices, recon.triangles, res.per_vertex_distance))
    return 0


def cmd_pipeline(args) -> int:
    out = Path(args.out)
    sequence = args.sequence
    if sequence is None:
        sequence = out / "sequence"
        render_sequence(_scene(args), sequence, threads=thread_count())
    config = PipelineConfig(
        sequence=sequence, output=out, params=_params(args),
        variants=tuple(args.variants.split(",")) if args.variants else tuple(VARIANTS),
        keyframe_stride=args.keyframe_stride, samples=args.samples, seed=args.seed,
        object_resolution=args.object_resolution, background_resolution=args.background_resolution,
    )
    run_pipeline(config)
    print((out / "ablation.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cosect", description="Shape completion with free-space and intersection constraints.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def energy_opts(p):
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta-hull", type=float)
        p.add_argument("--beta-inter", type=float)
        p.add_argument("--keyframe-stride", type=int, default=10)
        p.add_argument("--object-resolution", type=int, default=64)
        p.add_argument("--background-resolution", type=int)

    def scene_opts(p):
        p.add_argument("--scene", help="TOML scene description (default: box-slide fixture)")

    p = sub.add_parser("synth", help="render a synthetic sequence")
    scene_opts(p)
    p.add_argument("--background-resolution", type=int)
    p.add_argument("--noise-std", type=float, help="depth noise standard deviation, meters")
    p.add_argument("--soft-assoc", action="store_true", help="lower association weights near silhouettes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="optimize all volumes of a sequence")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-hull", action="store_true")
    p.add_argument("--no-inter", action="store_true")
    p.add_argument("--incremental", action="store_true")
    p.add_argument("--batches", type=int, default=10)
    energy_opts(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("extract", help="mesh the zero level set of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iso", type=float, default=0.0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="accuracy and completeness against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--color-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="synthesize (optional), run all variants and write ablation.txt")
    p.add_argument("--sequence")
    scene_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help=f"comma separated subset of {','.join(VARIANTS)}")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=7)
    energy_opts(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_threads(thread_count())
    try:
        return args.func(args)
    except (CosectError, OSError, ValueError) as e:
        print(f"cosect {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
