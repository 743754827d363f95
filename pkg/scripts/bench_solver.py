"""Time the cyclic and damped Jacobi schedules on a synthetic plane at several resolutions."""
import argparse
import time

import numpy as np

from cosect.energy import EnergyParams, accumulate_data
from cosect.scene import PointSet
from cosect.solver import coarse_to_fine_init, initial_guess, optimize_volume
from cosect.voxgrid import GridSpec


def plane(n_side: int, spacing: float) -> PointSet:
    normal = np.array([0.2, -0.1, 1.0])
    normal /= np.linalg.norm(normal)
    t1 = np.cross(normal, [1.0, 0, 0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    s = (np.arange(n_side) - (n_side - 1) / 2) * spacing
    g1, g2 = np.meshgrid(s, s, indexing="ij")
    p = 0.03 * normal + g1.reshape(-1, 1) * t1 + g2.reshape(-1, 1) * t2
    return PointSet(p, np.tile(normal, (len(p), 1)), np.ones(len(p)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolutions", default="32,64,128")
    ap.add_argument("--max-cycles", type=int, default=200)
    args = ap.parse_args()
    params = EnergyParams(max_cycles=args.max_cycles)
    print(f"{'n':>5} {'init':<6} {'schedule':<9} {'cycles':>6} {'seconds':>8} {'energy':>14}")
    for n in (int(v) for v in args.resolutions.split(",")):
        spec = GridSpec.cube((-0.5, -0.5, -0.5), 1.0, n)
        pts = plane(int(0.9 / (spec.voxel_size / 2)), spec.voxel_size / 2)
        df = accumulate_data(pts, spec, params)
        starts = {"guess": initial_guess(pts, df), "c2f": coarse_to_fine_init(pts, spec, params)}
        for init, u0 in starts.items():
            for name, schedule in (("cyclic", "cyclic"), ("damped", [0.66])):
                t = time.perf_counter()
                _, rep = optimize_volume(u0, df, None, None, params, schedule=schedule)
                dt = time.perf_counter() - t
                print(f"{n:>5} {init:<6} {name:<9} {rep.cycles_run:>6} {dt:>8.2f} {rep.final_energy:>14.6e}")


if __name__ == "__main__":
    main()
