"""How well does one-hot label resampling keep the volume of digital spheres?

For several radii and random sub-voxel centres, resample a sphere 1.0 -> t mm
and back, and report the volume ratio after the first step and the voxel
agreement after the round trip. Also compares against nearest-neighbour.

    python3 scripts/resample_volume_study.py --trials 10
"""
import argparse

import numpy as np

from uhfsegkit.grid import VoxelGrid
from uhfsegkit.labels import FS35, LabelMap
from uhfsegkit.resample import ResampleSpec, resample_labels


def sphere(n: int, r: float, centre) -> np.ndarray:
    x, y, z = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    return (((x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2) <= r * r).astype(np.uint16) * 17


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--radii", type=float, nargs="+", default=[3.0, 5.0, 10.0, 15.0])
    ap.add_argument("--target", type=float, default=0.8)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)

    print(f"{'radius':>6} {'mode':>15} {'ratio min':>10} {'ratio max':>10} {'round-trip agree':>17}")
    for r in a.radii:
        n = int(2 * r + 8)
        for mode in ("one-hot-linear", "nearest"):
            ratios, agree = [], []
            for _ in range(a.trials):
                centre = (n - 1) / 2 + rng.uniform(-0.5, 0.5, 3)
                src = LabelMap(VoxelGrid(sphere(n, r, centre), np.eye(4)), FS35)
                up = resample_labels(src, ResampleSpec(target_spacing=(a.target,) * 3, label_mode=mode))
                back = resample_labels(up, ResampleSpec.like(src.grid, label_mode=mode))
                v_in = np.count_nonzero(src.data)
                v_out = np.count_nonzero(up.data) * a.target**3
                ratios.append(v_out / v_in)
                fg = (np.asarray(src.data) > 0) | (np.asarray(back.data) > 0)
                agree.append(np.mean(np.asarray(src.data)[fg] == np.asarray(back.data)[fg]))
            print(f"{r:6.1f} {mode:>15} {min(ratios):10.4f} {max(ratios):10.4f} {np.mean(agree):17.4f}")


if __name__ == "__main__":
    main()
