"""Held-out PSNR of the voxel field for a grid of total-variation weights.

    python scripts/field_sweep.py --scene spheres --tv 0 0 --tv 1e-2 1e-1
"""

import argparse
import time

import numpy as np

from splatinit.metrics import psnr
from splatinit.scenes import BOUNDS, make_toy_scene
from splatinit.volfield import VoxelField, render_image, train_field


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scene", default="spheres")
    p.add_argument("--spacing", type=float, default=0.2)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tv", type=float, nargs=2, action="append", metavar=("DENSITY", "COLOR"))
    args = p.parse_args()

    ds, _ = make_toy_scene(args.scene)
    res = tuple(np.round(BOUNDS.extent / args.spacing).astype(int) + 1)
    for tvd, tvc in args.tv or [(0.0, 0.0), (1e-2, 1e-1)]:
        f0 = VoxelField(BOUNDS, np.full(res, 0.05), np.full(res + (3,), 0.5))
        start = time.perf_counter()
        f = train_field(f0, ds, args.iters, tv_density=tvd, tv_color=tvc, n_samples=128)
        ps = [psnr(np.clip(render_image(f, c, 128)[0], 0, 1), im) for c, im in zip(ds.test_cameras, ds.test_images)]
        print(f"tv {tvd:g}/{tvc:g}: test PSNR {np.mean(ps):.2f} dB in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
