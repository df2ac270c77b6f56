"""Fraction of ground-truth surface voxels reached by field-sampled and random init clouds.

    python scripts/coverage.py --scene reflective_floor_analog --cache runs/cache
"""

import argparse
from pathlib import Path

from splatinit.bench import ExperimentSpec, cached_dataset, cached_field, surface_coverage, surface_voxels
from splatinit.initialization import InitConfig, make_point_cloud
from splatinit.scenes import make_toy_scene


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scene", default="reflective_floor_analog")
    p.add_argument("--cache", default="runs/cache")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--n-points", type=int, default=50_000)
    p.add_argument("--field-iters", type=int, default=2000)
    p.add_argument("--radius-voxels", type=float, default=2.0)
    args = p.parse_args()

    cache = Path(args.cache)
    cache.mkdir(parents=True, exist_ok=True)
    spec = ExperimentSpec(args.scene, InitConfig("point_cloud", n_points=args.n_points), args.field_iters)
    ds = cached_dataset(spec, cache)
    fld = cached_field(spec, ds, cache)
    _, gt = make_toy_scene(args.scene, 16, 5, spec.scene_seed)
    voxel = spec.field.spacing
    centers = surface_voxels(gt, ds.train_cameras, voxel)
    print(f"{len(centers)} surface voxels of edge {voxel}, radius {args.radius_voxels * voxel:g}")
    for seed in args.seeds:
        for init in (
            InitConfig("point_cloud", n_points=args.n_points, seed=seed),
            InitConfig("bbox_multiple", multiplier=1.5, n_points=args.n_points, seed=seed),
            InitConfig("constant_box", n_points=args.n_points, seed=seed),
        ):
            pts = make_point_cloud(init, ds.train_cameras, fld).positions
            cov = surface_coverage(pts, centers, args.radius_voxels * voxel)
            print(f"seed {seed}  {init.strategy:14s} {cov:.4f}")


if __name__ == "__main__":
    main()
