"""Initialization-ordering and depth-distillation experiments with a per-group summary.

    python scripts/run_matrix.py --out runs/matrix --seeds 0 1 2
"""

import argparse
import logging
from collections import defaultdict

import numpy as np

from splatinit.bench import ExperimentSpec, read_results, run_experiments
from splatinit.initialization import InitConfig


def build_specs(scenes, seeds, n_points, field_iters, splat_iters, depth_scene):
    specs = []
    for scene in scenes:
        for seed in seeds:
            inits = [
                InitConfig("point_cloud", n_points=n_points, seed=seed),
                InitConfig("constant_box", n_points=n_points, seed=seed),
                InitConfig("bbox_multiple", multiplier=1.5, n_points=n_points, seed=seed),
            ]
            for init in inits:
                fi = field_iters if init.strategy == "point_cloud" else 0
                specs.append(ExperimentSpec(scene, init, fi, False, splat_iters, seed))
            if scene == depth_scene:
                specs.append(ExperimentSpec(scene, inits[0], field_iters, True, splat_iters, seed))
    return specs


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", nargs="+", default=["spheres", "reflective_floor_analog"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--n-points", type=int, default=50_000)
    p.add_argument("--field-iters", type=int, default=2000)
    p.add_argument("--splat-iters", type=int, default=3000)
    p.add_argument("--depth-scene", default="reflective_floor_analog")
    p.add_argument("--deterministic", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    specs = build_specs(args.scenes, args.seeds, args.n_points, args.field_iters, args.splat_iters, args.depth_scene)
    rows = read_results(run_experiments(specs, args.out, deterministic=args.deterministic))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["scene"], r["init"], r["depth_loss"])].append(float(r["test_psnr"]))
    print(f"{'scene':26s} {'init':12s} depth  mean PSNR  per seed")
    for (scene, init, depth), vals in sorted(groups.items()):
        print(f"{scene:26s} {init:12s} {depth:5s}  {np.mean(vals):8.3f}   " + " ".join(f"{v:.3f}" for v in vals))


if __name__ == "__main__":
    main()
