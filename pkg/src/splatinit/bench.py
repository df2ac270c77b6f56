"""Experiment matrix: scene -> (field) -> init cloud -> splat training -> test metrics.

Datasets and trained fields are cached on disk under ``out_dir/cache`` and always
re-read from their files, so a cold run and a warm run see bit-identical inputs.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from splatinit.dataset import Dataset, load_dataset, save_dataset, save_image
from splatinit.distill import DistillConfig, evaluate, train_splat, write_metrics_csv
from splatinit.geometry import DomainError
from splatinit.initialization import InitConfig, make_point_cloud, scene_from_point_cloud
from splatinit.ply import write_ply
from splatinit.scenes import BOUNDS, make_toy_scene
from splatinit.volfield import VoxelField, _inverse_cdf, load_field, ray_profiles, save_field, train_field

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "scene", "init", "field_iters", "depth_loss", "seed",
    "test_psnr", "test_ssim", "n_primitives", "wall_seconds", "status",
)


@dataclass
class FieldConfig:
    spacing: float = 0.2
    init_density: float = 0.05
    lr: float = 0.1
    lr_final: float = 0.01
    rays_per_iter: int = 1024
    n_samples: int = 128
    tv_density: float = 1e-2
    tv_color: float = 1e-1
    seed: int = 0


@dataclass
class ExperimentSpec:
    scene: str
    init: InitConfig
    field_iters: int = 2000
    depth_loss: bool = False
    splat_iters: int = 3000
    seed: int = 0
    resolution: int = 128
    n_views: int = 20
    scene_seed: int = 0
    lambda_init: float = 0.9
    decay: float = 0.9
    decay_step: int = 100
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        if self.field_iters < 0 or self.splat_iters < 0:
            raise DomainError("iteration counts must be >= 0")
        if self.depth_loss and self.field_iters == 0:
            raise DomainError("depth loss requires a trained field (field_iters > 0)")
        if self.init.strategy == "point_cloud" and self.field_iters == 0:
            raise DomainError("field-sampled init requires field_iters > 0")

    @property
    def init_label(self) -> str:
        return init_label(self.init)

    @property
    def tag(self) -> str:
        return f"{self.scene}_{self.init_label}_f{self.field_iters}_d{int(self.depth_loss)}_s{self.seed}"


def init_label(cfg: InitConfig) -> str:
    if cfg.strategy == "bbox_multiple":
        return f"bbox{cfg.multiplier:g}x"
    if cfg.strategy == "constant_box":
        return f"constant{cfg.extent:g}"
    return "field"


def default_matrix(
    scenes=("spheres", "reflective_floor_analog"),
    seeds=(0,),
    field_iters: int = 2000,
    splat_iters: int = 3000,
    n_points: int = 50_000,
    resolution: int = 128,
    n_views: int = 20,
    depth_modes=(False, True),
) -> list[ExperimentSpec]:
    """Up to eight rows per scene and seed: {1.5x bbox, 3x bbox, constant box, field} x depth modes."""
    specs = []
    for scene in scenes:
        for seed in seeds:
            inits = [
                InitConfig("bbox_multiple", multiplier=1.5, n_points=n_points, seed=seed),
                InitConfig("bbox_multiple", multiplier=3.0, n_points=n_points, seed=seed),
                InitConfig("constant_box", n_points=n_points, seed=seed),
                InitConfig("point_cloud", n_points=n_points, seed=seed),
            ]
            for depth in depth_modes:
                for init in inits:
                    needs_field = depth or init.strategy == "point_cloud"
                    specs.append(ExperimentSpec(
                        scene, init, field_iters if needs_field else 0, depth, splat_iters, seed,
                        resolution=resolution, n_views=n_views,
                    ))
    return specs


# --------------------------------------------------------------------------- cache


def cached_dataset(spec: ExperimentSpec, cache: Path) -> Dataset:
    root = cache / f"{spec.scene}_r{spec.resolution}_v{spec.n_views}_s{spec.scene_seed}"
    if not (root / "cameras.json").exists():
        ds, _ = make_toy_scene(spec.scene, spec.resolution, spec.n_views, spec.scene_seed)
        save_dataset(ds, root)
    return load_dataset(root)


def cached_field(spec: ExperimentSpec, dataset: Dataset, cache: Path) -> VoxelField | None:
    if spec.field_iters == 0:
        return None
    fc = spec.field
    path = cache / (
        f"{spec.scene}_r{spec.resolution}_v{spec.n_views}_s{spec.scene_seed}"
        f"_field_i{spec.field_iters}_h{fc.spacing:g}_fs{fc.seed}.vfld"
    )
    if not path.exists():
        res = tuple(int(r) for r in np.maximum(np.round(BOUNDS.extent / fc.spacing).astype(int) + 1, 2))
        f0 = VoxelField(BOUNDS, np.full(res, fc.init_density), np.full(res + (3,), 0.5))
        trained = train_field(
            f0, dataset, spec.field_iters, fc.lr, fc.rays_per_iter, fc.seed, fc.n_samples,
            lr_final=fc.lr_final, tv_density=fc.tv_density, tv_color=fc.tv_color,
        )
        tmp = path.with_suffix(".tmp")
        save_field(trained, tmp)
        os.replace(tmp, path)
    return load_field(path)


# --------------------------------------------------------------------------- runs


def run_one(spec: ExperimentSpec, out_dir, cache_dir=None) -> dict:
    """Run one spec end to end; writes metrics.csv, init.ply and test renders under out_dir/<tag>."""
    out_dir = Path(out_dir)
    cache = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    run_dir = out_dir / spec.tag
    (run_dir / "renders").mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ds = cached_dataset(spec, cache)
    fld = cached_field(spec, ds, cache)

    init = spec.init
    pc = make_point_cloud(init, ds.train_cameras, fld)
    write_ply(pc, run_dir / "init.ply")
    scene = scene_from_point_cloud(pc)

    config = DistillConfig(
        lambda_init=spec.lambda_init if spec.depth_loss else 0.0,
        decay=spec.decay, decay_step=spec.decay_step,
        total_iters=spec.splat_iters, seed=spec.seed,
    )
    result = train_splat(scene, ds, fld if spec.depth_loss else None, config)
    write_metrics_csv(result.log, run_dir / "metrics.csv")
    ev = evaluate(result.scene, ds.test_cameras, ds.test_images)
    for k, img in zip(ds.test_idx, ev["renders"]):
        save_image(run_dir / "renders" / f"test_{k:03d}.png", img)
    return {
        "scene": spec.scene, "init": spec.init_label, "field_iters": spec.field_iters,
        "depth_loss": int(spec.depth_loss), "seed": spec.seed,
        "test_psnr": ev["psnr"], "test_ssim": ev["ssim"], "n_primitives": len(result.scene),
        "wall_seconds": time.perf_counter() - start, "status": "ok",
    }


def _safe_run(args) -> dict:
    spec, out_dir, cache_dir = args
    start = time.perf_counter()
    try:
        return run_one(spec, out_dir, cache_dir)
    except Exception as exc:  # recorded in the CSV; the matrix keeps going
        log.error("spec %s failed:\n%s", spec.tag, traceback.format_exc())
        return {
            "scene": spec.scene, "init": spec.init_label, "field_iters": spec.field_iters,
            "depth_loss": int(spec.depth_loss), "seed": spec.seed,
            "test_psnr": math.nan, "test_ssim": math.nan, "n_primitives": 0,
            "wall_seconds": time.perf_counter() - start,
            "status": f"failed: {type(exc).__name__}: {exc}".replace("\n", " "),
        }


def worker_count(deterministic: bool = False) -> int:
    if deterministic:
        return 1
    env = os.environ.get("SPLATINIT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _format(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_format(r[c]) for c in RESULT_COLUMNS])


def run_experiments(specs: list[ExperimentSpec], out_dir, deterministic: bool = False, cache_dir=None) -> Path:
    """Execute every spec and write ``out_dir/results.csv`` (one row per spec, input order).

    Shared datasets and fields are prepared serially first; the specs themselves
    then run in up to ``worker_count()`` processes. Every computation is
    single-threaded and seeded, so results do not depend on the worker count.
    """
    if not specs:
        raise DomainError("no specs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        try:
            cached_field(spec, cached_dataset(spec, cache), cache)
        except Exception:
            log.error("preparing inputs for %s failed:\n%s", spec.tag, traceback.format_exc())
    jobs = [(s, out_dir, cache) for s in specs]
    n = min(worker_count(deterministic), len(jobs))
    if n > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n) as pool:
            rows = list(pool.map(_safe_run, jobs))
    else:
        rows = [_safe_run(j) for j in jobs]
    path = out_dir / "results.csv"
    write_results(rows, path)
    return path


# --------------------------------------------------------------------------- coverage


def surface_voxels(gt: VoxelField, cameras, spacing: float, n_samples: int = 512, min_alpha: float = 0.99) -> np.ndarray:
    """Centers of the voxels (edge ``spacing``) holding a ground-truth surface point seen in training.

    Each sufficiently opaque pixel ray contributes its median termination point,
    which sits on the first surface it hits rather than between silhouettes.
    """
    lo = gt.bounds.lo
    keys = []
    for cam in cameras:
        o, d = cam.rays()
        ts, w, cdf = ray_profiles(gt, o, d, cam.near, cam.far, n_samples)
        hit = cdf[:, -1] >= min_alpha
        t = _inverse_cdf(ts[hit], w[hit], cdf[hit], np.full(int(hit.sum()), 0.5))
        pts = o[hit] + t[:, None] * d[hit]
        keys.append(np.floor((pts - lo) / spacing).astype(np.int64))
    idx = np.unique(np.concatenate(keys), axis=0)
    return lo + (idx + 0.5) * spacing


def surface_coverage(points: np.ndarray, voxel_centers: np.ndarray, radius: float) -> float:
    """Fraction of voxel centers with at least one point within ``radius``."""
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(points).query(voxel_centers, distance_upper_bound=radius)
    return float(np.mean(np.isfinite(dist)))


def read_results(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
