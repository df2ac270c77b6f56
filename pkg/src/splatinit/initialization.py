"""Initial point clouds for a splat scene and their conversion into primitives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from splatinit.geometry import Camera, DomainError, camera_bbox
from splatinit.splat import SH_C0, GaussianScene

log = logging.getLogger(__name__)

STRATEGIES = ("bbox_multiple", "constant_box", "point_cloud")
MIN_SCALE = 1e-4


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) < 1:
            raise DomainError("point cloud must contain at least one point")
        if len(self.colors) != len(self.positions):
            raise DomainError("positions and colors differ in length")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("point positions must be finite")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise DomainError("point colors must lie in [0, 1]")

    def __len__(self):
        return len(self.positions)


@dataclass
class InitConfig:
    strategy: str = "point_cloud"
    multiplier: float = 3.0
    extent: float = 24.0
    n_points: int = 50_000
    seed: int = 0
    color_mode: str = "random"  # or "gray"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DomainError(f"unknown init strategy {self.strategy!r}")
        if self.multiplier <= 0 or self.extent <= 0 or self.n_points < 1:
            raise DomainError("init needs multiplier > 0, extent > 0 and n_points >= 1")


def _colors(rng, n, mode):
    if mode == "gray":
        return np.full((n, 3), 0.5)
    return rng.random((n, 3))


def bbox_random_init(cameras: list[Camera], multiplier: float, n: int, seed: int, color_mode: str = "random") -> PointCloud:
    """Uniform points in a cube around the camera centers.

    The cube is centered on the camera bounding box and its side is
    ``multiplier`` times the box's largest side.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    box = camera_bbox(cameras)
    side = multiplier * float(box.extent.max())
    if side <= 0.0:
        log.warning("camera bounding box is degenerate; falling back to a unit cube")
        side = 1.0
    rng = np.random.default_rng(seed)
    pos = box.center + (rng.random((n, 3)) - 0.5) * side
    return PointCloud(pos, _colors(rng, n, color_mode))


def constant_box_init(extent: float, n: int, seed: int, color_mode: str = "random") -> PointCloud:
    """Uniform points in the origin-centered cube of side ``extent``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pos = (rng.random((n, 3)) - 0.5) * extent
    return PointCloud(pos, _colors(rng, n, color_mode))


def scene_from_point_cloud(
    pc: PointCloud,
    scene_extent: float | None = None,
    opacity: float = 0.1,
    background=(0.0, 0.0, 0.0),
    sh_degree: int = 0,
) -> GaussianScene:
    """One isotropic primitive per point, sized by the mean distance to its 3 nearest neighbors.

    Scales are clamped to ``[1e-4, scene_extent]``; the default extent is the
    diagonal of the cloud's bounding box, which no neighbor distance can exceed.
    """
    n = len(pc)
    if n < 4:
        raise DomainError("scene_from_point_cloud needs at least 4 points")
    if scene_extent is None:
        scene_extent = float(np.linalg.norm(np.ptp(pc.positions, axis=0)))
    tree = cKDTree(pc.positions)
    dist, _ = tree.query(pc.positions, k=4)
    mean_nn = dist[:, 1:].mean(axis=1)
    scale = np.clip(mean_nn, MIN_SCALE, max(scene_extent, MIN_SCALE))
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = (pc.colors - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(
        means=pc.positions.copy(),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=quats,
        opacity_logits=np.full(n, np.log(opacity / (1.0 - opacity))),
        sh=sh,
        background=background,
        sh_degree=sh_degree,
    )


def make_point_cloud(config: InitConfig, cameras: list[Camera], field=None, n_samples: int = 128) -> PointCloud:
    """Dispatch on ``config.strategy``; the point_cloud strategy samples ``field``."""
    if config.strategy == "bbox_multiple":
        return bbox_random_init(cameras, config.multiplier, config.n_points, config.seed, config.color_mode)
    if config.strategy == "constant_box":
        return constant_box_init(config.extent, config.n_points, config.seed, config.color_mode)
    if field is None:
        raise DomainError("point_cloud init requires a trained field")
    from splatinit.volfield import sample_point_cloud

    return sample_point_cloud(field, cameras, config.n_points, config.seed, n_samples=n_samples)
