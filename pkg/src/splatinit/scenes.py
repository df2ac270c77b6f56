"""Synthetic desk-scale scenes: analytic solids, a ring of inward-looking cameras,
and ground-truth images volume-rendered from a finely voxelized copy of the solids.

Every scene sits inside a textured cylindrical backdrop wall, standing in for
the distant background of unbounded captures; the wall lies outside small
camera-bounding-box initializations. World is z-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from splatinit.dataset import Dataset, quantize
from splatinit.geometry import Box, Camera, DomainError
from splatinit.volfield import VoxelField, render_image

SCENES = ("spheres", "boxes", "reflective_floor_analog")

RING_RADIUS = 3.0
TARGET = np.array([0.0, 0.0, 0.5])
WALL_RADIUS = 10.0
BOUNDS = Box([-10.8, -10.8, -0.6], [10.8, 10.8, 3.8])
GT_SPACING = 0.07
SIGMA_MAX = 60.0
FOV_DEG = 60.0
NEAR, FAR = 0.05, 16.0
GT_SAMPLES = 448


@dataclass
class Solid:
    sdf: Callable[[np.ndarray], np.ndarray]
    color: Callable[[np.ndarray], np.ndarray]


def _sphere(center, radius):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.linalg.norm(p - c, axis=-1) - radius


def _box(center, half):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)

    def sdf(p):
        q = np.abs(p - c) - h
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    return sdf


def _wall(radius, thickness, z0, z1):
    def sdf(p):
        rho = np.hypot(p[..., 0], p[..., 1])
        return np.maximum(np.abs(rho - radius) - 0.5 * thickness, np.maximum(p[..., 2] - z1, z0 - p[..., 2]))

    return sdf


def _disk(radius, z0, z1):
    def sdf(p):
        rho = np.hypot(p[..., 0], p[..., 1])
        zc, hz = 0.5 * (z0 + z1), 0.5 * (z1 - z0)
        return np.maximum(rho - radius, np.abs(p[..., 2] - zc) - hz)

    return sdf


def _striped(base, freq, phase, contrast=0.35):
    base = np.asarray(base, dtype=np.float64)

    def color(p):
        s = np.sin(freq * p[..., 0] + phase[0]) * np.sin(freq * p[..., 1] + phase[1]) * np.sin(freq * p[..., 2] + phase[2])
        return np.clip(base * (1.0 - contrast + contrast * (1.0 + s))[..., None], 0.0, 1.0)

    return color


def _flat(base):
    base = np.asarray(base, dtype=np.float64)
    return lambda p: np.broadcast_to(base, p.shape).copy()


def _wall_color(phase):
    def color(p):
        ang = np.arctan2(p[..., 1], p[..., 0])
        r = 0.55 + 0.35 * np.sin(3.0 * ang + phase)
        g = 0.50 + 0.30 * np.sin(5.0 * ang + 1.3 * p[..., 2] + phase)
        b = 0.45 + 0.30 * np.cos(2.0 * ang - 1.7 * p[..., 2])
        # checker cells about 1.3 x 0.5 units give the far wall parallax cues
        band = 0.8 + 0.2 * np.sign(np.sin(24.0 * ang) * np.sin(6.0 * p[..., 2]))
        return np.clip(np.stack([r, g, b], axis=-1) * band[..., None], 0.0, 1.0)

    return color


def scene_solids(name: str, rng: np.random.Generator) -> list[Solid]:
    phase = rng.uniform(0, 2 * np.pi, 3)
    wall = Solid(_wall(WALL_RADIUS, 0.4, -0.5, 3.0), _wall_color(phase[0]))
    if name == "spheres":
        return [
            wall,
            Solid(_sphere([0.0, 0.0, 0.6], 0.6), _striped([0.9, 0.3, 0.2], 7.0, phase)),
            Solid(_sphere([1.2, 0.4, 0.4], 0.4), _striped([0.2, 0.7, 0.3], 9.0, phase)),
            Solid(_sphere([-0.9, 1.0, 0.5], 0.5), _striped([0.2, 0.4, 0.9], 8.0, phase)),
            Solid(_sphere([-0.6, -1.1, 0.35], 0.35), _striped([0.9, 0.8, 0.2], 10.0, phase)),
            Solid(_sphere([0.7, -0.9, 1.2], 0.3), _striped([0.8, 0.3, 0.8], 11.0, phase)),
        ]
    if name == "boxes":
        return [
            wall,
            Solid(_box([0.0, 0.0, 0.4], [0.5, 0.5, 0.4]), _striped([0.85, 0.45, 0.2], 7.0, phase)),
            Solid(_box([1.1, -0.6, 0.3], [0.3, 0.4, 0.3]), _striped([0.25, 0.6, 0.85], 9.0, phase)),
            Solid(_box([-1.0, 0.8, 0.6], [0.35, 0.3, 0.6]), _striped([0.4, 0.8, 0.3], 8.0, phase)),
            Solid(_box([-0.4, -1.2, 0.2], [0.5, 0.2, 0.2]), _striped([0.9, 0.85, 0.3], 10.0, phase)),
        ]
    if name == "reflective_floor_analog":
        return [
            wall,
            Solid(_disk(WALL_RADIUS - 0.2, -0.3, 0.0), _flat([0.55, 0.6, 0.65])),
            Solid(_sphere([0.0, 0.0, 0.5], 0.5), _striped([0.9, 0.35, 0.25], 8.0, phase)),
            Solid(_box([1.0, 0.7, 0.35], [0.35, 0.35, 0.35]), _striped([0.3, 0.5, 0.9], 9.0, phase)),
            Solid(_sphere([-1.0, -0.6, 0.3], 0.3), _striped([0.3, 0.8, 0.35], 10.0, phase)),
        ]
    raise DomainError(f"unknown scene {name!r}; choose from {SCENES}")


def voxelize(solids: list[Solid], bounds: Box = BOUNDS, spacing: float = GT_SPACING, sigma_max: float = SIGMA_MAX) -> VoxelField:
    """Soft occupancy grid: density ramps from 0 to sigma_max over one node spacing across each surface."""
    res = np.maximum(np.round(bounds.extent / spacing).astype(int) + 1, 2)
    field = VoxelField.empty(tuple(res), bounds)
    nodes = field.node_positions()
    h = float(field.spacing.max())
    best = np.full(field.resolution, np.inf)
    owner = np.zeros(field.resolution, dtype=np.int64)
    for k, s in enumerate(solids):
        d = s.sdf(nodes)
        closer = d < best
        best = np.where(closer, d, best)
        owner = np.where(closer, k, owner)
    density = sigma_max * np.clip(0.5 - best / h, 0.0, 1.0)
    color = np.zeros(field.resolution + (3,))
    for k, s in enumerate(solids):
        sel = owner == k
        color[sel] = s.color(nodes[sel])
    return VoxelField(bounds, density, color)


def ring_cameras(n_views: int, resolution: int, rng: np.random.Generator) -> list[Camera]:
    f = 0.5 * resolution / np.tan(np.radians(FOV_DEG) / 2.0)
    offset = rng.uniform(0, 2 * np.pi / n_views)
    cams = []
    for k in range(n_views):
        ang = offset + 2.0 * np.pi * k / n_views
        eye = [RING_RADIUS * np.cos(ang), RING_RADIUS * np.sin(ang), 1.0 + 0.4 * rng.random()]
        cams.append(Camera.look_at(eye, TARGET, [0, 0, 1], f, f, resolution / 2, resolution / 2, resolution, resolution, NEAR, FAR))
    return cams


def default_split(n_views: int) -> tuple[list[int], list[int]]:
    test = list(range(min(2, n_views - 1), n_views, 5))
    train = [i for i in range(n_views) if i not in test]
    return train, test


def make_toy_scene(name: str, resolution: int = 128, n_views: int = 20, seed: int = 0, gt_samples: int = GT_SAMPLES):
    """Dataset of ring views plus the ground-truth field they were rendered from."""
    if name not in SCENES:
        raise DomainError(f"unknown scene {name!r}; choose from {SCENES}")
    if n_views < 4:
        raise DomainError("make_toy_scene needs n_views >= 4")
    rng = np.random.default_rng(seed)
    gt = voxelize(scene_solids(name, rng))
    cams = ring_cameras(n_views, resolution, rng)
    images = [quantize(render_image(gt, c, gt_samples)[0]) for c in cams]
    train, test = default_split(n_views)
    return Dataset(cams, images, train, test), gt
