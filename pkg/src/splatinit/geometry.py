"""Pinhole cameras, rays and small rotation helpers shared by both renderers.

Conventions: cameras store a world-to-camera transform ``x_cam = R @ x_world + t``
with +z forward, +x right and +y down. Continuous image coordinates put the
center of integer pixel ``(i, j)`` at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Raised when an operation is called outside its documented domain."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if np.any(self.hi < self.lo):
            raise DomainError(f"box has negative extent: lo={self.lo}, hi={self.hi}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if not self.t_min < self.t_max:
            raise DomainError("ray requires t_min < t_max")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9:
            raise DomainError("camera rotation is not orthonormal")
        if not 0 < self.near < self.far:
            raise DomainError("camera requires 0 < near < far")
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be at least 1x1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space directions through every pixel center, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1
        )
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.rotation

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for all pixel centers, each (H*W, 3), row-major."""
        d = self.pixel_directions().reshape(-1, 3)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    @staticmethod
    def look_at(eye, target, up, fx, fy, cx, cy, width, height, near=0.05, far=100.0) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; ``up`` maps to -y in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return Camera(fx, fy, cx, cy, width, height, R, -R @ eye, near, far)


def pixel_ray(camera: Camera, px) -> Ray:
    """World-space ray through continuous image coordinate ``px = (x, y)``.

    Integer pixel ``(i, j)`` has its center at ``(i + 0.5, j + 0.5)``.
    """
    x, y = float(px[0]), float(px[1])
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise DomainError(f"pixel {px} outside {camera.width}x{camera.height} image")
    d_cam = np.array([(x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    d /= np.linalg.norm(d)
    return Ray(camera.center, d, camera.near, camera.far)


def camera_bbox(cameras: list[Camera]) -> Box:
    """Tight axis-aligned box around all camera centers."""
    if not cameras:
        raise DomainError("camera_bbox needs at least one camera")
    centers = np.stack([c.center for c in cameras])
    return Box(centers.min(axis=0), centers.max(axis=0))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; normalizes first. Works on (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotation_about_axis(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise DomainError(f"unknown axis {axis!r}")
