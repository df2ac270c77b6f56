"""Dense voxel radiance field: the volumetric model that seeds and supervises splats.

The grid stores density and color at nodes; queries trilinearly interpolate the
node values and return zero outside the bounds. Rays are marched with ``n``
equal intervals between ``t_min`` and ``t_max``, each interval evaluated at its
midpoint (optionally shifted by a per-ray jitter during training).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from splatinit.geometry import Box, Camera, DomainError, Ray

log = logging.getLogger(__name__)

ALPHA_FLOOR = 0.01
VFLD_MAGIC = b"VFLD"
VFLD_VERSION = 1


class RayRejected(Exception):
    """The ray carries too little termination mass to be sampled."""


class DegenerateField(RuntimeError):
    pass


@dataclass
class VoxelField:
    bounds: Box
    density: np.ndarray  # (nx, ny, nz), >= 0
    color: np.ndarray  # (nx, ny, nz, 3), in [0, 1]

    def __post_init__(self):
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise DomainError("density must be a 3D grid with at least 2 nodes per axis")
        if self.color.shape != self.density.shape + (3,):
            raise DomainError("color grid shape must be density shape + (3,)")
        if np.any(self.bounds.extent <= 0):
            raise DomainError("field bounds need positive extent on every axis")
        if np.any(self.density < 0):
            raise DomainError("density must be non-negative")
        if np.any((self.color < 0) | (self.color > 1)):
            raise DomainError("colors must lie in [0, 1]")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density.shape

    @property
    def spacing(self) -> np.ndarray:
        return self.bounds.extent / (np.array(self.resolution) - 1)

    @classmethod
    def empty(cls, resolution, bounds: Box) -> "VoxelField":
        res = tuple(int(r) for r in resolution)
        return cls(bounds, np.zeros(res), np.zeros(res + (3,)))

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bounds.lo, self.bounds.hi, self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.bounds, self.density.copy(), self.color.copy())

    def _args(self):
        return self.density, self.color, self.bounds.lo, 1.0 / self.spacing


@dataclass
class TerminationProfile:
    ray: Ray
    ts: np.ndarray  # interval edges t_0..t_N
    weights: np.ndarray  # per-interval termination mass
    cdf: np.ndarray
    accumulated_depth: float
    total_alpha: float
    sigmas: np.ndarray
    colors: np.ndarray


# --------------------------------------------------------------------------- kernels


@njit(cache=True)
def _locate(lo, inv_h, shape, x, y, z, idx, frac):
    gx = (x - lo[0]) * inv_h[0]
    gy = (y - lo[1]) * inv_h[1]
    gz = (z - lo[2]) * inv_h[2]
    nx, ny, nz = shape
    if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > nx - 1 or gy > ny - 1 or gz > nz - 1:
        return False
    ix = min(int(gx), nx - 2)
    iy = min(int(gy), ny - 2)
    iz = min(int(gz), nz - 2)
    idx[0] = ix
    idx[1] = iy
    idx[2] = iz
    frac[0] = gx - ix
    frac[1] = gy - iy
    frac[2] = gz - iz
    return True


@njit(cache=True)
def _corner_weight(frac, dx, dy, dz):
    wx = frac[0] if dx else 1.0 - frac[0]
    wy = frac[1] if dy else 1.0 - frac[1]
    wz = frac[2] if dz else 1.0 - frac[2]
    return wx * wy * wz


@njit(cache=True)
def _interp(density, color, idx, frac, out_c):
    sigma = 0.0
    out_c[0] = 0.0
    out_c[1] = 0.0
    out_c[2] = 0.0
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                w = _corner_weight(frac, dx, dy, dz)
                i, j, k = idx[0] + dx, idx[1] + dy, idx[2] + dz
                sigma += w * density[i, j, k]
                for ch in range(3):
                    out_c[ch] += w * color[i, j, k, ch]
    return sigma


@njit(cache=True)
def _sample_points(density, color, lo, inv_h, pts, out_sigma, out_color):
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    c = np.empty(3)
    for p in range(pts.shape[0]):
        if _locate(lo, inv_h, density.shape, pts[p, 0], pts[p, 1], pts[p, 2], idx, frac):
            out_sigma[p] = _interp(density, color, idx, frac, c)
            out_color[p, 0] = c[0]
            out_color[p, 1] = c[1]
            out_color[p, 2] = c[2]
        else:
            out_sigma[p] = 0.0
            out_color[p, 0] = 0.0
            out_color[p, 1] = 0.0
            out_color[p, 2] = 0.0


@njit(cache=True)
def _march_one(density, color, lo, inv_h, o, d, t0, t1, n, offset, sig, col):
    dt = (t1 - t0) / n
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    c = np.empty(3)
    for i in range(n):
        t = t0 + (i + 0.5 + offset) * dt
        if _locate(lo, inv_h, density.shape, o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2], idx, frac):
            sig[i] = _interp(density, color, idx, frac, c)
            col[i, 0] = c[0]
            col[i, 1] = c[1]
            col[i, 2] = c[2]
        else:
            sig[i] = 0.0
            col[i, 0] = 0.0
            col[i, 1] = 0.0
            col[i, 2] = 0.0
    return dt


@njit(cache=True)
def _weights_batch(density, color, lo, inv_h, origins, dirs, tmin, tmax, n, out_w):
    """Termination masses for a batch of rays, out_w of shape (B, n)."""
    sig = np.empty(n)
    col = np.empty((n, 3))
    for r in range(origins.shape[0]):
        dt = _march_one(density, color, lo, inv_h, origins[r], dirs[r], tmin[r], tmax[r], n, 0.0, sig, col)
        T = 1.0
        for i in range(n):
            a = 1.0 - np.exp(-sig[i] * dt)
            out_w[r, i] = T * a
            T *= 1.0 - a


@njit(cache=True)
def _composite_batch(density, color, lo, inv_h, origins, dirs, tmin, tmax, n, bg, out_rgb, out_depth, out_alpha):
    sig = np.empty(n)
    col = np.empty((n, 3))
    for r in range(origins.shape[0]):
        dt = _march_one(density, color, lo, inv_h, origins[r], dirs[r], tmin[r], tmax[r], n, 0.0, sig, col)
        T = 1.0
        acc = np.zeros(3)
        depth = 0.0
        for i in range(n):
            a = 1.0 - np.exp(-sig[i] * dt)
            w = T * a
            for ch in range(3):
                acc[ch] += w * col[i, ch]
            depth += w * (tmin[r] + (i + 0.5) * dt)
            T *= 1.0 - a
        for ch in range(3):
            out_rgb[r, ch] = acc[ch] + T * bg[ch]
        out_depth[r] = depth
        out_alpha[r] = 1.0 - T


@njit(cache=True)
def _loss_grad_batch(density, color, lo, inv_h, origins, dirs, tmin, tmax, n, offsets, targets, bg, grad_d, grad_c):
    """Mean squared color error over a ray batch; accumulates node gradients in place."""
    B = origins.shape[0]
    sig = np.empty(n)
    col = np.empty((n, 3))
    w = np.empty(n)
    Tnext = np.empty(n)
    ids = np.empty((n, 3), np.int64)
    fracs = np.empty((n, 3))
    inside = np.empty(n, np.bool_)
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    c = np.empty(3)
    gC = np.empty(3)
    scale = 1.0 / (3.0 * B)
    loss = 0.0
    for r in range(B):
        o = origins[r]
        d = dirs[r]
        dt = (tmax[r] - tmin[r]) / n
        T = 1.0
        C0 = 0.0
        C1 = 0.0
        C2 = 0.0
        for i in range(n):
            t = tmin[r] + (i + 0.5 + offsets[r]) * dt
            ok = _locate(lo, inv_h, density.shape, o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2], idx, frac)
            inside[i] = ok
            if ok:
                sig[i] = _interp(density, color, idx, frac, c)
                for q in range(3):
                    ids[i, q] = idx[q]
                    fracs[i, q] = frac[q]
                    col[i, q] = c[q]
            else:
                sig[i] = 0.0
                col[i, 0] = 0.0
                col[i, 1] = 0.0
                col[i, 2] = 0.0
            a = 1.0 - np.exp(-sig[i] * dt)
            w[i] = T * a
            C0 += w[i] * col[i, 0]
            C1 += w[i] * col[i, 1]
            C2 += w[i] * col[i, 2]
            T *= 1.0 - a
            Tnext[i] = T
        C0 += T * bg[0]
        C1 += T * bg[1]
        C2 += T * bg[2]
        e0 = C0 - targets[r, 0]
        e1 = C1 - targets[r, 1]
        e2 = C2 - targets[r, 2]
        loss += (e0 * e0 + e1 * e1 + e2 * e2) * scale
        gC[0] = 2.0 * e0 * scale
        gC[1] = 2.0 * e1 * scale
        gC[2] = 2.0 * e2 * scale
        # dL/dtau_k = g.c_k T_{k+1} - sum_{i>k} w_i g.c_i - T_N g.bg
        final = T * (gC[0] * bg[0] + gC[1] * bg[1] + gC[2] * bg[2])
        suffix = 0.0
        for k in range(n - 1, -1, -1):
            gck = gC[0] * col[k, 0] + gC[1] * col[k, 1] + gC[2] * col[k, 2]
            dsig = (gck * Tnext[k] - suffix - final) * dt
            suffix += w[k] * gck
            if not inside[k]:
                continue
            for q in range(3):
                frac[q] = fracs[k, q]
            for dx in range(2):
                for dy in range(2):
                    for dz in range(2):
                        cw = _corner_weight(frac, dx, dy, dz)
                        i0, j0, k0 = ids[k, 0] + dx, ids[k, 1] + dy, ids[k, 2] + dz
                        grad_d[i0, j0, k0] += cw * dsig
                        for q in range(3):
                            grad_c[i0, j0, k0, q] += cw * w[k] * gC[q]
    return loss


# --------------------------------------------------------------------------- queries


def sample_field(field: VoxelField, x) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear density and color at points ``x`` of shape (..., 3); zero outside bounds."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    sigma = np.empty(len(pts))
    rgb = np.empty((len(pts), 3))
    _sample_points(*field._args(), pts, sigma, rgb)
    return sigma.reshape(x.shape[:-1]), rgb.reshape(x.shape)


def march_ray(field: VoxelField, ray: Ray, n_samples: int, jitter: float = 0.0) -> TerminationProfile:
    if n_samples < 2:
        raise DomainError("march_ray needs n_samples >= 2")
    sig = np.empty(n_samples)
    col = np.empty((n_samples, 3))
    dt = _march_one(*field._args(), ray.origin, ray.direction, ray.t_min, ray.t_max, n_samples, jitter, sig, col)
    ts = ray.t_min + dt * np.arange(n_samples + 1)
    ts[-1] = ray.t_max
    tau = sig * dt
    alphas = 1.0 - np.exp(-tau)
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    weights = trans * alphas
    cdf = np.cumsum(weights)
    mids = 0.5 * (ts[:-1] + ts[1:])
    return TerminationProfile(
        ray=ray,
        ts=ts,
        weights=weights,
        cdf=cdf,
        accumulated_depth=float(np.dot(mids, weights)),
        total_alpha=float(cdf[-1]),
        sigmas=sig,
        colors=col,
    )


def _inverse_cdf(ts, weights, cdf, u):
    """Vectorized inverse CDF; ts (B, n+1), weights/cdf (B, n), u (B,) -> t (B,)."""
    total = cdf[:, -1]
    target = u * total
    strictly = np.sum(cdf < target[:, None], axis=1)
    first_mass = np.sum(cdf <= 0.0, axis=1)
    idx = np.where(target > 0.0, strictly, first_mass)
    idx = np.minimum(idx, cdf.shape[1] - 1)
    rows = np.arange(len(idx))
    w = weights[rows, idx]
    prev = np.where(idx > 0, cdf[rows, np.maximum(idx - 1, 0)], 0.0)
    t0 = ts[rows, idx]
    dt = ts[rows, idx + 1] - t0
    safe_w = np.where(w > 0, w, 1.0)
    frac = np.clip((target - prev) / safe_w, 0.0, 1.0)
    return t0 + np.where(w > 0, frac, 0.0) * dt


def inverse_cdf_sample(profile: TerminationProfile, u: float, alpha_floor: float = ALPHA_FLOOR) -> float:
    """Depth at which the ray's normalized termination CDF reaches ``u``."""
    if not 0.0 <= u <= 1.0:
        raise DomainError("u must lie in [0, 1]")
    if profile.total_alpha <= alpha_floor:
        raise RayRejected(f"total alpha {profile.total_alpha:.3g} <= floor {alpha_floor}")
    t = _inverse_cdf(profile.ts[None], profile.weights[None], profile.cdf[None], np.array([u]))
    return float(t[0])


def field_depth(field: VoxelField, ray: Ray, n_samples: int) -> float:
    return march_ray(field, ray, n_samples).accumulated_depth


def render_rays(field: VoxelField, origins, dirs, t_min, t_max, n_samples: int, background=(0.0, 0.0, 0.0)):
    """Composite color, accumulated depth and alpha for a batch of rays."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    B = len(origins)
    tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (B,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (B,)).copy()
    rgb = np.empty((B, 3))
    depth = np.empty(B)
    alpha = np.empty(B)
    _composite_batch(*field._args(), origins, dirs, tmin, tmax, n_samples, np.asarray(background, dtype=np.float64), rgb, depth, alpha)
    return rgb, depth, alpha


def render_image(field: VoxelField, camera: Camera, n_samples: int, background=(0.0, 0.0, 0.0)):
    """Volume-render a full image; returns (H, W, 3) color, (H, W) depth and alpha."""
    o, d = camera.rays()
    rgb, depth, alpha = render_rays(field, o, d, camera.near, camera.far, n_samples, background)
    H, W = camera.height, camera.width
    return rgb.reshape(H, W, 3), depth.reshape(H, W), alpha.reshape(H, W)


def ray_profiles(field: VoxelField, origins, dirs, t_min, t_max, n_samples: int):
    """Interval edges (B, n+1), termination weights (B, n) and cdf (B, n) for a batch."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    B = len(origins)
    tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (B,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (B,)).copy()
    w = np.empty((B, n_samples))
    _weights_batch(*field._args(), origins, dirs, tmin, tmax, n_samples, w)
    ts = tmin[:, None] + (tmax - tmin)[:, None] * (np.arange(n_samples + 1) / n_samples)
    ts[:, -1] = tmax
    return ts, w, np.cumsum(w, axis=1)


def sample_point_cloud(
    field: VoxelField,
    cameras: list[Camera],
    n_points: int,
    seed: int,
    n_samples: int = 128,
    alpha_floor: float = ALPHA_FLOOR,
    batch_size: int = 8192,
):
    """Draw one termination-distributed point per accepted training ray.

    Rays are chosen uniformly over all pixels of all cameras; rays whose total
    alpha does not exceed ``alpha_floor`` are rejected and replaced.
    """
    from splatinit.initialization import PointCloud

    if n_points < 1:
        raise DomainError("n_points must be >= 1")
    if not cameras:
        raise DomainError("sample_point_cloud needs at least one camera")
    if not np.any(field.density > 0):
        raise DegenerateField("field density is zero everywhere")
    rng = np.random.default_rng(seed)
    sizes = np.array([c.width * c.height for c in cameras])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    dirs_per_cam = [c.pixel_directions().reshape(-1, 3) for c in cameras]
    positions, colors = [], []
    have = 0
    empty_batches = 0
    while have < n_points:
        flat = rng.integers(0, offsets[-1], size=batch_size)
        u = rng.random(batch_size)
        cam_idx = np.searchsorted(offsets, flat, side="right") - 1
        local = flat - offsets[cam_idx]
        dirs = np.empty((batch_size, 3))
        origins = np.empty((batch_size, 3))
        tmin = np.empty(batch_size)
        tmax = np.empty(batch_size)
        for ci, cam in enumerate(cameras):
            sel = cam_idx == ci
            dirs[sel] = dirs_per_cam[ci][local[sel]]
            origins[sel] = cam.center
            tmin[sel] = cam.near
            tmax[sel] = cam.far
        ts, w, cdf = ray_profiles(field, origins, dirs, tmin, tmax, n_samples)
        keep = cdf[:, -1] > alpha_floor
        if not keep.any():
            empty_batches += 1
            if empty_batches >= 20:
                raise DegenerateField("no ray exceeded the alpha floor after 20 batches")
            continue
        empty_batches = 0
        t = _inverse_cdf(ts[keep], w[keep], cdf[keep], u[keep])
        pts = origins[keep] + t[:, None] * dirs[keep]
        take = min(len(pts), n_points - have)
        pts = pts[:take]
        _, rgb = sample_field(field, pts)
        positions.append(pts)
        colors.append(np.clip(rgb, 0.0, 1.0))  # trilinear weights can overshoot 1 by roundoff
        have += take
    return PointCloud(np.concatenate(positions), np.concatenate(colors))


# --------------------------------------------------------------------------- training


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.maximum(y, 1e-8)
    return np.where(y > 20.0, y, np.log(np.expm1(np.minimum(y, 20.0))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p, eps=1e-4):
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@njit(cache=True)
def _adam_grid_step(raw, grad, m, v, act, kind, lr, b1, b2, eps, c1, c2):
    """Sparse Adam step on nodes that received gradient this iteration.

    Chains the gradient w.r.t. activated values back to raw parameters, refreshes
    the activation and clears the gradient buffer. kind 0 is softplus, 1 the logistic.
    Untouched nodes keep their moments frozen, as in the usual sparse variant.
    """
    for i in range(raw.size):
        if grad[i] == 0.0:
            continue
        r = raw[i]
        if kind == 0:
            g = grad[i] * 0.5 * (1.0 + np.tanh(0.5 * r))
        else:
            a = act[i]
            g = grad[i] * a * (1.0 - a)
        grad[i] = 0.0
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        r -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
        raw[i] = r
        if kind == 0:
            act[i] = max(r, 0.0) + np.log1p(np.exp(-abs(r)))
        else:
            act[i] = 0.5 * (1.0 + np.tanh(0.5 * r))


@njit(cache=True)
def _tv_grad(values, nodes, weight, grad):
    """Add the gradient of weight * mean squared forward difference at ``nodes`` (flat
    indices, C order) to ``grad``; returns the penalty. ``values`` is (nx, ny, nz, C)."""
    nx, ny, nz, C = values.shape
    total = 0.0
    scale = weight / max(len(nodes), 1)
    for n in nodes:
        i = n // (ny * nz)
        j = (n // nz) % ny
        k = n % nz
        for axis in range(3):
            i2, j2, k2 = i, j, k
            if axis == 0:
                i2 += 1
            elif axis == 1:
                j2 += 1
            else:
                k2 += 1
            if i2 >= nx or j2 >= ny or k2 >= nz:
                continue
            for c in range(C):
                d = values[i2, j2, k2, c] - values[i, j, k, c]
                total += scale * d * d
                grad[i2, j2, k2, c] += 2.0 * scale * d
                grad[i, j, k, c] -= 2.0 * scale * d
    return total


def photometric_loss_and_grad(
    field: VoxelField,
    origins,
    dirs,
    t_min,
    t_max,
    targets,
    n_samples: int,
    background=(0.0, 0.0, 0.0),
    offsets=None,
):
    """Mean squared error of composited ray colors and its gradient w.r.t. node values.

    Returns ``(loss, grad_density, grad_color)``.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    B = len(origins)
    tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (B,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (B,)).copy()
    offsets = np.zeros(B) if offsets is None else np.ascontiguousarray(offsets, dtype=np.float64)
    gd = np.zeros_like(field.density)
    gc = np.zeros_like(field.color)
    loss = _loss_grad_batch(
        *field._args(), origins, dirs, tmin, tmax, n_samples, offsets,
        np.ascontiguousarray(targets, dtype=np.float64), np.asarray(background, dtype=np.float64), gd, gc,
    )
    return loss, gd, gc


@dataclass
class RaySet:
    origins: np.ndarray
    dirs: np.ndarray
    t_min: np.ndarray
    t_max: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_views(cls, cameras, images) -> "RaySet":
        parts = []
        for cam, img in zip(cameras, images):
            o, d = cam.rays()
            n = len(o)
            parts.append((o, d, np.full(n, cam.near), np.full(n, cam.far), np.asarray(img, dtype=np.float64).reshape(-1, 3)))
        return cls(*(np.concatenate(p) for p in zip(*parts)))

    def subset(self, idx) -> "RaySet":
        return RaySet(self.origins[idx], self.dirs[idx], self.t_min[idx], self.t_max[idx], self.colors[idx])

    def __len__(self):
        return len(self.origins)


def train_field(
    field: VoxelField,
    dataset,
    iters: int,
    lr: float = 0.1,
    rays_per_iter: int = 1024,
    seed: int = 0,
    n_samples: int = 96,
    background=(0.0, 0.0, 0.0),
    heldout: RaySet | None = None,
    history: list | None = None,
    log_every: int = 0,
    lr_final: float | None = None,
    tv_density: float = 0.0,
    tv_color: float = 0.0,
    tv_nodes: int = 20_000,
) -> VoxelField:
    """Fit node density/color to the dataset's training views by Adam on reparameterized grids.

    Density is ``softplus(s)`` and color ``sigmoid(k)`` per node. The step size
    decays log-linearly from ``lr`` to ``lr_final`` (default lr/10). Optional
    total-variation penalties act on ``tv_nodes`` random nodes per step. Adam is
    applied sparsely: only nodes with nonzero gradient move. ``history``, if
    given, receives ``(iteration, train_loss)`` tuples.
    """
    if iters < 0:
        raise DomainError("iters must be >= 0")
    if iters == 0:
        return field
    rays = RaySet.from_views(dataset.train_cameras, dataset.train_images)
    if len(rays) == 0:
        raise DomainError("dataset has no training rays")
    lr_final = 0.1 * lr if lr_final is None else lr_final
    if lr <= 0 or lr_final <= 0:
        raise DomainError("learning rates must be positive")
    rng = np.random.default_rng(seed)
    work = VoxelField(field.bounds, _softplus(_softplus_inv(field.density)), _sigmoid(_logit(field.color)))
    raw_s, raw_k = _softplus_inv(field.density).ravel(), _logit(field.color).ravel()
    ms, vs, mk, vk = (np.zeros_like(a) for a in (raw_s, raw_s, raw_k, raw_k))
    gd, gc = np.zeros_like(work.density), np.zeros_like(work.color)
    dens, col = work.density.reshape(-1), work.color.reshape(-1)
    args = work._args()
    bg = np.asarray(background, dtype=np.float64)
    b1, b2, eps = 0.9, 0.999, 1e-15
    if heldout is not None:
        loss0 = photometric_loss_and_grad(work, heldout.origins, heldout.dirs, heldout.t_min, heldout.t_max, heldout.colors, n_samples, background)[0]
        log.info("field held-out loss at iter 0: %.5f", loss0)
    for it in range(iters):
        idx = rng.integers(0, len(rays), size=rays_per_iter)
        batch = rays.subset(idx)
        jitter = rng.random(rays_per_iter) - 0.5
        loss = _loss_grad_batch(
            *args, batch.origins, batch.dirs, batch.t_min, batch.t_max, n_samples, jitter, batch.colors, bg, gd, gc
        )
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite field loss at iteration {it}")
        if tv_density > 0 or tv_color > 0:
            nodes = rng.integers(0, work.density.size, size=tv_nodes)
            _tv_grad(work.density[..., None], nodes, tv_density, gd[..., None])
            _tv_grad(work.color, nodes, tv_color, gc)
        c1, c2 = 1.0 - b1 ** (it + 1), 1.0 - b2 ** (it + 1)
        frac = it / max(iters - 1, 1)
        lr_it = lr * (lr_final / lr) ** frac
        _adam_grid_step(raw_s, gd.reshape(-1), ms, vs, dens, 0, lr_it, b1, b2, eps, c1, c2)
        _adam_grid_step(raw_k, gc.reshape(-1), mk, vk, col, 1, lr_it, b1, b2, eps, c1, c2)
        if history is not None:
            history.append((it, float(loss)))
        if log_every and it % log_every == 0:
            log.info("field iter %d loss %.5f", it, loss)
    return work


# --------------------------------------------------------------------------- checkpoint


def save_field(field: VoxelField, path) -> None:
    """Write the VFLD container: header, then density and color as little-endian f32, x fastest."""
    nx, ny, nz = field.resolution
    header = VFLD_MAGIC + struct.pack("<I3I6d", VFLD_VERSION, nx, ny, nz, *field.bounds.lo, *field.bounds.hi)
    dens = field.density.astype("<f4").ravel(order="F")
    col = np.moveaxis(field.color, -1, 0).astype("<f4")  # (3, nx, ny, nz)
    col = col.reshape(3, -1, order="F").T.ravel()  # per-node RGB triples, nodes x-fastest
    with open(path, "wb") as f:
        f.write(header)
        f.write(dens.tobytes())
        f.write(col.tobytes())


def load_field(path) -> VoxelField:
    data = Path(path).read_bytes()
    hsize = 4 + struct.calcsize("<I3I6d")
    if len(data) < hsize or data[:4] != VFLD_MAGIC:
        raise ValueError(f"{path}: not a VFLD file")
    version, nx, ny, nz, *b = struct.unpack("<I3I6d", data[4:hsize])
    if version != VFLD_VERSION:
        raise ValueError(f"{path}: unsupported VFLD version {version}")
    n = nx * ny * nz
    if len(data) != hsize + 16 * n:
        raise ValueError(f"{path}: expected {hsize + 16 * n} bytes, found {len(data)}")
    dens = np.frombuffer(data, "<f4", n, hsize).reshape((nx, ny, nz), order="F")
    col = np.frombuffer(data, "<f4", 3 * n, hsize + 4 * n).reshape(n, 3)
    col = col.T.reshape((3, nx, ny, nz), order="F")
    return VoxelField(Box(b[:3], b[3:]), dens.astype(np.float64), np.moveaxis(col, 0, -1).astype(np.float64))
