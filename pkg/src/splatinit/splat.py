"""Gaussian splat model: projection, alpha-composited color/depth rendering and gradients.

Rendering is done on the CPU. Primitives are projected with the local-affine
(EWA) approximation, globally sorted by camera-space depth of their means and
composited front to back. The composited depth of each contributor is the
depth along the pixel ray where the 3D Gaussian peaks, which is closed form:
for a ray ``o + t d`` and a Gaussian centered at ``mu`` with precision ``P``,
``t* = d^T P (mu - o) / d^T P d``.

Primitives are processed one at a time (in depth order) over the pixels of
their screen-space bounding rectangle, keeping per-pixel transmittance. That is
the same arithmetic as walking each pixel's sorted contributor list, and the
backward pass replays it in reverse.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from splatinit.geometry import Camera, Ray, quat_to_rotmat

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4
BLUR = 0.3
FOV_CLAMP = 1.3

GSPL_MAGIC = b"GSPL"
GSPL_VERSION = 1


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity_logit: float
    sh: np.ndarray  # ((degree + 1)^2, 3)

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotation)
        return R @ np.diag(np.exp(2.0 * np.asarray(self.log_scale))) @ R.T

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class GaussianScene:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 0

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        if self.sh_degree not in (0, 1):
            raise ValueError("only SH degree 0 or 1 is supported")
        k = (self.sh_degree + 1) ** 2
        sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        if sh.size != n * k * 3:
            raise ValueError(f"sh has {sh.size} values, {n} primitives of degree {self.sh_degree} need {n * k * 3}")
        self.sh = sh.reshape(n, k, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def __len__(self):
        return len(self.means)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
            float(self.opacity_logits[i]), self.sh[i].copy(),
        )

    @classmethod
    def from_primitives(cls, prims, background=(0.0, 0.0, 0.0), sh_degree: int = 0) -> "GaussianScene":
        prims = list(prims)
        k = (sh_degree + 1) ** 2
        if not prims:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)), background, sh_degree)
        return cls(
            np.stack([p.mean for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([np.asarray(p.sh).reshape(k, 3) for p in prims]),
            background,
            sh_degree,
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.means.copy(), self.log_scales.copy(), self.quats.copy(), self.opacity_logits.copy(),
            self.sh.copy(), self.background.copy(), self.sh_degree,
        )

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.quats)
        return np.einsum("nij,nj,nkj->nik", R, np.exp(2.0 * self.log_scales), R)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means, "log_scales": self.log_scales, "quats": self.quats,
            "opacity_logits": self.opacity_logits, "sh": self.sh,
        }

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            setattr(self, k, v)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    ctx: "_Context | None" = None


@dataclass
class SceneGrads:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray  # dL/d(screen mean) in pixels, for densification statistics
    radii: np.ndarray  # screen radius in pixels, 0 when culled

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means, "log_scales": self.log_scales, "quats": self.quats,
            "opacity_logits": self.opacity_logits, "sh": self.sh,
        }


@dataclass
class _Context:
    proj: tuple
    order: np.ndarray
    T_final: np.ndarray
    stop: np.ndarray
    dirs: np.ndarray


# --------------------------------------------------------------------------- closed-form depth


def gaussian_depth_along_ray(g: GaussianPrimitive, ray: Ray) -> float:
    """Depth along ``ray`` at which the Gaussian ``g`` attains its maximum.

    With coordinates centered at the mean, the restricted quadratic
    ``(o + t d)^T P (o + t d)`` is minimized at ``t = -d^T P o / d^T P d``.
    """
    return float(gaussian_depths(g.mean[None], g.log_scale[None], g.rotation[None], ray.origin, ray.direction[None])[0])


def gaussian_depths(means, log_scales, quats, origin, dirs) -> np.ndarray:
    """Vectorized closed-form peak depth for matching rows of Gaussians and directions."""
    R = quat_to_rotmat(quats)
    inv_var = np.exp(-2.0 * np.asarray(log_scales))
    prec = np.einsum("nij,nj,nkj->nik", R, inv_var, R)
    o = np.asarray(origin, dtype=np.float64) - np.asarray(means, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    Pd = np.einsum("nij,nj->ni", prec, d)
    return -np.einsum("ni,ni->n", Pd, o) / np.einsum("ni,ni->n", Pd, d)


# --------------------------------------------------------------------------- projection kernels


@njit(cache=True)
def _rotmat(qw, qx, qy, qz, R):
    R[0, 0] = 1.0 - 2.0 * (qy * qy + qz * qz)
    R[0, 1] = 2.0 * (qx * qy - qw * qz)
    R[0, 2] = 2.0 * (qx * qz + qw * qy)
    R[1, 0] = 2.0 * (qx * qy + qw * qz)
    R[1, 1] = 1.0 - 2.0 * (qx * qx + qz * qz)
    R[1, 2] = 2.0 * (qy * qz - qw * qx)
    R[2, 0] = 2.0 * (qx * qz - qw * qy)
    R[2, 1] = 2.0 * (qy * qz + qw * qx)
    R[2, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)


@njit(cache=True)
def _project(means, log_scales, quats, opac_logits, sh, degree, W, tvec, cam_center,
             fx, fy, cx, cy, width, height, near,
             mean2d, conic, cov2d, pcam, prec, colors, clamped, opac, radii, rect, depth_c, cut):
    n = means.shape[0]
    R = np.empty((3, 3))
    A = np.empty((3, 3))
    limx = FOV_CLAMP * 0.5 * width / fx
    limy = FOV_CLAMP * 0.5 * height / fy
    for i in range(n):
        radii[i] = 0.0
        px = W[0, 0] * means[i, 0] + W[0, 1] * means[i, 1] + W[0, 2] * means[i, 2] + tvec[0]
        py = W[1, 0] * means[i, 0] + W[1, 1] * means[i, 1] + W[1, 2] * means[i, 2] + tvec[1]
        pz = W[2, 0] * means[i, 0] + W[2, 1] * means[i, 1] + W[2, 2] * means[i, 2] + tvec[2]
        pcam[i, 0] = px
        pcam[i, 1] = py
        pcam[i, 2] = pz
        depth_c[i] = pz
        if pz <= near:
            continue
        qn = np.sqrt(quats[i, 0] ** 2 + quats[i, 1] ** 2 + quats[i, 2] ** 2 + quats[i, 3] ** 2)
        _rotmat(quats[i, 0] / qn, quats[i, 1] / qn, quats[i, 2] / qn, quats[i, 3] / qn, R)
        for a in range(3):
            for b in range(3):
                A[a, b] = W[a, 0] * R[0, b] + W[a, 1] * R[1, b] + W[a, 2] * R[2, b]
        s2x = np.exp(2.0 * log_scales[i, 0])
        s2y = np.exp(2.0 * log_scales[i, 1])
        s2z = np.exp(2.0 * log_scales[i, 2])
        # camera-space covariance and precision (upper triangles)
        S00 = A[0, 0] ** 2 * s2x + A[0, 1] ** 2 * s2y + A[0, 2] ** 2 * s2z
        S01 = A[0, 0] * A[1, 0] * s2x + A[0, 1] * A[1, 1] * s2y + A[0, 2] * A[1, 2] * s2z
        S02 = A[0, 0] * A[2, 0] * s2x + A[0, 1] * A[2, 1] * s2y + A[0, 2] * A[2, 2] * s2z
        S11 = A[1, 0] ** 2 * s2x + A[1, 1] ** 2 * s2y + A[1, 2] ** 2 * s2z
        S12 = A[1, 0] * A[2, 0] * s2x + A[1, 1] * A[2, 1] * s2y + A[1, 2] * A[2, 2] * s2z
        S22 = A[2, 0] ** 2 * s2x + A[2, 1] ** 2 * s2y + A[2, 2] ** 2 * s2z
        prec[i, 0] = A[0, 0] ** 2 / s2x + A[0, 1] ** 2 / s2y + A[0, 2] ** 2 / s2z
        prec[i, 1] = A[0, 0] * A[1, 0] / s2x + A[0, 1] * A[1, 1] / s2y + A[0, 2] * A[1, 2] / s2z
        prec[i, 2] = A[0, 0] * A[2, 0] / s2x + A[0, 1] * A[2, 1] / s2y + A[0, 2] * A[2, 2] / s2z
        prec[i, 3] = A[1, 0] ** 2 / s2x + A[1, 1] ** 2 / s2y + A[1, 2] ** 2 / s2z
        prec[i, 4] = A[1, 0] * A[2, 0] / s2x + A[1, 1] * A[2, 1] / s2y + A[1, 2] * A[2, 2] / s2z
        prec[i, 5] = A[2, 0] ** 2 / s2x + A[2, 1] ** 2 / s2y + A[2, 2] ** 2 / s2z
        tx = min(limx, max(-limx, px / pz)) * pz
        ty = min(limy, max(-limy, py / pz)) * pz
        j00 = fx / pz
        j02 = -fx * tx / (pz * pz)
        j11 = fy / pz
        j12 = -fy * ty / (pz * pz)
        c00 = j00 * j00 * S00 + 2.0 * j00 * j02 * S02 + j02 * j02 * S22 + BLUR
        c01 = j00 * j11 * S01 + j00 * j12 * S02 + j02 * j11 * S12 + j02 * j12 * S22
        c11 = j11 * j11 * S11 + 2.0 * j11 * j12 * S12 + j12 * j12 * S22 + BLUR
        cov2d[i, 0] = c00
        cov2d[i, 1] = c01
        cov2d[i, 2] = c11
        det = c00 * c11 - c01 * c01
        if det <= 0.0:
            continue
        conic[i, 0] = c11 / det
        conic[i, 1] = -c01 / det
        conic[i, 2] = c00 / det
        mid = 0.5 * (c00 + c11)
        lam = mid + np.sqrt(max(0.1, mid * mid - det))
        r = np.ceil(3.0 * np.sqrt(lam))
        mx = fx * px / pz + cx
        my = fy * py / pz + cy
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        op = 1.0 / (1.0 + np.exp(-opac_logits[i]))
        if op < ALPHA_MIN:
            continue
        # support: inside the 3-sigma ellipse and where opacity * G can reach ALPHA_MIN
        cu = max(-4.5, np.log(ALPHA_MIN / op))
        hx = np.sqrt(-2.0 * cu * c00)
        hy = np.sqrt(-2.0 * cu * c11)
        x0 = max(0, int(np.floor(mx - hx)))
        x1 = min(width, int(np.ceil(mx + hx)))
        y0 = max(0, int(np.floor(my - hy)))
        y1 = min(height, int(np.ceil(my + hy)))
        if x0 >= x1 or y0 >= y1:
            continue
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        radii[i] = r
        opac[i] = op
        cut[i] = cu
        # color
        dxw = means[i, 0] - cam_center[0]
        dyw = means[i, 1] - cam_center[1]
        dzw = means[i, 2] - cam_center[2]
        dn = np.sqrt(dxw * dxw + dyw * dyw + dzw * dzw)
        dxw /= dn
        dyw /= dn
        dzw /= dn
        for ch in range(3):
            c = SH_C0 * sh[i, 0, ch] + 0.5
            if degree > 0:
                c += -SH_C1 * dyw * sh[i, 1, ch] + SH_C1 * dzw * sh[i, 2, ch] - SH_C1 * dxw * sh[i, 3, ch]
            if c < 0.0:
                clamped[i, ch] = True
                c = 0.0
            else:
                clamped[i, ch] = False
            colors[i, ch] = c


@njit(cache=True)
def _row_span(x0, x1, mx, dy, c0, c1, c2, cu):
    """Pixel columns of one row whose center may satisfy power >= cu (one pixel of slack)."""
    disc = c1 * c1 * dy * dy - c0 * (c2 * dy * dy + 2.0 * cu)
    if disc < 0.0:
        return x0, x0
    sq = np.sqrt(disc)
    lo = mx + (-c1 * dy - sq) / c0 - 0.5
    hi = mx + (-c1 * dy + sq) / c0 - 0.5
    return max(x0, int(np.floor(lo))), min(x1, int(np.ceil(hi)) + 1)


@njit(cache=True)
def _raster_forward(order, mean2d, conic, opac, colors, prec, pcam, rect, cut, dirs, bg,
                    out_color, out_depth, T, stop):
    H, W_ = T.shape
    n_sorted = order.shape[0]
    for y in range(H):
        for x in range(W_):
            T[y, x] = 1.0
            stop[y, x] = n_sorted
            out_depth[y, x] = 0.0
            for ch in range(3):
                out_color[y, x, ch] = 0.0
    for k in range(n_sorted):
        i = order[k]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        c0 = conic[i, 0]
        c1 = conic[i, 1]
        c2 = conic[i, 2]
        P0, P1, P2, P3, P4, P5 = prec[i, 0], prec[i, 1], prec[i, 2], prec[i, 3], prec[i, 4], prec[i, 5]
        p0, p1, p2 = pcam[i, 0], pcam[i, 1], pcam[i, 2]
        cu = cut[i]
        for y in range(rect[i, 2], rect[i, 3]):
            dy = y + 0.5 - my
            xa, xb = _row_span(rect[i, 0], rect[i, 1], mx, dy, c0, c1, c2, cu)
            for x in range(xa, xb):
                if stop[y, x] < n_sorted:
                    continue
                dx = x + 0.5 - mx
                power = -0.5 * (c0 * dx * dx + c2 * dy * dy) - c1 * dx * dy
                if power > 0.0 or power < cu:
                    continue
                a = min(ALPHA_MAX, opac[i] * np.exp(power))
                if a < ALPHA_MIN:
                    continue
                d0, d1, d2 = dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2]
                Pd0 = P0 * d0 + P1 * d1 + P2 * d2
                Pd1 = P1 * d0 + P3 * d1 + P4 * d2
                Pd2 = P2 * d0 + P4 * d1 + P5 * d2
                depth = (Pd0 * p0 + Pd1 * p1 + Pd2 * p2) / (Pd0 * d0 + Pd1 * d1 + Pd2 * d2)
                if depth <= 0.0:
                    continue
                t = T[y, x]
                test_T = t * (1.0 - a)
                if test_T < T_EPS:
                    stop[y, x] = k
                    continue
                w = a * t
                for ch in range(3):
                    out_color[y, x, ch] += w * colors[i, ch]
                out_depth[y, x] += w * depth
                T[y, x] = test_T
    for y in range(H):
        for x in range(W_):
            for ch in range(3):
                out_color[y, x, ch] += T[y, x] * bg[ch]


@njit(cache=True)
def _raster_backward(order, mean2d, conic, opac, colors, prec, pcam, rect, cut, dirs, bg,
                     T_final, stop, g_color, g_depth,
                     d_mean2d, d_conic, d_opac, d_colors, d_prec, d_pcam):
    H, W_ = T_final.shape
    n_sorted = order.shape[0]
    Tcur = T_final.copy()
    Rc = np.empty((H, W_, 3))
    Rd = np.zeros((H, W_))
    for y in range(H):
        for x in range(W_):
            for ch in range(3):
                Rc[y, x, ch] = bg[ch]
    for k in range(n_sorted - 1, -1, -1):
        i = order[k]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        c0 = conic[i, 0]
        c1 = conic[i, 1]
        c2 = conic[i, 2]
        P0, P1, P2, P3, P4, P5 = prec[i, 0], prec[i, 1], prec[i, 2], prec[i, 3], prec[i, 4], prec[i, 5]
        p0, p1, p2 = pcam[i, 0], pcam[i, 1], pcam[i, 2]
        al = opac[i]
        cu = cut[i]
        col0, col1, col2 = colors[i, 0], colors[i, 1], colors[i, 2]
        gc0 = gc1 = gc2 = 0.0
        g_op = g_k0 = g_k1 = g_k2 = g_m0 = g_m1 = 0.0
        g_p0 = g_p1 = g_p2 = 0.0
        g_q0 = g_q1 = g_q2 = g_q3 = g_q4 = g_q5 = 0.0
        for y in range(rect[i, 2], rect[i, 3]):
            dy = y + 0.5 - my
            xa, xb = _row_span(rect[i, 0], rect[i, 1], mx, dy, c0, c1, c2, cu)
            for x in range(xa, xb):
                if k >= stop[y, x]:
                    continue
                dx = x + 0.5 - mx
                power = -0.5 * (c0 * dx * dx + c2 * dy * dy) - c1 * dx * dy
                if power > 0.0 or power < cu:
                    continue
                G = np.exp(power)
                raw = al * G
                a = min(ALPHA_MAX, raw)
                if a < ALPHA_MIN:
                    continue
                d0, d1, d2 = dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2]
                Pd0 = P0 * d0 + P1 * d1 + P2 * d2
                Pd1 = P1 * d0 + P3 * d1 + P4 * d2
                Pd2 = P2 * d0 + P4 * d1 + P5 * d2
                num = Pd0 * p0 + Pd1 * p1 + Pd2 * p2
                q = Pd0 * d0 + Pd1 * d1 + Pd2 * d2
                depth = num / q
                if depth <= 0.0:
                    continue
                t_i = Tcur[y, x] / (1.0 - a)
                w = a * t_i
                gd = g_depth[y, x]
                u0, u1, u2 = g_color[y, x, 0], g_color[y, x, 1], g_color[y, x, 2]
                r0, r1, r2 = Rc[y, x, 0], Rc[y, x, 1], Rc[y, x, 2]
                gc0 += w * u0
                gc1 += w * u1
                gc2 += w * u2
                dL_da = t_i * (gd * (depth - Rd[y, x]) + u0 * (col0 - r0) + u1 * (col1 - r1) + u2 * (col2 - r2))
                Rc[y, x, 0] = a * col0 + (1.0 - a) * r0
                Rc[y, x, 1] = a * col1 + (1.0 - a) * r1
                Rc[y, x, 2] = a * col2 + (1.0 - a) * r2
                Rd[y, x] = a * depth + (1.0 - a) * Rd[y, x]
                Tcur[y, x] = t_i
                if raw < ALPHA_MAX:
                    g_op += dL_da * G
                    dpow = dL_da * al * G
                    g_k0 += -0.5 * dx * dx * dpow
                    g_k1 += -dx * dy * dpow
                    g_k2 += -0.5 * dy * dy * dpow
                    g_m0 += dpow * (c0 * dx + c1 * dy)
                    g_m1 += dpow * (c1 * dx + c2 * dy)
                gdep = w * gd
                if gdep != 0.0:
                    # depth = d^T P p / d^T P d
                    iq = gdep / q
                    g_p0 += iq * Pd0
                    g_p1 += iq * Pd1
                    g_p2 += iq * Pd2
                    r = depth
                    g_q0 += iq * (d0 * p0 - r * d0 * d0)
                    g_q1 += iq * (d0 * p1 + d1 * p0 - 2.0 * r * d0 * d1)
                    g_q2 += iq * (d0 * p2 + d2 * p0 - 2.0 * r * d0 * d2)
                    g_q3 += iq * (d1 * p1 - r * d1 * d1)
                    g_q4 += iq * (d1 * p2 + d2 * p1 - 2.0 * r * d1 * d2)
                    g_q5 += iq * (d2 * p2 - r * d2 * d2)
        d_colors[i, 0] += gc0
        d_colors[i, 1] += gc1
        d_colors[i, 2] += gc2
        d_opac[i] += g_op
        d_conic[i, 0] += g_k0
        d_conic[i, 1] += g_k1
        d_conic[i, 2] += g_k2
        d_mean2d[i, 0] += g_m0
        d_mean2d[i, 1] += g_m1
        d_pcam[i, 0] += g_p0
        d_pcam[i, 1] += g_p1
        d_pcam[i, 2] += g_p2
        d_prec[i, 0] += g_q0
        d_prec[i, 1] += g_q1
        d_prec[i, 2] += g_q2
        d_prec[i, 3] += g_q3
        d_prec[i, 4] += g_q4
        d_prec[i, 5] += g_q5


@njit(cache=True)
def _project_backward(means, log_scales, quats, opac_logits, sh, degree, W, cam_center,
                      fx, fy, width, height, radii, pcam, cov2d, conic, opac, clamped,
                      d_mean2d, d_conic, d_opac, d_colors, d_prec, d_pcam,
                      g_means, g_log_scales, g_quats, g_opac_logits, g_sh):
    n = means.shape[0]
    R = np.empty((3, 3))
    A = np.empty((3, 3))
    GS = np.empty((3, 3))
    GP = np.empty((3, 3))
    dA = np.empty((3, 3))
    dR = np.empty((3, 3))
    S = np.empty((3, 3))
    limx = FOV_CLAMP * 0.5 * width / fx
    limy = FOV_CLAMP * 0.5 * height / fy
    for i in range(n):
        if radii[i] <= 0.0:
            continue
        # color
        dxw = means[i, 0] - cam_center[0]
        dyw = means[i, 1] - cam_center[1]
        dzw = means[i, 2] - cam_center[2]
        dn = np.sqrt(dxw * dxw + dyw * dyw + dzw * dzw)
        ux, uy, uz = dxw / dn, dyw / dn, dzw / dn
        gux = 0.0
        guy = 0.0
        guz = 0.0
        for ch in range(3):
            gc = 0.0 if clamped[i, ch] else d_colors[i, ch]
            g_sh[i, 0, ch] += SH_C0 * gc
            if degree > 0:
                g_sh[i, 1, ch] += -SH_C1 * uy * gc
                g_sh[i, 2, ch] += SH_C1 * uz * gc
                g_sh[i, 3, ch] += -SH_C1 * ux * gc
                gux += -SH_C1 * sh[i, 3, ch] * gc
                guy += -SH_C1 * sh[i, 1, ch] * gc
                guz += SH_C1 * sh[i, 2, ch] * gc
        if degree > 0:
            dot = gux * ux + guy * uy + guz * uz
            g_means[i, 0] += (gux - ux * dot) / dn
            g_means[i, 1] += (guy - uy * dot) / dn
            g_means[i, 2] += (guz - uz * dot) / dn
        # opacity
        g_opac_logits[i] += d_opac[i] * opac[i] * (1.0 - opac[i])
        # conic -> 2D covariance: dL/dCov = -Q G Q with G the full-matrix gradient
        q00, q01, q11 = conic[i, 0], conic[i, 1], conic[i, 2]
        G00, G01, G11 = d_conic[i, 0], 0.5 * d_conic[i, 1], d_conic[i, 2]
        # Q G
        m00 = q00 * G00 + q01 * G01
        m01 = q00 * G01 + q01 * G11
        m10 = q01 * G00 + q11 * G01
        m11 = q01 * G01 + q11 * G11
        gc00 = -(m00 * q00 + m01 * q01)
        gc01 = -(m00 * q01 + m01 * q11)
        gc11 = -(m10 * q01 + m11 * q11)
        # rebuild camera-space quantities
        px, py, pz = pcam[i, 0], pcam[i, 1], pcam[i, 2]
        qn = np.sqrt(quats[i, 0] ** 2 + quats[i, 1] ** 2 + quats[i, 2] ** 2 + quats[i, 3] ** 2)
        qw, qx, qy, qz = quats[i, 0] / qn, quats[i, 1] / qn, quats[i, 2] / qn, quats[i, 3] / qn
        _rotmat(qw, qx, qy, qz, R)
        for a in range(3):
            for b in range(3):
                A[a, b] = W[a, 0] * R[0, b] + W[a, 1] * R[1, b] + W[a, 2] * R[2, b]
        s2 = np.exp(2.0 * log_scales[i])
        for a in range(3):
            for b in range(3):
                S[a, b] = A[a, 0] * A[b, 0] * s2[0] + A[a, 1] * A[b, 1] * s2[1] + A[a, 2] * A[b, 2] * s2[2]
        rx = px / pz
        ry = py / pz
        clx = rx < -limx or rx > limx
        cly = ry < -limy or ry > limy
        tx = min(limx, max(-limx, rx)) * pz
        ty = min(limy, max(-limy, ry)) * pz
        j00 = fx / pz
        j02 = -fx * tx / (pz * pz)
        j11 = fy / pz
        j12 = -fy * ty / (pz * pz)
        # dL/dS_cam = J^T Gc J (J rows: [j00,0,j02], [0,j11,j12])
        for a in range(3):
            for b in range(3):
                GS[a, b] = 0.0
        GS[0, 0] = j00 * j00 * gc00
        GS[0, 1] = j00 * j11 * gc01
        GS[0, 2] = j00 * (gc00 * j02 + gc01 * j12)
        GS[1, 1] = j11 * j11 * gc11
        GS[1, 2] = j11 * (gc01 * j02 + gc11 * j12)
        GS[2, 2] = j02 * j02 * gc00 + 2.0 * j02 * j12 * gc01 + j12 * j12 * gc11
        GS[1, 0] = GS[0, 1]
        GS[2, 0] = GS[0, 2]
        GS[2, 1] = GS[1, 2]
        # dL/dJ = 2 Gc J S, only structurally non-zero entries
        JS00 = j00 * S[0, 0] + j02 * S[2, 0]
        JS02 = j00 * S[0, 2] + j02 * S[2, 2]
        JS11 = j11 * S[1, 1] + j12 * S[2, 1]
        JS12 = j11 * S[1, 2] + j12 * S[2, 2]
        JS01 = j00 * S[0, 1] + j02 * S[2, 1]
        JS10 = j11 * S[1, 0] + j12 * S[2, 0]
        gJ00 = 2.0 * (gc00 * JS00 + gc01 * JS10)
        gJ02 = 2.0 * (gc00 * JS02 + gc01 * JS12)
        gJ11 = 2.0 * (gc01 * JS01 + gc11 * JS11)
        gJ12 = 2.0 * (gc01 * JS02 + gc11 * JS12)
        gpx = d_pcam[i, 0]
        gpy = d_pcam[i, 1]
        gpz = d_pcam[i, 2]
        # screen mean
        gpx += fx / pz * d_mean2d[i, 0]
        gpy += fy / pz * d_mean2d[i, 1]
        gpz += -fx * px / (pz * pz) * d_mean2d[i, 0] - fy * py / (pz * pz) * d_mean2d[i, 1]
        # Jacobian entries
        gpz += -fx / (pz * pz) * gJ00 - fy / (pz * pz) * gJ11
        if clx:
            gpz += fx * (tx / pz) / (pz * pz) * gJ02
        else:
            gpx += -fx / (pz * pz) * gJ02
            gpz += 2.0 * fx * px / (pz * pz * pz) * gJ02
        if cly:
            gpz += fy * (ty / pz) / (pz * pz) * gJ12
        else:
            gpy += -fy / (pz * pz) * gJ12
            gpz += 2.0 * fy * py / (pz * pz * pz) * gJ12
        for a in range(3):
            g_means[i, a] += W[0, a] * gpx + W[1, a] * gpy + W[2, a] * gpz
        # precision full-matrix gradient
        GP[0, 0] = d_prec[i, 0]
        GP[0, 1] = GP[1, 0] = 0.5 * d_prec[i, 1]
        GP[0, 2] = GP[2, 0] = 0.5 * d_prec[i, 2]
        GP[1, 1] = d_prec[i, 3]
        GP[1, 2] = GP[2, 1] = 0.5 * d_prec[i, 4]
        GP[2, 2] = d_prec[i, 5]
        # S_cam = A D A^T, P = A D^-1 A^T
        for a in range(3):
            for b in range(3):
                gsa = GS[a, 0] * A[0, b] + GS[a, 1] * A[1, b] + GS[a, 2] * A[2, b]
                gpa = GP[a, 0] * A[0, b] + GP[a, 1] * A[1, b] + GP[a, 2] * A[2, b]
                dA[a, b] = 2.0 * gsa * s2[b] + 2.0 * gpa / s2[b]
        for b in range(3):
            aga = 0.0
            apa = 0.0
            for a in range(3):
                gsa = GS[a, 0] * A[0, b] + GS[a, 1] * A[1, b] + GS[a, 2] * A[2, b]
                gpa = GP[a, 0] * A[0, b] + GP[a, 1] * A[1, b] + GP[a, 2] * A[2, b]
                aga += A[a, b] * gsa
                apa += A[a, b] * gpa
            g_log_scales[i, b] += 2.0 * s2[b] * aga - 2.0 * apa / s2[b]
        # A = W R
        for a in range(3):
            for b in range(3):
                dR[a, b] = W[0, a] * dA[0, b] + W[1, a] * dA[1, b] + W[2, a] * dA[2, b]
        gw = 2.0 * (-qz * dR[0, 1] + qy * dR[0, 2] + qz * dR[1, 0] - qx * dR[1, 2] - qy * dR[2, 0] + qx * dR[2, 1])
        gx = 2.0 * (qy * dR[0, 1] + qz * dR[0, 2] + qy * dR[1, 0] - 2.0 * qx * dR[1, 1] - qw * dR[1, 2]
                    + qz * dR[2, 0] + qw * dR[2, 1] - 2.0 * qx * dR[2, 2])
        gy = 2.0 * (-2.0 * qy * dR[0, 0] + qx * dR[0, 1] + qw * dR[0, 2] + qx * dR[1, 0] + qz * dR[1, 2]
                    - qw * dR[2, 0] + qz * dR[2, 1] - 2.0 * qy * dR[2, 2])
        gz = 2.0 * (-2.0 * qz * dR[0, 0] - qw * dR[0, 1] + qx * dR[0, 2] + qw * dR[1, 0] - 2.0 * qz * dR[1, 1]
                    + qy * dR[1, 2] + qx * dR[2, 0] + qy * dR[2, 1])
        dot = gw * qw + gx * qx + gy * qy + gz * qz
        g_quats[i, 0] += (gw - qw * dot) / qn
        g_quats[i, 1] += (gx - qx * dot) / qn
        g_quats[i, 2] += (gy - qy * dot) / qn
        g_quats[i, 3] += (gz - qz * dot) / qn


# --------------------------------------------------------------------------- public rendering


def _camera_dirs(camera: Camera) -> np.ndarray:
    """Unit camera-space pixel-center directions, (H, W, 3)."""
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1)
    return np.ascontiguousarray(d / np.linalg.norm(d, axis=-1, keepdims=True))


def project(scene: GaussianScene, camera: Camera):
    """Per-primitive screen-space quantities; culled primitives have radius 0."""
    n = len(scene)
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    cov2d = np.zeros((n, 3))
    pcam = np.zeros((n, 3))
    prec = np.zeros((n, 6))
    colors = np.zeros((n, 3))
    clamped = np.zeros((n, 3), dtype=np.bool_)
    opac = np.zeros(n)
    radii = np.zeros(n)
    rect = np.zeros((n, 4), dtype=np.int64)
    depth_c = np.zeros(n)
    cut = np.zeros(n)
    _project(
        scene.means, scene.log_scales, scene.quats, scene.opacity_logits, scene.sh, scene.sh_degree,
        np.ascontiguousarray(camera.rotation), np.ascontiguousarray(camera.translation), camera.center,
        float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy), int(camera.width), int(camera.height),
        float(camera.near), mean2d, conic, cov2d, pcam, prec, colors, clamped, opac, radii, rect, depth_c, cut,
    )
    return mean2d, conic, cov2d, pcam, prec, colors, clamped, opac, radii, rect, depth_c, cut


def project_gaussian(g: GaussianPrimitive, camera: Camera):
    """Screen mean, 2D covariance and camera depth of one primitive, or None when culled."""
    scene = GaussianScene.from_primitives([g], sh_degree=int(np.sqrt(np.asarray(g.sh).reshape(-1, 3).shape[0])) - 1)
    mean2d, _, cov2d, pcam, *_rest = project(scene, camera)
    if pcam[0, 2] <= camera.near:
        return None
    c = cov2d[0]
    return mean2d[0].copy(), np.array([[c[0], c[1]], [c[1], c[2]]]), float(pcam[0, 2])


def render(scene: GaussianScene, camera: Camera) -> RenderOutput:
    """Alpha-composite color, depth and accumulated alpha for every pixel."""
    proj = project(scene, camera)
    radii, depth_c = proj[8], proj[10]
    visible = np.flatnonzero(radii > 0)
    order = visible[np.argsort(depth_c[visible], kind="stable")].astype(np.int64)
    H, W = camera.height, camera.width
    dirs = _camera_dirs(camera)
    color = np.empty((H, W, 3))
    depth = np.empty((H, W))
    T = np.empty((H, W))
    stop = np.empty((H, W), dtype=np.int64)
    mean2d, conic, _, pcam, prec, colors, _, opac, _, rect, _, cut = proj
    _raster_forward(order, mean2d, conic, opac, colors, prec, pcam, rect, cut, dirs, scene.background, color, depth, T, stop)
    return RenderOutput(color, depth, 1.0 - T, _Context(proj, order, T, stop, dirs))


def render_backward(scene: GaussianScene, camera: Camera, grad_color, grad_depth=None, forward: RenderOutput | None = None) -> SceneGrads:
    """Exact gradients of a scalar loss w.r.t. all primitive parameters.

    ``grad_color`` is dL/d(color image) with shape (H, W, 3), ``grad_depth`` is
    dL/d(depth image) with shape (H, W) or None.
    """
    if forward is None or forward.ctx is None:
        forward = render(scene, camera)
    ctx = forward.ctx
    mean2d, conic, cov2d, pcam, prec, colors, clamped, opac, radii, rect, _, cut = ctx.proj
    n = len(scene)
    H, W = camera.height, camera.width
    g_color = np.ascontiguousarray(grad_color, dtype=np.float64).reshape(H, W, 3)
    g_depth = np.zeros((H, W)) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64).reshape(H, W)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_prec = np.zeros((n, 6))
    d_pcam = np.zeros((n, 3))
    _raster_backward(
        ctx.order, mean2d, conic, opac, colors, prec, pcam, rect, cut, ctx.dirs, scene.background,
        ctx.T_final, ctx.stop, g_color, g_depth, d_mean2d, d_conic, d_opac, d_colors, d_prec, d_pcam,
    )
    grads = SceneGrads(
        np.zeros_like(scene.means), np.zeros_like(scene.log_scales), np.zeros_like(scene.quats),
        np.zeros_like(scene.opacity_logits), np.zeros_like(scene.sh), d_mean2d, radii,
    )
    _project_backward(
        scene.means, scene.log_scales, scene.quats, scene.opacity_logits, scene.sh, scene.sh_degree,
        np.ascontiguousarray(camera.rotation), camera.center, float(camera.fx), float(camera.fy),
        int(camera.width), int(camera.height), radii, pcam, cov2d, conic, opac, clamped,
        d_mean2d, d_conic, d_opac, d_colors, d_prec, d_pcam,
        grads.means, grads.log_scales, grads.quats, grads.opacity_logits, grads.sh,
    )
    for name, g in grads.as_dict().items():
        bad = ~np.isfinite(g.reshape(n, -1)).all(axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite gradient for {name} at primitive {int(np.flatnonzero(bad)[0])}")
    return grads


# --------------------------------------------------------------------------- checkpoint


def save_scene(scene: GaussianScene, path) -> None:
    """GSPL container: magic, version, count, SH degree, then one f32 record per primitive."""
    n = len(scene)
    k = (scene.sh_degree + 1) ** 2
    rec = np.concatenate(
        [scene.means, scene.log_scales, scene.quats, scene.opacity_logits[:, None], scene.sh.reshape(n, 3 * k)], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(GSPL_MAGIC + struct.pack("<III", GSPL_VERSION, n, scene.sh_degree))
        f.write(scene.background.astype("<f4").tobytes())
        f.write(rec.tobytes())


def load_scene(path) -> GaussianScene:
    data = Path(path).read_bytes()
    if data[:4] != GSPL_MAGIC:
        raise ValueError(f"{path}: not a GSPL file")
    version, n, degree = struct.unpack("<III", data[4:16])
    if version != GSPL_VERSION:
        raise ValueError(f"{path}: unsupported GSPL version {version}")
    k = (degree + 1) ** 2
    width = 11 + 3 * k
    if len(data) != 28 + 4 * n * width:
        raise ValueError(f"{path}: expected {n} records of {width} floats")
    bg = np.frombuffer(data, "<f4", 3, 16).astype(np.float64)
    rec = np.frombuffer(data, "<f4", n * width, 28).reshape(n, width).astype(np.float64)
    return GaussianScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:].reshape(n, k, 3), bg, degree)
