import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatinit.dataset import Dataset
from splatinit.geometry import Box, Camera, DomainError, Ray
from splatinit.volfield import (
    DegenerateField, RayRejected, RaySet, VoxelField, field_depth, inverse_cdf_sample, load_field,
    march_ray, photometric_loss_and_grad, render_image, sample_field, sample_point_cloud, save_field,
    train_field,
)


def homogeneous(sigma=1.0, half=20.0, n=3):
    box = Box([-half] * 3, [half] * 3)
    return VoxelField(box, np.full((n, n, n), sigma), np.full((n, n, n, 3), 0.5))


def axis_ray(t0=0.0, t1=10.0):
    return Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), t0, t1)


def cdf_at(profile, t):
    return np.interp(t, profile.ts, np.concatenate([[0.0], profile.cdf]))


# --------------------------------------------------------------------------- sample_field


def test_outside_bounds_is_empty():
    f = homogeneous(2.0, half=1.0)
    s, c = sample_field(f, np.array([1.5, 0.0, 0.0]))
    assert s == 0.0
    np.testing.assert_array_equal(c, 0.0)


def test_node_values_reproduced():
    rng = np.random.default_rng(0)
    f = VoxelField(Box([0, 0, 0], [3, 2, 1]), rng.random((4, 3, 2)), rng.random((4, 3, 2, 3)))
    nodes = f.node_positions()
    s, c = sample_field(f, nodes)
    np.testing.assert_allclose(s, f.density, atol=1e-12)
    np.testing.assert_allclose(c, f.color, atol=1e-12)


def test_edge_midpoint_interpolation():
    dens = np.zeros((2, 2, 2))
    dens[0, 0, 0], dens[1, 0, 0] = 2.0, 4.0
    f = VoxelField(Box([0, 0, 0], [1, 1, 1]), dens, np.zeros((2, 2, 2, 3)))
    s, _ = sample_field(f, np.array([0.5, 0.0, 0.0]))
    assert s == pytest.approx(3.0, abs=1e-12)


def test_field_validation():
    box = Box([0, 0, 0], [1, 1, 1])
    with pytest.raises(DomainError):
        VoxelField(box, -np.ones((2, 2, 2)), np.zeros((2, 2, 2, 3)))
    with pytest.raises(DomainError):
        VoxelField(box, np.ones((2, 2, 2)), np.full((2, 2, 2, 3), 1.5))
    with pytest.raises(DomainError):
        VoxelField(Box([0, 0, 0], [1, 0, 1]), np.ones((2, 2, 2)), np.zeros((2, 2, 2, 3)))


# --------------------------------------------------------------------------- march_ray


def test_zero_density_profile():
    f = homogeneous(0.0)
    p = march_ray(f, axis_ray(), 32)
    assert np.all(p.weights == 0) and p.total_alpha == 0 and p.accumulated_depth == 0
    assert field_depth(f, axis_ray(), 32) == 0.0


@pytest.mark.parametrize("n", [64, 256, 1024])
def test_homogeneous_transmittance(n):
    p = march_ray(homogeneous(), axis_ray(0.0, 10.0), n)
    assert abs(cdf_at(p, 1.0) - (1 - np.exp(-1))) < 2.0 / n


def test_homogeneous_error_shrinks():
    errs = [abs(cdf_at(march_ray(homogeneous(), axis_ray(), n), 1.0) - (1 - np.exp(-1))) for n in (64, 256, 1024)]
    assert errs[0] > errs[1] > errs[2]


def test_homogeneous_mean_depth():
    # mean of the Exp(1) termination distribution; the far tail beyond t=30 is e^-30
    p = march_ray(homogeneous(half=40.0), axis_ray(0.0, 30.0), 4096)
    assert p.accumulated_depth == pytest.approx(1.0, abs=1e-3)
    assert field_depth(homogeneous(half=40.0), axis_ray(0.0, 30.0), 4096) == p.accumulated_depth


def test_thin_slab_depth():
    # two very dense nodes at z = 3.00, 3.01 on a 0.01 grid: a slab thinner than an interval
    z = np.linspace(-1, 9, 1001)
    dens = np.zeros((2, 2, len(z)))
    k = np.argmin(np.abs(z - 3.0))
    dens[:, :, k:k + 2] = 5000.0
    f = VoxelField(Box([-1, -1, -1], [1, 1, 9]), dens, np.full(dens.shape + (3,), 0.5))
    n = 400
    p = march_ray(f, axis_ray(0.0, 8.0), n)
    assert p.total_alpha > 0.99
    assert abs(p.accumulated_depth - 3.0) <= 8.0 / n


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 200))
def test_weights_match_optical_depth(seed, n):
    rng = np.random.default_rng(seed)
    f = VoxelField(Box([-1, -1, -1], [1, 1, 1]), rng.random((5, 5, 5)) * 5, rng.random((5, 5, 5, 3)))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    p = march_ray(f, Ray(rng.uniform(-1.5, 1.5, 3), d, 0.0, 3.0), n, jitter=rng.uniform(-0.5, 0.5))
    tau = np.sum(p.sigmas * np.diff(p.ts))
    assert np.all(p.weights >= 0) and np.all(np.diff(p.cdf) >= -1e-15)
    assert p.total_alpha <= 1 + 1e-9
    assert abs(p.total_alpha - (1 - np.exp(-tau))) < 1e-6


# --------------------------------------------------------------------------- inverse CDF


def test_inverse_cdf_at_zero_is_support_start():
    z = np.linspace(0, 10, 101)
    dens = np.zeros((2, 2, 101))
    dens[:, :, z >= 4.0] = 1.0
    f = VoxelField(Box([-1, -1, 0], [1, 1, 10]), dens, np.zeros(dens.shape + (3,)))
    p = march_ray(f, axis_ray(0.0, 10.0), 100)
    first = np.argmax(p.weights > 0)
    assert inverse_cdf_sample(p, 0.0) == pytest.approx(p.ts[first])
    assert 3.9 <= inverse_cdf_sample(p, 0.0) <= 4.0


def test_inverse_cdf_homogeneous():
    n = 256
    p = march_ray(homogeneous(), axis_ray(0.0, 10.0), n)
    # the normalized CDF is (1 - e^-t) / (1 - e^-10)
    u = (1 - np.exp(-1)) / (1 - np.exp(-10))
    assert abs(inverse_cdf_sample(p, u) - 1.0) < 2 * 10.0 / n


def test_two_slabs_quantiles():
    # slabs of equal termination mass: 1 - a1 = 0.6 and a2 = a1 / (1 - a1)
    h = 0.05
    z = np.arange(-1.0, 11.0 + h / 2, h)
    dens = np.zeros((2, 2, len(z)))
    dens[:, :, (z >= 2.0) & (z <= 3.0)] = -np.log(0.6)
    dens[:, :, (z >= 6.0) & (z <= 7.0)] = -np.log(1 - 0.4 / 0.6)
    f = VoxelField(Box([-1, -1, z[0]], [1, 1, z[-1]]), dens, np.zeros(dens.shape + (3,)))
    n = 1000
    p = march_ray(f, axis_ray(0.0, 10.0), n)
    # brute-force tabulation of the same CDF at 1e5 points
    t = np.linspace(0.0, 10.0, 100_001)
    sig, _ = sample_field(f, np.stack([np.zeros_like(t), np.zeros_like(t), t], -1))
    tau = np.concatenate([[0.0], np.cumsum(0.5 * (sig[1:] + sig[:-1]) * np.diff(t))])
    W = 1 - np.exp(-tau)
    for u, (lo, hi) in ((0.25, (2.0, 3.0)), (0.75, (6.0, 7.0))):
        got = inverse_cdf_sample(p, u)
        ref = np.interp(u * W[-1], W, t)
        assert lo - h <= got <= hi + h
        assert abs(got - ref) < 2 * 10.0 / n


def test_inverse_cdf_rejects_empty_rays():
    p = march_ray(homogeneous(1e-4), axis_ray(0.0, 10.0), 64)
    with pytest.raises(RayRejected):
        inverse_cdf_sample(p, 0.5)
    with pytest.raises(DomainError):
        inverse_cdf_sample(march_ray(homogeneous(), axis_ray(), 8), 1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_inverse_cdf_monotone(seed, u1, u2):
    rng = np.random.default_rng(seed)
    f = VoxelField(Box([-1, -1, -1], [1, 1, 1]), rng.random((4, 4, 4)) * 10 * (rng.random((4, 4, 4)) > 0.5), rng.random((4, 4, 4, 3)))
    p = march_ray(f, Ray(np.array([0, 0, -1.5]), np.array([0, 0, 1.0]), 0.0, 3.0), 64)
    if p.total_alpha <= 0.01:
        return
    lo, hi = sorted((u1, u2))
    assert inverse_cdf_sample(p, lo) <= inverse_cdf_sample(p, hi)


def test_inverse_cdf_histogram_matches_weights():
    n = 64
    p = march_ray(homogeneous(), axis_ray(0.0, 10.0), n)
    rng = np.random.default_rng(7)
    draws = np.array([inverse_cdf_sample(p, u) for u in rng.random(100_000)])
    hist, _ = np.histogram(draws, bins=p.ts)
    tv = 0.5 * np.abs(hist / hist.sum() - p.weights / p.total_alpha).sum()
    assert tv < 0.01


# --------------------------------------------------------------------------- point sampling


def ring(n, radius=3.0, res=32):
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = [radius * np.cos(a), radius * np.sin(a), 0.7]
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 0, 1], res, res, res / 2, res / 2, res, res, 0.05, 8.0))
    return cams


def cube_field(h=0.1):
    n = int(round(4 / h)) + 1
    f = VoxelField.empty((n, n, n), Box([-2] * 3, [2] * 3))
    pos = f.node_positions()
    inside = np.all(np.abs(pos) <= 0.5 + 1e-9, axis=-1)
    f.density[inside] = 50.0
    f.color[inside] = [0.8, 0.2, 0.1]
    return f


def test_point_cloud_on_cube():
    f = cube_field()
    # intervals (8/512) well below the voxel width so quadrature does not smear the surface
    pc = sample_point_cloud(f, ring(6), 10_000, seed=3, n_samples=512)
    assert len(pc) == 10_000
    inside = np.all(np.abs(pc.positions) <= 0.5 + 0.1, axis=1)
    assert inside.mean() >= 0.99


def test_point_cloud_colors_match_field_and_seed():
    f = cube_field(0.2)
    a = sample_point_cloud(f, ring(4, res=16), 500, seed=1)
    b = sample_point_cloud(f, ring(4, res=16), 500, seed=1)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.colors, b.colors)
    _, c = sample_field(f, a.positions)
    np.testing.assert_array_equal(a.colors, c)


def test_point_cloud_white_field_colors_stay_in_range():
    # trilinear weights of all-ones colors can sum to 1 + eps
    f = cube_field(0.2)
    f.color[:] = 1.0
    pc = sample_point_cloud(f, ring(4, res=16), 2000, seed=0)
    assert pc.colors.max() == 1.0


def test_point_cloud_degenerate_field():
    f = VoxelField.empty((3, 3, 3), Box([-1] * 3, [1] * 3))
    with pytest.raises(DegenerateField):
        sample_point_cloud(f, ring(2), 10, seed=0)


# --------------------------------------------------------------------------- gradients and training


def _fd_field_grad(field, o, d, targets, n, bg):
    h = 1e-4
    gd = np.zeros_like(field.density)
    gc = np.zeros_like(field.color)
    for arr, out in ((field.density, gd), (field.color, gc)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = photometric_loss_and_grad(field, o, d, 0.0, 3.0, targets, n, bg)[0]
            arr[idx] = old - h
            lm = photometric_loss_and_grad(field, o, d, 0.0, 3.0, targets, n, bg)[0]
            arr[idx] = old
            out[idx] = (lp - lm) / (2 * h)
    return gd, gc


def test_photometric_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    f = VoxelField(Box([-1] * 3, [1] * 3), rng.uniform(0.5, 3.0, (4, 4, 4)), rng.uniform(0.2, 0.8, (4, 4, 4, 3)))
    o = rng.uniform(-0.3, 0.3, (8, 3)) + [0, 0, -1.6]
    d = rng.normal(size=(8, 3)) * 0.2 + [0, 0, 1]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    targets = rng.random((8, 3))
    bg = np.array([0.2, 0.3, 0.4])
    _, gd, gc = photometric_loss_and_grad(f, o, d, 0.0, 3.0, targets, 24, bg)
    fd, fc = _fd_field_grad(f, o, d, targets, 24, bg)
    for a, b in ((gd, fd), (gc, fc)):
        rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-6)
        assert rel.max() < 1e-4


def gray_dataset(n_views=6, res=16):
    cams = ring(n_views, res=res)
    imgs = [np.full((res, res, 3), 0.5) for _ in cams]
    return Dataset(cams, imgs, list(range(n_views - 1)), [n_views - 1])


def test_train_zero_iters_returns_field():
    f = homogeneous()
    assert train_field(f, gray_dataset(), 0) is f


def test_train_gray_scene():
    ds = gray_dataset()
    f0 = VoxelField(Box([-4] * 3, [4] * 3), np.full((9, 9, 9), 0.05), np.full((9, 9, 9, 3), 0.2))
    held = RaySet.from_views(ds.test_cameras, ds.test_images)
    before = photometric_loss_and_grad(f0, held.origins, held.dirs, held.t_min, held.t_max, held.colors, 64)[0]
    f = train_field(f0, ds, 500, lr=0.1, rays_per_iter=256, seed=0, n_samples=64)
    after = photometric_loss_and_grad(f, held.origins, held.dirs, held.t_min, held.t_max, held.colors, 64)[0]
    assert after < before
    assert after < 1e-3


def test_train_rejects_negative_iters():
    with pytest.raises(DomainError):
        train_field(homogeneous(), gray_dataset(), -1)


# --------------------------------------------------------------------------- checkpoint


def test_vfld_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(2)
    f = VoxelField(Box([-1, -2, -3], [1, 2, 3.5]), rng.random((3, 4, 5)) * 7, rng.random((3, 4, 5, 3)))
    save_field(f, tmp_path / "f.vfld")
    g = load_field(tmp_path / "f.vfld")
    np.testing.assert_array_equal(g.density, f.density.astype(np.float32))
    np.testing.assert_array_equal(g.color, f.color.astype(np.float32))
    np.testing.assert_array_equal(g.bounds.lo, f.bounds.lo)
    np.testing.assert_array_equal(g.bounds.hi, f.bounds.hi)


def test_vfld_layout_x_fastest(tmp_path):
    dens = np.arange(24, dtype=float).reshape(2, 3, 4)
    col = np.zeros((2, 3, 4, 3))
    col[..., 0] = 0.5
    f = VoxelField(Box([0, 0, 0], [1, 1, 1]), dens, col)
    save_field(f, tmp_path / "f.vfld")
    raw = (tmp_path / "f.vfld").read_bytes()
    head = 4 + struct.calcsize("<I3I6d")
    assert raw[:4] == b"VFLD"
    assert struct.unpack("<I3I", raw[4:20]) == (1, 2, 3, 4)
    stored = np.frombuffer(raw, "<f4", 24, head)
    # x varies fastest: node (1,0,0) is second, node (0,1,0) third
    assert stored[:3].tolist() == [dens[0, 0, 0], dens[1, 0, 0], dens[0, 1, 0]]
    rgb = np.frombuffer(raw, "<f4", 72, head + 96).reshape(24, 3)
    np.testing.assert_array_equal(rgb[:, 0], 0.5)


def test_vfld_rejects_bad_files(tmp_path):
    (tmp_path / "bad.vfld").write_bytes(b"NOPE" + bytes(80))
    with pytest.raises(ValueError):
        load_field(tmp_path / "bad.vfld")
    f = homogeneous()
    save_field(f, tmp_path / "f.vfld")
    data = (tmp_path / "f.vfld").read_bytes()
    (tmp_path / "t.vfld").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        load_field(tmp_path / "t.vfld")


def test_render_image_shapes():
    cam = ring(1, res=8)[0]
    rgb, depth, alpha = render_image(cube_field(0.25), cam, 32)
    assert rgb.shape == (8, 8, 3) and depth.shape == alpha.shape == (8, 8)
    assert np.all((alpha >= 0) & (alpha <= 1 + 1e-12))
    assert alpha[4, 4] > 0.99
