import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatinit.dataset import Dataset
from splatinit.distill import (
    DensifyStats, DepthSupervision, DistillConfig, LOG_COLUMNS, densify_and_prune, depth_warnings, lambda_schedule,
    loss_depth, loss_gs, precompute_depth, train_splat, write_metrics_csv,
)
from splatinit.geometry import Box, Camera, DomainError
from splatinit.optim import Adam
from splatinit.splat import GaussianScene, render
from splatinit.volfield import VoxelField


# --------------------------------------------------------------------------- schedule


def test_lambda_defaults():
    c = DistillConfig()
    assert (c.lambda_init, c.decay, c.decay_step) == (0.9, 0.9, 100)
    assert lambda_schedule(0, c) == 0.9
    assert abs(lambda_schedule(100, c) - 0.81) < 1e-12
    assert abs(lambda_schedule(200, c) - 0.729) < 1e-12


def test_lambda_fractional_exponent():
    c = DistillConfig(lambda_init=2.0, decay=0.5, decay_step=10)
    assert lambda_schedule(5, c) == pytest.approx(2.0 * 0.5**0.5, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 5), st.floats(0.01, 1.0), st.integers(1, 500), st.integers(0, 10_000), st.integers(0, 10_000))
def test_lambda_non_increasing(lam, d, S, i, j):
    c = DistillConfig(lambda_init=lam, decay=d, decay_step=S)
    lo, hi = sorted((i, j))
    assert lambda_schedule(hi, c) <= lambda_schedule(lo, c)
    assert lambda_schedule(0, c) == lam


def test_config_validation():
    for kw in ({"lambda_init": -1}, {"decay": 0.0}, {"decay": 1.5}, {"decay_step": 0}, {"ssim_weight": 1.2}):
        with pytest.raises(DomainError):
            DistillConfig(**kw)


# --------------------------------------------------------------------------- losses


def test_loss_gs_zero_and_l1():
    rng = np.random.default_rng(0)
    a = rng.random((10, 10, 3))
    assert loss_gs(a, a)[0] == pytest.approx(0.0, abs=1e-12)
    b = np.full((10, 10, 3), 0.4)
    assert loss_gs(b + 0.1, b, ssim_weight=0.0)[0] == pytest.approx(0.1)


def test_loss_gs_gradient_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    _, g = loss_gs(a, b)
    h = 1e-6
    fd = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        old = a[idx]
        a[idx] = old + h
        p = loss_gs(a, b)[0]
        a[idx] = old - h
        m = loss_gs(a, b)[0]
        a[idx] = old
        fd[idx] = (p - m) / (2 * h)
    assert (np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)).max() < 1e-4


def test_loss_gs_shape_mismatch():
    with pytest.raises(DomainError):
        loss_gs(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_loss_depth_examples():
    rng = np.random.default_rng(2)
    d = rng.random((6, 6)) * 4
    mask = rng.random((6, 6)) > 0.3
    assert loss_depth(d, d, mask)[0] == 0.0
    assert loss_depth(d + 0.5, d, mask)[0] == pytest.approx(0.5, abs=1e-12)
    t = rng.random((6, 6)) * 4
    brute = sum(abs(x - y) for x, y, m in zip(d.ravel(), t.ravel(), mask.ravel()) if m) / mask.sum()
    assert abs(loss_depth(d, t, mask)[0] - brute) < 1e-12


def test_loss_depth_ignores_masked_entries():
    d = np.ones((3, 3))
    t = np.full((3, 3), np.nan)
    t[1, 1] = 0.0
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 1] = True
    loss, g = loss_depth(d, t, mask)
    assert loss == 1.0 and np.isfinite(g).all() and g[0, 0] == 0.0


def test_loss_depth_empty_mask(caplog):
    before = depth_warnings.empty_masks
    with caplog.at_level(logging.WARNING):
        loss, g = loss_depth(np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    assert loss == 0.0 and np.all(g == 0)
    assert depth_warnings.empty_masks == before + 1


# --------------------------------------------------------------------------- density control


def scene_of(n, scale=0.05, opacity=0.5, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianScene(rng.normal(size=(n, 3)), np.full((n, 3), np.log(scale)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, np.log(opacity / (1 - opacity))), rng.normal(size=(n, 1, 3)))


def stats_for(n, grads):
    s = DensifyStats.zeros(n)
    s.grad_accum[:] = grads
    s.count[:] = 1
    return s


def test_densify_noop():
    sc = scene_of(5)
    out = densify_and_prune(sc, stats_for(5, 1e-6), DistillConfig(), 1.0, np.random.default_rng(0))
    for k in sc.params():
        np.testing.assert_array_equal(out.params()[k], sc.params()[k])


def test_prune_transparent():
    sc = scene_of(4)
    sc.opacity_logits[2] = np.log(0.001 / 0.999)
    out = densify_and_prune(sc, stats_for(4, 0.0), DistillConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == 3
    np.testing.assert_array_equal(out.means, sc.means[[0, 1, 3]])


def test_split_large_high_gradient():
    sc = scene_of(3, scale=0.5)
    g = np.array([0.0, 1.0, 0.0])
    out = densify_and_prune(sc, stats_for(3, g), DistillConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == 4
    np.testing.assert_array_equal(out.means[:2], sc.means[[0, 2]])
    np.testing.assert_allclose(np.exp(out.log_scales[2:]), 0.5 / 1.6)


def test_clone_small_high_gradient():
    sc = scene_of(3, scale=0.001)
    g = np.array([1.0, 0.0, 0.0])
    out = densify_and_prune(sc, stats_for(3, g), DistillConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == 4
    np.testing.assert_array_equal(out.log_scales[3], sc.log_scales[0])
    assert np.linalg.norm(out.means[3] - sc.means[0]) < 0.01


def test_cap_and_optimizer_rows():
    sc = scene_of(10, scale=0.5)
    cfg = DistillConfig(max_primitives=12)
    opt = Adam(sc.params(), {k: 0.1 for k in sc.params()})
    opt.step({k: np.ones_like(v) for k, v in sc.params().items()})
    out = densify_and_prune(sc, stats_for(10, 1.0), cfg, 1.0, np.random.default_rng(0), opt)
    assert len(out) <= 12
    for k in opt.params:
        assert len(opt.params[k]) == len(opt.m[k]) == len(opt.v[k]) == len(out)
    # surviving rows keep their moments, new rows start from zero
    assert np.all(opt.m["means"][: len(out) - 4] != 0)
    assert np.all(opt.m["means"][-4:] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 60))
def test_densify_invariants(seed, n, cap):
    rng = np.random.default_rng(seed)
    sc = scene_of(n, seed=seed)
    sc.log_scales[:] = np.log(rng.uniform(0.001, 0.5, (n, 1)))
    sc.opacity_logits[:] = rng.normal(-3, 3, n)
    cfg = DistillConfig(max_primitives=max(cap, n))
    st_ = stats_for(n, rng.exponential(2e-4, n))
    out = densify_and_prune(sc, st_, cfg, 1.0, rng)
    assert len(out) <= cfg.max_primitives
    # every opaque primitive that was not split survives unchanged
    opaque = sc.opacities >= cfg.prune_opacity_threshold
    kept = {tuple(m) for m in out.means}
    split = (st_.grad_accum >= cfg.densify_grad_threshold) & (np.exp(sc.log_scales).max(1) > cfg.percent_dense)
    for i in np.flatnonzero(opaque & ~split):
        assert tuple(sc.means[i]) in kept


# --------------------------------------------------------------------------- training loop


def tiny_dataset(res=16, n_views=5):
    rng = np.random.default_rng(0)
    cams = []
    for k in range(n_views):
        a = 2 * np.pi * k / n_views
        cams.append(Camera.look_at([3 * np.cos(a), 3 * np.sin(a), 0.5], [0, 0, 0], [0, 0, 1], res, res, res / 2, res / 2, res, res, 0.05, 8.0))
    target = scene_of(30, scale=0.15, opacity=0.8, seed=7)
    target.means *= 0.4
    imgs = [np.clip(render(target, c).color, 0, 1) for c in cams]
    return Dataset(cams, imgs, list(range(n_views - 1)), [n_views - 1])


def tiny_field():
    n = 9
    f = VoxelField.empty((n, n, n), Box([-1] * 3, [1] * 3))
    f.density[2:7, 2:7, 2:7] = 20.0
    f.color[:] = 0.5
    return f


def test_zero_iters():
    sc = scene_of(6)
    res = train_splat(sc, tiny_dataset(), config=DistillConfig(total_iters=0))
    assert res.log == []
    np.testing.assert_array_equal(res.scene.means, sc.means)


def test_empty_scene_rejected():
    with pytest.raises(DomainError):
        train_splat(scene_of(0), tiny_dataset())


def test_training_reduces_loss_and_is_deterministic():
    ds = tiny_dataset()
    cfg = DistillConfig(total_iters=300, densify_from=50, densify_until=250, densify_interval=50)
    a = train_splat(scene_of(40, scale=0.2, opacity=0.3, seed=1), ds, config=cfg)
    b = train_splat(scene_of(40, scale=0.2, opacity=0.3, seed=1), ds, config=cfg)
    assert a.log == b.log
    losses = np.array([r["loss_gs"] for r in a.log])
    assert losses[-50:].mean() < losses[:50].mean()
    assert set(a.log[0]) == set(LOG_COLUMNS)
    assert all(r["n_primitives"] <= cfg.max_primitives for r in a.log)


def test_lambda_zero_is_inert():
    ds = tiny_dataset()
    cfg = DistillConfig(total_iters=120, lambda_init=0.0, densify_from=40, densify_interval=40)
    with_field = train_splat(scene_of(20, scale=0.2, seed=2), ds, tiny_field(), cfg)
    without = train_splat(scene_of(20, scale=0.2, seed=2), ds, None, cfg)
    assert with_field.log == without.log


def test_depth_term_changes_training():
    ds = tiny_dataset()
    cfg = DistillConfig(total_iters=40)
    with_field = train_splat(scene_of(20, scale=0.2, seed=2), ds, tiny_field(), cfg)
    without = train_splat(scene_of(20, scale=0.2, seed=2), ds, None, cfg)
    assert with_field.log[0]["lambda"] == 0.9 and with_field.log[0]["loss_depth"] > 0
    assert with_field.log != without.log


def test_precompute_depth_mask():
    sup = precompute_depth(tiny_field(), tiny_dataset().train_cameras, 64, 0.5)
    assert isinstance(sup, DepthSupervision) and len(sup.depth) == 4
    m = sup.mask[0]
    assert m[8, 8] and not m[0, 0]
    assert 2.0 < sup.depth[0][8, 8] < 3.0


def test_metrics_csv(tmp_path):
    ds = tiny_dataset()
    res = train_splat(scene_of(10, scale=0.2), ds, config=DistillConfig(total_iters=3))
    write_metrics_csv(res.log, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "iter,loss_total,loss_gs,loss_depth,lambda,n_primitives,train_psnr"
    assert len(lines) == 4


def test_checkpoints_written(tmp_path):
    ds = tiny_dataset()
    train_splat(scene_of(10, scale=0.2), ds, config=DistillConfig(total_iters=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["iter_000002.gspl", "iter_000004.gspl"]
