"""Shared fixtures-as-functions: small scenes and a central-difference checker."""

import numpy as np

from splatinit.distill import loss_depth, loss_gs
from splatinit.geometry import Camera
from splatinit.splat import GaussianScene, render, render_backward


def small_scene(seed=0, n=5, degree=1):
    rng = np.random.default_rng(seed)
    k = (degree + 1) ** 2
    cam = Camera.look_at([0.3, -0.2, -4.0], [0, 0, 0], [0, -1, 0], 10, 10, 4, 4, 8, 8)
    scene = GaussianScene(
        rng.normal(0, 0.4, (n, 3)), np.log(rng.uniform(0.2, 0.5, (n, 3))), rng.normal(size=(n, 4)),
        rng.normal(0, 1, n), rng.normal(0, 1, (n, k, 3)), [0.1, 0.2, 0.3], degree,
    )
    gt = rng.random((8, 8, 3))
    target = rng.random((8, 8)) * 5
    mask = rng.random((8, 8)) > 0.2
    return scene, cam, gt, target, mask


def combined_loss(scene, cam, gt, target, mask, lam):
    out = render(scene, cam)
    l_gs, g_c = loss_gs(out.color, gt, 0.2)
    l_d, g_d = loss_depth(out.depth, target, mask)
    return l_gs + lam * l_d, g_c, lam * g_d, out


def fd_errors(scene, cam, loss_fn, analytic, h=1e-5, floor=1e-6):
    """Max relative error per parameter group between ``analytic`` and central differences of ``loss_fn``."""
    worst = {}
    for name, arr in scene.params().items():
        ga = analytic[name]
        w = 0.0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss_fn(scene)
            arr[idx] = old - h
            lm = loss_fn(scene)
            arr[idx] = old
            f = (lp - lm) / (2 * h)
            w = max(w, abs(ga[idx] - f) / max(abs(f), floor))
        worst[name] = w
    return worst


def combined_gradient_errors(seed=0, lam=0.9):
    scene, cam, gt, target, mask = small_scene(seed)
    _, g_c, g_d, out = combined_loss(scene, cam, gt, target, mask, lam)
    grads = render_backward(scene, cam, g_c, g_d, out).as_dict()
    return fd_errors(scene, cam, lambda s: combined_loss(s, cam, gt, target, mask, lam)[0], grads)
