"""Splat training: photometric loss, optional depth distillation from a voxel field,
a decaying depth weight, and clone/split/prune density control."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from splatinit.geometry import Camera, DomainError
from splatinit.metrics import psnr, ssim_and_grad
from splatinit.optim import Adam
from splatinit.splat import GaussianScene, RenderOutput, render, render_backward, save_scene
from splatinit.volfield import VoxelField, render_image

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "loss_total", "loss_gs", "loss_depth", "lambda", "n_primitives", "train_psnr")


@dataclass
class DistillConfig:
    lambda_init: float = 0.9
    decay: float = 0.9
    decay_step: int = 100
    total_iters: int = 3000
    lr: dict = field(default_factory=lambda: {
        "means": 1.6e-4, "means_final": 1.6e-6, "sh": 0.0025, "opacity_logits": 0.05,
        "log_scales": 0.005, "quats": 0.001,
    })
    densify_from: int = 200
    densify_until: int = 2000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity_threshold: float = 0.005
    max_primitives: int = 60_000
    opacity_reset_at: int | None = None
    ssim_weight: float = 0.2
    depth_mask_alpha: float = 0.5
    depth_samples: int = 128
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_init < 0:
            raise DomainError("lambda_init must be >= 0")
        if not 0 < self.decay <= 1:
            raise DomainError("decay must lie in (0, 1]")
        if self.decay_step < 1:
            raise DomainError("decay_step must be >= 1")
        if not 0 <= self.ssim_weight <= 1:
            raise DomainError("ssim_weight must lie in [0, 1]")


@dataclass
class DepthSupervision:
    """Field depth per training view, with a mask of rays the loss may read."""

    depth: list[np.ndarray]
    mask: list[np.ndarray]


def lambda_schedule(i: int, config: DistillConfig) -> float:
    """Depth-loss weight at iteration ``i``: lambda_init * decay ** (i / decay_step)."""
    if i < 0:
        raise DomainError("iteration must be >= 0")
    return config.lambda_init * config.decay ** (i / config.decay_step)


def loss_gs(color: np.ndarray, gt: np.ndarray, ssim_weight: float = 0.2):
    """(1 - w) * L1 + w * (1 - SSIM) and its gradient w.r.t. the rendered image."""
    color = np.asarray(color, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if color.shape != gt.shape:
        raise DomainError(f"render shape {color.shape} != target shape {gt.shape}")
    diff = color - gt
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    loss = (1.0 - ssim_weight) * l1
    if ssim_weight > 0:
        s, gs = ssim_and_grad(color, gt)
        loss += ssim_weight * (1.0 - s)
        grad -= ssim_weight * gs
    return loss, grad


class _Counter:
    empty_masks = 0


depth_warnings = _Counter()


def loss_depth(depth: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean |D_gs - D_field| over masked rays and its (sub)gradient w.r.t. ``depth``."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != np.shape(target) or depth.shape != np.shape(mask):
        raise DomainError("depth, target and mask shapes differ")
    n = int(np.count_nonzero(mask))
    if n == 0:
        depth_warnings.empty_masks += 1
        log.warning("depth supervision mask is empty")
        return 0.0, np.zeros_like(depth)
    diff = np.where(mask, depth - target, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def precompute_depth(field: VoxelField, cameras: list[Camera], n_samples: int = 128, mask_alpha: float = 0.5) -> DepthSupervision:
    depths, masks = [], []
    for cam in cameras:
        _, d, a = render_image(field, cam, n_samples)
        depths.append(d)
        masks.append(a >= mask_alpha)
    return DepthSupervision(depths, masks)


def camera_extent(cameras: list[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray
    max_radii: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))


def densify_and_prune(
    scene: GaussianScene,
    stats: DensifyStats,
    config: DistillConfig,
    extent: float,
    rng: np.random.Generator,
    optimizer: Adam | None = None,
) -> GaussianScene:
    """Clone small and split large high-gradient primitives, then prune transparent ones.

    With an optimizer the parameter dict it owns is edited in place and moment
    buffers follow their rows; new rows start with zero moments.
    """
    n = len(scene)
    if len(stats.grad_accum) != n:
        raise DomainError("densification stats do not cover every primitive")
    grads = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    high = grads >= config.densify_grad_threshold
    max_scale = np.exp(scene.log_scales).max(axis=1)
    small = max_scale <= config.percent_dense * extent
    room = max(0, config.max_primitives - n)
    clone_idx = np.flatnonzero(high & small)
    split_idx = np.flatnonzero(high & ~small)
    # Each split nets one extra primitive, each clone one; trim to the cap.
    if len(clone_idx) + len(split_idx) > room:
        order = np.argsort(-grads[np.concatenate([split_idx, clone_idx])], kind="stable")
        chosen = np.concatenate([split_idx, clone_idx])[order[:room]]
        chosen_set = np.zeros(n, dtype=bool)
        chosen_set[chosen] = True
        clone_idx = clone_idx[chosen_set[clone_idx]]
        split_idx = split_idx[chosen_set[split_idx]]

    params = scene.params()
    covs = scene.covariances()
    new = {}

    def offsets(idx):
        L = np.linalg.cholesky(covs[idx] + 1e-12 * np.eye(3))
        return np.einsum("nij,nj->ni", L, rng.standard_normal((len(idx), 3)))

    if len(clone_idx):
        rows = {k: v[clone_idx].copy() for k, v in params.items()}
        rows["means"] = rows["means"] + offsets(clone_idx)
        new = {k: [v] for k, v in rows.items()}
    if len(split_idx):
        for _ in range(2):
            rows = {k: v[split_idx].copy() for k, v in params.items()}
            rows["means"] = rows["means"] + offsets(split_idx)
            rows["log_scales"] = rows["log_scales"] - np.log(1.6)
            for k, v in rows.items():
                new.setdefault(k, []).append(v)
    new = {k: np.concatenate(v) for k, v in new.items()}

    keep = scene.opacities >= config.prune_opacity_threshold
    keep[split_idx] = False
    new_keep = None
    if new:
        new_logits = new["opacity_logits"]
        new_keep = 1.0 / (1.0 + np.exp(-new_logits)) >= config.prune_opacity_threshold
        new = {k: v[new_keep] for k, v in new.items()}

    if optimizer is not None:
        optimizer.keep_rows(keep)
        if new:
            optimizer.append_rows(new)
        merged = optimizer.params
    else:
        merged = {k: v[keep] for k, v in params.items()}
        if new:
            merged = {k: np.concatenate([merged[k], new[k]]) for k in merged}
    out = GaussianScene(
        merged["means"], merged["log_scales"], merged["quats"], merged["opacity_logits"], merged["sh"],
        scene.background, scene.sh_degree,
    )
    if optimizer is not None:
        optimizer.params = out.params()
    return out


@dataclass
class TrainResult:
    scene: GaussianScene
    log: list[dict]


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


def train_splat(
    scene: GaussianScene,
    dataset,
    field: VoxelField | None = None,
    config: DistillConfig | None = None,
    supervision: DepthSupervision | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Optimize ``scene`` on the dataset's training views.

    When ``field`` (or precomputed ``supervision``) is given, the composited
    depth is pulled toward the field's accumulated depth with weight
    ``lambda_schedule(i)``; the depth term is skipped whenever that weight is 0.
    """
    config = config or DistillConfig()
    if len(scene) == 0:
        raise DomainError("cannot train an empty scene")
    scene = scene.copy()
    cams = dataset.train_cameras
    imgs = [np.asarray(im, dtype=np.float64) for im in dataset.train_images]
    if supervision is None and field is not None and config.lambda_init > 0:
        supervision = precompute_depth(field, cams, config.depth_samples, config.depth_mask_alpha)
    if config.lambda_init == 0:
        supervision = None
    rng = np.random.default_rng(config.seed)
    extent = camera_extent(cams)
    lr = dict(config.lr)
    lr_means0 = lr.pop("means") * extent
    lr_means1 = lr.pop("means_final") * extent
    opt = Adam(scene.params(), {"means": lr_means0, **lr})
    stats = DensifyStats.zeros(len(scene))
    rows: list[dict] = []
    perm: list[int] = []
    for it in range(config.total_iters):
        if not perm:
            perm = list(rng.permutation(len(cams)))
        v = perm.pop()
        cam, gt = cams[v], imgs[v]
        frac = it / max(config.total_iters - 1, 1)
        opt.lr["means"] = float(np.exp((1 - frac) * np.log(lr_means0) + frac * np.log(lr_means1)))

        out = render(scene, cam)
        l_gs, g_color = loss_gs(out.color, gt, config.ssim_weight)
        lam = lambda_schedule(it, config) if supervision is not None else 0.0
        l_depth, g_depth = 0.0, None
        if lam > 0:
            l_depth, g_depth = loss_depth(out.depth, supervision.depth[v], supervision.mask[v])
            g_depth = lam * g_depth
        total = l_gs + lam * l_depth
        if not np.isfinite(total):
            if checkpoint_dir is not None:
                save_scene(scene, Path(checkpoint_dir) / f"diverged_{it:06d}.gspl")
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        grads = render_backward(scene, cam, g_color, g_depth, out)
        opt.step(grads.as_dict())
        q = opt.params["quats"]
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        scene.set_params(opt.params)

        visible = grads.radii > 0
        ndc = grads.mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
        stats.grad_accum[visible] += np.linalg.norm(ndc[visible], axis=1)
        stats.count[visible] += 1
        stats.max_radii[visible] = np.maximum(stats.max_radii[visible], grads.radii[visible])

        rows.append({
            "iter": it, "loss_total": total, "loss_gs": l_gs, "loss_depth": l_depth, "lambda": lam,
            "n_primitives": len(scene), "train_psnr": psnr(np.clip(out.color, 0, 1), gt),
        })
        step = it + 1
        if config.densify_from <= step <= config.densify_until and step % config.densify_interval == 0:
            scene = densify_and_prune(scene, stats, config, extent, rng, opt)
            stats = DensifyStats.zeros(len(scene))
        if config.opacity_reset_at is not None and step == config.opacity_reset_at:
            opt.params["opacity_logits"][:] = np.minimum(opt.params["opacity_logits"], np.log(0.01 / 0.99))
            opt.m["opacity_logits"][:] = 0.0
            opt.v["opacity_logits"][:] = 0.0
            scene.set_params(opt.params)
        if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_scene(scene, Path(checkpoint_dir) / f"iter_{step:06d}.gspl")
    return TrainResult(scene, rows)


def evaluate(scene: GaussianScene, cameras, images) -> dict:
    from splatinit.metrics import ssim

    ps, ss, renders = [], [], []
    for cam, img in zip(cameras, images):
        out: RenderOutput = render(scene, cam)
        c = np.clip(out.color, 0.0, 1.0)
        renders.append(c)
        ps.append(psnr(c, img))
        ss.append(ssim(c, img))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "renders": renders}
