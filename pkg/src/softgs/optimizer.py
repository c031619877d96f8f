"""Scene fitting: rendering loss, ray-variance regularization of the
competition parameters, Adam with per-group learning rates, and the classic
clone/split densification with a hard Gaussian budget.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import _kernels, plyio
from .gradients import GradientBuffer, backward_image
from .patterns import psnr as psnr_metric
from .patterns import ssim_with_grad
from .rasterizer import RenderOptions, render
from .scene import (GaussianCloud, activate_beta_grad, activate_gamma_grad,
                    logit, sigmoid)

log = logging.getLogger(__name__)

MODES = ("softmax-gs", "vanilla", "sharp-only", "softmax-only")

# densification presets tuned toward progressively sparser clouds
DENSIFY_PRESETS = {"default": 2e-4, "5pct": 4e-3, "mini": 5e-4, "light": 3e-4}


@dataclass
class LearningRates:
    """Per-group Adam learning rates; means decay exponentially to means_final."""

    means: float = 1.6e-4
    means_final: float = 1.6e-6
    log_scales: float = 5e-3
    rotations: float = 1e-3
    raw_opacities: float = 5e-2
    colors: float = 1e-2
    raw_alphas: float = 3e-4
    raw_betas: float = 3e-4
    raw_gammas: float = 2e-4

    @classmethod
    def synthetic(cls) -> "LearningRates":
        return cls()

    @classmethod
    def real_scene(cls) -> "LearningRates":
        return cls(raw_alphas=8e-4, raw_betas=8e-3, raw_gammas=4e-4)


@dataclass
class OptimizerConfig:
    steps: int = 10000
    lrs: LearningRates = field(default_factory=LearningRates)
    mode: str = "softmax-gs"
    max_gaussians: int = 4
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 8000
    opacity_reset: bool = False
    opacity_reset_interval: int = 3000
    prune_opacity_threshold: float = 5e-3
    prune_size_threshold: float = 0.4
    lambda_var: float = 0.01
    var_sample_stride: int = 4     # regularizer samples 1/stride^2 of pixels
    ssim_weight: float = 0.2
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    K_limit: int = 128
    T_min: float = 1e-4
    extent: float = 1.0            # scene scale for lr and densification sizes
    percent_dense: float = 0.01
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0   # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")
        for name in ("prune_opacity_threshold", "prune_size_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")

    @property
    def competition(self) -> bool:
        return self.mode in ("softmax-gs", "softmax-only")

    @property
    def frozen_fields(self) -> tuple:
        frozen = []
        if self.mode in ("vanilla", "softmax-only"):
            frozen.append("raw_alphas")  # keep the plain Gaussian kernel
        if not self.competition:
            frozen.extend(["raw_betas", "raw_gammas"])
        return tuple(frozen)

    def render_options(self) -> RenderOptions:
        return RenderOptions(K_limit=self.K_limit, T_min=self.T_min,
                             background=self.background,
                             competition=self.competition)


class FitDivergence(RuntimeError):
    """Loss became non-finite; a rescue checkpoint is written when possible."""


def loss(render_img, target, ssim_weight: float = 0.2):
    """(1 - w) L1 + w (1 - SSIM) plus its analytic gradient w.r.t. the render."""
    x = np.asarray(render_img, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"resolution mismatch {x.shape} vs {y.shape}")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g = np.sign(diff) / diff.size
    total = (1.0 - ssim_weight) * l1
    grad = (1.0 - ssim_weight) * g
    if ssim_weight > 0.0:
        s, gs = ssim_with_grad(x, y)
        total += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * gs
    return total, grad


def variance_regularizer(output, cloud: GaussianCloud, lambda_var: float,
                         *, stride: int = 4, phase: int = 0):
    """Penalize spread of the competition parameters along sampled rays.

    For each sampled pixel, the activated beta and gamma of the splats in its
    tape get a weighted variance penalty, weights 1 / (1 + d_i - d_front), so
    the first visible cluster dominates. Rays with fewer than two splats
    contribute nothing. Returns (loss, d/d raw_beta, d/d raw_gamma) with the
    loss already scaled by lambda_var and averaged over sampled rays.
    """
    frame = output.frame
    H, W = output.color.shape[:2]
    opts = frame.options
    ys0 = phase % stride
    xs0 = (phase // stride) % stride
    yy, xx = np.meshgrid(np.arange(ys0, H, stride), np.arange(xs0, W, stride),
                         indexing="ij")
    pys = yy.ravel().astype(np.int64)
    pxs = xx.ravel().astype(np.int64)
    K = opts.K_limit
    rows = np.full((pys.size, K), -1, dtype=np.int64)
    counts = np.zeros(pys.size, dtype=np.int64)
    ntx = (W + opts.tile_size - 1) // opts.tile_size
    _kernels.gather_ray_rows(frame.splat_mat, frame.bin_offsets, frame.bin_rows,
                             opts.tile_size, ntx, K, opts.T_min,
                             opts.competition, opts.cutoff, pys, pxs, rows, counts)
    n = len(cloud)
    g_beta_act = np.zeros(n)
    g_gamma_act = np.zeros(n)
    keep = counts >= 2
    if not np.any(keep) or lambda_var == 0.0:
        return 0.0, np.zeros(n), np.zeros(n)
    rows = rows[keep]
    counts = counts[keep]
    mask = np.arange(K)[None, :] < counts[:, None]
    safe_rows = np.where(mask, rows, 0)
    depth = frame.splat_mat[safe_rows, 5]
    d_front = np.where(mask, depth, np.inf).min(axis=1, keepdims=True)
    w = np.where(mask, 1.0 / (1.0 + depth - d_front), 0.0)
    wsum = w.sum(axis=1, keepdims=True)
    total = 0.0
    n_rays = rows.shape[0]
    # map compositing rows -> cloud rows for the gradient scatter
    cloud_rows = frame.batch.source_index[frame.order[safe_rows]]
    for col, g_acc in ((11, g_beta_act), (12, g_gamma_act)):
        vals = frame.splat_mat[safe_rows, col]
        mean = (w * vals).sum(axis=1, keepdims=True) / wsum
        dev = np.where(mask, vals - mean, 0.0)
        var = (w * dev * dev).sum(axis=1) / wsum[:, 0]
        total += float(var.sum())
        contrib = lambda_var / n_rays * 2.0 * w * dev / wsum
        np.add.at(g_acc, cloud_rows[mask], contrib[mask])
    reg = lambda_var / n_rays * total
    g_raw_beta = g_beta_act * activate_beta_grad(cloud.raw_betas)
    g_raw_gamma = g_gamma_act * activate_gamma_grad(cloud.raw_gammas)
    return reg, g_raw_beta, g_raw_gamma


class Adam:
    """Per-field Adam (beta1=0.9, beta2=0.999, eps=1e-15) over cloud arrays."""

    B1, B2, EPS = 0.9, 0.999, 1e-15

    def __init__(self, cloud: GaussianCloud):
        self.m = {name: np.zeros_like(getattr(cloud, name)) for name in cloud.FIELD_NAMES}
        self.v = {name: np.zeros_like(getattr(cloud, name)) for name in cloud.FIELD_NAMES}

    def step(self, cloud: GaussianCloud, grads: GradientBuffer, t: int,
             lrs: dict, frozen=()):
        gmap = {"means": grads.means, "log_scales": grads.log_scales,
                "rotations": grads.rotations, "raw_opacities": grads.raw_opacities,
                "colors": grads.colors, "raw_alphas": grads.raw_alphas,
                "raw_betas": grads.raw_betas, "raw_gammas": grads.raw_gammas}
        for name, g in gmap.items():
            if name in frozen or lrs[name] == 0.0:
                continue
            bad = ~np.isfinite(g)
            if np.any(bad):
                log.warning("skipping %d non-finite gradients in %s", bad.sum(), name)
                g = np.where(bad, 0.0, g)
            m = self.m[name]
            v = self.v[name]
            m *= self.B1
            m += (1 - self.B1) * g
            v *= self.B2
            v += (1 - self.B2) * g * g
            mhat = m / (1 - self.B1 ** t)
            vhat = v / (1 - self.B2 ** t)
            getattr(cloud, name)[...] -= lrs[name] * mhat / (np.sqrt(vhat) + self.EPS)

    def reindex(self, keep_mask: np.ndarray, n_new: int):
        """Drop state of pruned rows and append zero state for new Gaussians."""
        for d in (self.m, self.v):
            for name, arr in d.items():
                kept = arr[keep_mask]
                pad = np.zeros((n_new,) + arr.shape[1:])
                d[name] = np.concatenate([kept, pad], axis=0)

    def reset_field(self, name: str):
        self.m[name][...] = 0.0
        self.v[name][...] = 0.0


def adam_step(cloud, grads, step, lr_table, *, state: Optional[Adam] = None,
              frozen=()):
    """One Adam update; creates fresh state when none is supplied."""
    state = state or Adam(cloud)
    state.step(cloud, grads, step, lr_table, frozen)
    return state


@dataclass
class DensifyStats:
    """Accumulated view-space positional gradients between densify rounds."""

    grad_sum: np.ndarray
    seen: np.ndarray
    max_radius_frac: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def update(self, center_grads, visible_index, radii, camera):
        # half-resolution scaling matches the usual view-space gradient units
        g = center_grads * np.array([camera.width, camera.height]) / 2.0
        norms = np.linalg.norm(g, axis=1)
        self.grad_sum[visible_index] += norms
        self.seen[visible_index] += 1.0
        frac = radii / min(camera.width, camera.height)
        np.maximum.at(self.max_radius_frac, visible_index, frac)


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats,
                      config: OptimizerConfig, rng: np.random.Generator,
                      adam: Optional[Adam] = None, *, allow_size_prune: bool = False):
    """Clone small / split large high-gradient Gaussians, then prune.

    Candidates are admitted in descending gradient order until max_gaussians.
    Splits replace the parent with two children sampled from its own
    distribution, scales shrunk by 1.6. Pruning removes nearly transparent
    Gaussians, and (only while opacity resets are active) those whose splat
    covered more than prune_size_threshold of the view.
    """
    n = len(cloud)
    denom = np.maximum(stats.seen, 1.0)
    grads = stats.grad_sum / denom
    scales = np.exp(cloud.log_scales).max(axis=1)
    hot = grads > config.densify_grad_threshold
    budget = config.max_gaussians - n
    clone_mask = hot & (scales <= config.percent_dense * config.extent)
    split_mask = hot & (scales > config.percent_dense * config.extent)
    candidates = np.nonzero(clone_mask | split_mask)[0]
    if budget <= 0:
        candidates = candidates[:0]
    elif candidates.size > budget:
        order = np.argsort(-grads[candidates], kind="stable")
        candidates = candidates[order[:budget]]

    keep = np.ones(n, dtype=bool)
    new_rows = {name: [] for name in cloud.FIELD_NAMES}
    new_ids = []

    def append_row(src, *, mean=None, log_scale=None):
        for name in cloud.FIELD_NAMES:
            val = getattr(cloud, name)[src].copy()
            if name == "means" and mean is not None:
                val = mean
            if name == "log_scales" and log_scale is not None:
                val = log_scale
            new_rows[name].append(val)

    for i in candidates:
        if clone_mask[i]:
            append_row(i)
            new_ids.append(1)
        else:
            keep[i] = False
            cov = _covariance_of(cloud, i)
            for _ in range(2):
                sample = rng.multivariate_normal(cloud.means[i], cov)
                append_row(i, mean=sample,
                           log_scale=cloud.log_scales[i] - np.log(1.6))
                new_ids.append(1)

    # pruning
    opacity = sigmoid(cloud.raw_opacities)
    prune = opacity < config.prune_opacity_threshold
    if allow_size_prune:
        prune |= stats.max_radius_frac > config.prune_size_threshold
    keep &= ~prune

    n_new = len(new_ids)
    ids_new = cloud.allocate_ids(n_new)
    arrays = {}
    for name in cloud.FIELD_NAMES:
        base = getattr(cloud, name)[keep]
        if n_new:
            add = np.stack(new_rows[name]) if base.ndim == 2 else np.asarray(new_rows[name])
            arrays[name] = np.concatenate([base, add], axis=0)
        else:
            arrays[name] = base
    ids = np.concatenate([cloud.ids[keep], ids_new])
    out = GaussianCloud(ids=ids, metadata=dict(cloud.metadata), **arrays)
    out._next_id = cloud._next_id
    if adam is not None:
        adam.reindex(keep, n_new)
    return out


def _covariance_of(cloud, i):
    from .scene import quat_to_rotmat

    R = quat_to_rotmat(cloud.rotations[i])
    s2 = np.exp(2.0 * cloud.log_scales[i])
    return (R * s2) @ R.T


def reset_opacity(cloud: GaussianCloud, adam: Optional[Adam] = None,
                  ceiling: float = 0.01):
    op = sigmoid(cloud.raw_opacities)
    cloud.raw_opacities[...] = logit(np.minimum(op, ceiling))
    if adam is not None:
        adam.reset_field("raw_opacities")


def fit(cloud: GaussianCloud, views, config: OptimizerConfig,
        out_dir: Optional[str] = None):
    """Optimize the cloud against (camera, target) pairs.

    Returns (cloud, trace) where trace is a list of metric dicts
    (step, loss, psnr, n_gaussians). With an out_dir, writes metrics.csv and
    optional periodic checkpoints.
    """
    if not views:
        raise ValueError("at least one (camera, target) view is required")
    views = [(cam, np.asarray(img, dtype=np.float64)) for cam, img in views]
    rng = np.random.default_rng(config.seed)
    cloud = cloud.copy()
    adam = Adam(cloud)
    opts = config.render_options()
    stats = DensifyStats.zeros(len(cloud))
    trace = []
    lr_table = {
        "means": config.lrs.means * config.extent,
        "log_scales": config.lrs.log_scales, "rotations": config.lrs.rotations,
        "raw_opacities": config.lrs.raw_opacities, "colors": config.lrs.colors,
        "raw_alphas": config.lrs.raw_alphas, "raw_betas": config.lrs.raw_betas,
        "raw_gammas": config.lrs.raw_gammas,
    }
    frozen = config.frozen_fields
    decay = (config.lrs.means_final / config.lrs.means) if config.lrs.means else 1.0

    out = None
    for step in range(1, config.steps + 1):
        camera, target = views[(step - 1) % len(views)]
        out = render(cloud, camera, opts)
        total, dL = loss(out.color, target, config.ssim_weight)
        grads, aux = backward_image(out, dL, cloud)
        if config.lambda_var > 0.0 and config.competition:
            reg, g_beta, g_gamma = variance_regularizer(
                out, cloud, config.lambda_var, stride=config.var_sample_stride,
                phase=step)
            total += reg
            grads.raw_betas += g_beta
            grads.raw_gammas += g_gamma
        if not np.isfinite(total):
            if out_dir:
                plyio.save_ply(os.path.join(out_dir, "diverged.ply"), cloud)
            raise FitDivergence(f"loss is not finite at step {step}")

        lr_table["means"] = config.lrs.means * config.extent * decay ** (step / config.steps)
        adam.step(cloud, grads, step, lr_table, frozen)

        stats.update(aux.center_grads, aux.visible_index,
                     out.frame.batch.radii, camera)

        if (config.densify_start <= step <= config.densify_end
                and step % config.densify_interval == 0):
            allow_size = config.opacity_reset and step > config.opacity_reset_interval
            cloud = densify_and_prune(cloud, stats, config, rng, adam,
                                      allow_size_prune=allow_size)
            stats = DensifyStats.zeros(len(cloud))
        if config.opacity_reset and step % config.opacity_reset_interval == 0:
            reset_opacity(cloud, adam)

        if step % config.log_interval == 0 or step == config.steps:
            trace.append({"step": step, "loss": total,
                          "psnr": psnr_metric(out.color, target),
                          "n_gaussians": len(cloud)})
        if (out_dir and config.checkpoint_interval
                and step % config.checkpoint_interval == 0):
            plyio.save_ply(os.path.join(out_dir, f"checkpoint_{step:06d}.ply"), cloud)

    if config.steps == 0:
        camera, target = views[0]
        out = render(cloud, camera, opts)
        trace.append({"step": 0, "loss": loss(out.color, target, config.ssim_weight)[0],
                      "psnr": psnr_metric(out.color, target), "n_gaussians": len(cloud)})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "loss", "psnr", "n_gaussians"])
            writer.writeheader()
            writer.writerows(trace)
    return cloud, trace
