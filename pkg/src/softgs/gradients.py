"""Linear-time backward pass from image-space loss gradients to raw Gaussian
parameters, using the per-pixel tape layout of the forward pass.

Per pixel the pass walks records far-to-near, recomputing each compositing
step from its cached pre-state and chaining adjoints through the softmax
weighting, the order-invariance correction, the depth-decay interpolation,
the transmittance rescale, and both moving-average recurrences; the plain
product-rule tail beyond the tape is reconstructed the classic way. Per-splat
2D gradients are then pushed through the projection into the cloud's raw
parameter space.

Accumulation across pixels uses per-tile buffers reduced in fixed order, so
gradients are deterministic for any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .compositor import ContractViolationError, PixelTape
from .projection import project_backward
from .rasterizer import RenderOptions, RenderOutput, splat_matrix
from .scene import GaussianCloud


@dataclass
class GradientBuffer:
    """Per-Gaussian gradient accumulators mirroring every learnable field."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray
    raw_alphas: np.ndarray
    raw_betas: np.ndarray
    raw_gammas: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(means=np.zeros((n, 3)), log_scales=np.zeros((n, 3)),
                   rotations=np.zeros((n, 4)), raw_opacities=np.zeros(n),
                   colors=np.zeros((n, 3)), raw_alphas=np.zeros(n),
                   raw_betas=np.zeros(n), raw_gammas=np.zeros(n))

    def add(self, other: "GradientBuffer"):
        for name in vars(self):
            getattr(self, name)[...] += getattr(other, name)

    def check_finite(self):
        for name, arr in vars(self).items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in {name}")


@dataclass
class BackwardAux:
    """Splat-space byproducts of the backward pass used by the optimizer."""

    splat_grads: np.ndarray     # (M, 13) gradients in kernel column layout
    center_grads: np.ndarray    # (M, 2) pixel-space center gradients
    visible_index: np.ndarray   # (M,) cloud rows of the non-culled splats


def backward_image(output: RenderOutput, dL_dimage, cloud: GaussianCloud,
                   act=None):
    """Gradients of a scalar loss w.r.t. every raw cloud parameter.

    `dL_dimage` is (H, W, 3), the loss gradient w.r.t. the rendered color
    (background included). Returns (GradientBuffer, BackwardAux).
    """
    frame = output.frame
    opts = frame.options
    H, W = output.color.shape[:2]
    dL = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dL.shape != (H, W, 3):
        raise ContractViolationError(f"dL_dimage shape {dL.shape} != {(H, W, 3)}")
    entries = np.zeros((frame.bin_rows.shape[0], _kernels.NGRAD))
    bg = np.asarray(opts.background, dtype=np.float64)
    _kernels.backward_tiles(frame.splat_mat, frame.bin_offsets, frame.bin_rows,
                            H, W, opts.tile_size, opts.K_limit, opts.T_min,
                            opts.competition, opts.cutoff,
                            opts.detach_moving_averages, bg, dL, entries)
    # fixed-order reduction: bin entries -> compositing rows -> batch rows
    sorted_grads = np.zeros((len(frame.batch), _kernels.NGRAD))
    np.add.at(sorted_grads, frame.bin_rows, entries)
    splat_grads = np.zeros_like(sorted_grads)
    splat_grads[frame.order] = sorted_grads
    if act is None:
        act = cloud.activated()
    grads = project_backward(
        frame.batch, act,
        g_center=splat_grads[:, 0:2], g_conic=splat_grads[:, 2:5],
        g_depth=splat_grads[:, 5], g_color=splat_grads[:, 6:9],
        g_opacity=splat_grads[:, 9], g_alpha=splat_grads[:, 10],
        g_beta=splat_grads[:, 11], g_gamma=splat_grads[:, 12], cloud=cloud)
    buf = GradientBuffer(**grads)
    aux = BackwardAux(splat_grads=splat_grads, center_grads=splat_grads[:, 0:2],
                      visible_index=frame.batch.source_index)
    return buf, aux


def backward_pixel(tape: PixelTape, splats, dL_dcolor, splat_grads, *,
                   background=(0.0, 0.0, 0.0), T_min=None, competition=True,
                   detach_moving_averages=False):
    """Backward pass for a single pixel from its tape and splat list.

    `splats` is the depth-sorted splat list the forward pass composited
    (Splat objects); gradients accumulate into `splat_grads`, an
    (n_splats, 13) array in the kernel column layout. The forward step count
    is replayed and must match the tape, otherwise the tape does not belong
    to this forward configuration.
    """
    from .compositor import DEFAULT_T_MIN

    splats = list(splats)
    n = len(splats)
    mat = np.empty((n, 14))
    for i, s in enumerate(splats):
        conic = np.asarray(s.conic, dtype=np.float64)
        mat[i] = [s.center[0], s.center[1], conic[0, 0], conic[0, 1], conic[1, 1],
                  s.depth, s.color[0], s.color[1], s.color[2], s.opacity,
                  s.alpha, s.beta, s.gamma, np.inf]
    rows = np.arange(n, dtype=np.int64)
    K = tape.K
    pre = np.empty((max(K, 1), 6))
    rec_pos = np.empty(max(K, 1), dtype=np.int64)
    tail_pos = np.empty(max(n, 1), dtype=np.int64)
    tail_val = np.empty((max(n, 1), 3))
    t_min = DEFAULT_T_MIN if T_min is None else T_min
    dl = np.asarray(dL_dcolor, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    tile_grads = np.zeros((n, _kernels.NGRAD))
    px, py = float(tape.pixel[0]), float(tape.pixel[1])
    # replay count check against the tape before accumulating anything
    cr, cg, cb, T, dp, nrec, ntail = _replay_counts(
        px, py, rows, mat, K, t_min, competition, False)
    if nrec != len(tape.records) or ntail != tape.vanilla_tail:
        raise ContractViolationError(
            f"tape/forward mismatch: tape has {len(tape.records)}+{tape.vanilla_tail} "
            f"records, replay produced {nrec}+{ntail}")
    _kernels._pixel_backward(px, py, rows, mat, K, t_min, competition, False,
                             detach_moving_averages, dl[0], dl[1], dl[2],
                             bg[0], bg[1], bg[2], pre, rec_pos, tail_pos,
                             tail_val, tile_grads)
    splat_grads[...] += tile_grads
    return splat_grads


def _replay_counts(px, py, rows, mat, K, t_min, competition, cutoff):
    return _kernels._pixel_forward(px, py, rows, mat, K, t_min, competition,
                                   cutoff, 0.0, 0.0, 0.0)
