"""Full-image forward rendering: cull, depth-sort, tile-bin, composite.

Splats are sorted once per view by depth (ties broken by Gaussian id) and
binned into 16x16 pixel tiles by their cull discs. A pixel considers exactly
the splats whose disc contains it, in global depth order, so a tiled render
and a brute-force per-pixel render agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .compositor import DEFAULT_K, DEFAULT_T_MIN, PixelTape, RayState, StepRecord
from .projection import SplatBatch, project_batch, sort_by_depth
from .scene import Camera, GaussianCloud

DEFAULT_TILE = 16


@dataclass
class RenderOptions:
    K_limit: int = DEFAULT_K
    T_min: float = DEFAULT_T_MIN
    tile_size: int = DEFAULT_TILE
    background: tuple = (0.0, 0.0, 0.0)
    competition: bool = True       # False gives the plain product rule
    cutoff: bool = True            # evaluate splats only inside their cull disc
    with_tapes: bool = False       # materialize per-pixel tapes (test scale only)
    detach_moving_averages: bool = False  # ablation: cut gradients through d/p averages


@dataclass
class FrameGeometry:
    """Projection, ordering and binning state shared by forward and backward."""

    batch: SplatBatch
    order: np.ndarray          # batch row -> compositing position permutation
    splat_mat: np.ndarray      # (M, 14) kernel matrix in compositing order
    bin_offsets: np.ndarray
    bin_rows: np.ndarray
    camera: Camera
    options: RenderOptions


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3) in [0, 1] for in-range inputs
    depth: np.ndarray          # (H, W) absorbance-weighted expected depth
    transmittance: np.ndarray  # (H, W) in (0, 1]
    frame: FrameGeometry
    record_counts: np.ndarray  # (H, W) composited records per pixel (<= K)
    tail_counts: np.ndarray    # (H, W) plain-rule splats past the tape
    tape_pre: Optional[np.ndarray] = None    # (H*W, K, 6) pre-step states
    tape_rows: Optional[np.ndarray] = None   # (H*W, K) global splat rows
    tape_tail_rows: Optional[np.ndarray] = None

    def pixel_tape(self, y: int, x: int) -> PixelTape:
        """Reconstruct a PixelTape record list for one pixel (tapes mode only)."""
        if self.tape_pre is None:
            raise ValueError("render was not run with with_tapes=True")
        opts = self.frame.options
        pix = y * self.color.shape[1] + x
        n = int(self.record_counts[y, x])
        tape = PixelTape(pixel=np.array([x + 0.5, y + 0.5]), K=opts.K_limit)
        for k in range(n):
            pre = self.tape_pre[pix, k]
            state = RayState(T_past=pre[0], c_past=pre[1:4].copy(),
                             d_past=pre[4], p_past=pre[5])
            tape.records.append(StepRecord(
                source_row=int(self.tape_rows[pix, k]), p_cur=np.nan, a_raw=np.nan,
                branch=bool(pre[0] < 1.0 and opts.competition), w_cur=np.nan,
                a_hat_past=np.nan, a_hat_cur=np.nan, a_tilde_past=np.nan,
                a_tilde_cur=np.nan, s=np.nan, a_bar_past=np.nan, a_bar_cur=np.nan,
                m=np.nan, a_fin=np.nan, T_orig=np.nan, state_before=state))
        nt = int(self.tail_counts[y, x])
        tape.tail_rows = [int(r) for r in self.tape_tail_rows[pix, :nt]]
        return tape


def splat_matrix(batch: SplatBatch, order: np.ndarray) -> np.ndarray:
    """Marshal a splat batch into the (M, 14) kernel layout, compositing order."""
    m = np.empty((len(batch), 14))
    m[:, 0:2] = batch.centers[order]
    m[:, 2:5] = batch.conics[order]
    m[:, 5] = batch.depths[order]
    m[:, 6:9] = batch.colors[order]
    m[:, 9] = batch.opacities[order]
    m[:, 10] = batch.alphas[order]
    m[:, 11] = batch.betas[order]
    m[:, 12] = batch.gammas[order]
    m[:, 13] = batch.radii[order]
    return m


def bin_tiles(centers, radii, width, height, tile_size=DEFAULT_TILE):
    """CSR bins of splat rows per tile; rows keep their input (depth) order."""
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    return _kernels.bin_splats(centers, radii, height, width, tile_size)


def build_frame(cloud: GaussianCloud, camera: Camera,
                options: RenderOptions) -> FrameGeometry:
    act = cloud.activated()
    batch = project_batch(act, camera)
    order = sort_by_depth(batch)
    mat = splat_matrix(batch, order)
    if options.cutoff:
        radii = mat[:, 13]
    else:
        # every splat is a candidate everywhere: one disc covering the image
        radii = np.full(len(batch), np.hypot(camera.width, camera.height) + 1.0)
        mat = mat.copy()
        mat[:, 13] = radii
    offsets, rows = bin_tiles(mat[:, 0:2], radii, camera.width, camera.height,
                              options.tile_size)
    return FrameGeometry(batch=batch, order=order, splat_mat=mat,
                         bin_offsets=offsets, bin_rows=rows, camera=camera,
                         options=options)


def render(cloud: GaussianCloud, camera: Camera,
           options: Optional[RenderOptions] = None) -> RenderOutput:
    """Deterministic forward render of a cloud through one camera."""
    options = options or RenderOptions()
    frame = build_frame(cloud, camera, options)
    H, W = camera.height, camera.width
    out_color = np.empty((H, W, 3))
    out_depth = np.empty((H, W))
    out_T = np.empty((H, W))
    out_nrec = np.empty((H, W), dtype=np.int32)
    out_ntail = np.empty((H, W), dtype=np.int32)
    bg = np.asarray(options.background, dtype=np.float64)
    _kernels.render_tiles(frame.splat_mat, frame.bin_offsets, frame.bin_rows,
                          H, W, options.tile_size, options.K_limit,
                          options.T_min, options.competition, options.cutoff,
                          bg, out_color, out_depth, out_T, out_nrec, out_ntail)
    output = RenderOutput(color=out_color, depth=out_depth, transmittance=out_T,
                          frame=frame, record_counts=out_nrec, tail_counts=out_ntail)
    if options.with_tapes:
        npx = H * W
        K = options.K_limit
        max_tail = max(int(out_ntail.max()), 1)
        tape_pre = np.zeros((npx, K, 6))
        tape_rows = np.full((npx, K), -1, dtype=np.int64)
        tape_count = np.zeros(npx, dtype=np.int64)
        tail_count = np.zeros(npx, dtype=np.int64)
        tail_rows = np.full((npx, max_tail), -1, dtype=np.int64)
        _kernels.render_tapes(frame.splat_mat, frame.bin_offsets, frame.bin_rows,
                              H, W, options.tile_size, K, options.T_min,
                              options.competition, options.cutoff,
                              tape_pre, tape_rows, tape_count, tail_count, tail_rows)
        output.tape_pre = tape_pre
        output.tape_rows = tape_rows
        output.tape_tail_rows = tail_rows
    return output


def candidate_rows(frame: FrameGeometry, y: int, x: int) -> np.ndarray:
    """Compositing-order splat rows whose cull disc contains pixel (y, x)."""
    tile = frame.options.tile_size
    ntx = (frame.camera.width + tile - 1) // tile
    ti = (y // tile) * ntx + (x // tile)
    rows = frame.bin_rows[frame.bin_offsets[ti]:frame.bin_offsets[ti + 1]]
    px, py = x + 0.5, y + 0.5
    d2 = (frame.splat_mat[rows, 0] - px) ** 2 + (frame.splat_mat[rows, 1] - py) ** 2
    if frame.options.cutoff:
        return rows[d2 <= frame.splat_mat[rows, 13] ** 2]
    return rows
