"""EWA projection of activated 3D Gaussians onto per-view 2D splats.

Each splat carries its pixel-space center, conic (inverse 2D covariance),
camera depth, a cull radius derived from the generalized-exponential kernel,
and the per-Gaussian compositing parameters. The 2D covariance is the
standard affine approximation J W Sigma W^T J^T, dilated by 0.3 px^2 on the
diagonal so sub-pixel splats stay visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import ActivatedArrays, ActivatedGaussian, Camera

NEAR_PLANE = 0.01
DILATION = 0.3
MIN_ABSORBANCE = 1.0 / 255.0
MAX_CONDITION = 1e12

CULL_BEHIND = 1
CULL_OFFSCREEN = 2
CULL_DEGENERATE = 3
_CULL_REASONS = {CULL_BEHIND: "behind", CULL_OFFSCREEN: "offscreen",
                 CULL_DEGENERATE: "degenerate"}


@dataclass
class Culled:
    """Marker for a Gaussian rejected during projection."""

    gid: int
    reason: str


@dataclass
class Splat:
    """2D footprint of one Gaussian in one view."""

    center: np.ndarray   # (2,) pixels
    conic: np.ndarray    # (2, 2) symmetric inverse covariance, px^-2
    depth: float         # camera-space z, world units
    radius: float        # cull radius, pixels
    color: np.ndarray    # (3,)
    opacity: float
    alpha: float
    beta: float
    gamma: float
    source_id: int = -1


@dataclass
class SplatBatch:
    """Struct-of-arrays splats for one view, plus cached projection state.

    Rows correspond to non-culled Gaussians; `source_index` maps each row
    back into the cloud arrays and `status` records per-input cull codes
    (0 = kept).
    """

    centers: np.ndarray        # (M, 2)
    conics: np.ndarray         # (M, 3) packed (xx, xy, yy)
    depths: np.ndarray         # (M,)
    radii: np.ndarray          # (M,)
    colors: np.ndarray         # (M, 3)
    opacities: np.ndarray      # (M,)
    alphas: np.ndarray         # (M,)
    betas: np.ndarray          # (M,)
    gammas: np.ndarray         # (M,)
    source_index: np.ndarray   # (M,) row into the input arrays
    ids: np.ndarray            # (M,) stable Gaussian ids
    status: np.ndarray         # (N,) cull code per input row
    # cached intermediates for the backward pass
    t_cam: np.ndarray          # (M, 3) camera-space means
    cov2d: np.ndarray          # (M, 3) packed dilated 2D covariance
    JW: np.ndarray             # (M, 2, 3)
    jac_gate: np.ndarray       # (M, 2) 1 where the EWA frustum clamp is inactive
    camera: Camera = None

    def __len__(self):
        return self.centers.shape[0]

    def splat(self, row: int) -> Splat:
        c = self.conics[row]
        return Splat(center=self.centers[row].copy(),
                     conic=np.array([[c[0], c[1]], [c[1], c[2]]]),
                     depth=float(self.depths[row]), radius=float(self.radii[row]),
                     color=self.colors[row].copy(), opacity=float(self.opacities[row]),
                     alpha=float(self.alphas[row]), beta=float(self.betas[row]),
                     gamma=float(self.gammas[row]), source_id=int(self.ids[row]))


def gef_cull_radius(conic, opacity, alpha):
    """Pixel radius where the GEF absorbance falls to 1/255.

    Solving opacity * exp(-(q/2)^alpha) = 1/255 for the Mahalanobis-squared
    level q gives q = 2 * ln(255 * opacity)^(1/alpha); the pixel radius maps
    q through the conic's smallest eigenvalue (the footprint's long axis).
    Opacity at or below 1/255 yields radius 0.
    """
    conic = np.asarray(conic, dtype=np.float64)
    if conic.shape == (2, 2):
        a, b, c = conic[0, 0], conic[0, 1], conic[1, 1]
    else:
        a, b, c = conic[..., 0], conic[..., 1], conic[..., 2]
    opacity = np.asarray(opacity, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    level = np.log(np.maximum(opacity, 1e-300) * 255.0)
    lam_min = 0.5 * ((a + c) - np.sqrt((a - c) ** 2 + 4.0 * b ** 2))
    q = 2.0 * np.power(np.maximum(level, 0.0), 1.0 / alpha)
    r = np.sqrt(q / np.maximum(lam_min, 1e-300))
    out = np.where(level > 0.0, r, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def project_batch(act: ActivatedArrays, camera: Camera, *, near: float = NEAR_PLANE,
                  dilation: float = DILATION) -> SplatBatch:
    """Project all activated Gaussians; culled rows are dropped and coded in `status`."""
    n = act.means.shape[0]
    status = np.zeros(n, dtype=np.int8)
    t = camera.world_to_camera(act.means)  # (N, 3)
    tz = t[:, 2]
    behind = tz <= near
    status[behind] = CULL_BEHIND

    tz_safe = np.where(behind, 1.0, tz)
    # frustum clamp on the Jacobian input (keeps far-off-axis conics finite)
    limx = 1.3 * (0.5 * camera.width / camera.fx)
    limy = 1.3 * (0.5 * camera.height / camera.fy)
    txz = t[:, 0] / tz_safe
    tyz = t[:, 1] / tz_safe
    txz_c = np.clip(txz, -limx, limx)
    tyz_c = np.clip(tyz, -limy, limy)
    jac_gate = np.stack([(np.abs(txz) < limx).astype(np.float64),
                         (np.abs(tyz) < limy).astype(np.float64)], axis=1)

    cx_px = camera.fx * txz + camera.cx
    cy_px = camera.fy * tyz + camera.cy
    centers = np.stack([cx_px, cy_px], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / tz_safe
    J[:, 0, 2] = -camera.fx * txz_c / tz_safe
    J[:, 1, 1] = camera.fy / tz_safe
    J[:, 1, 2] = -camera.fy * tyz_c / tz_safe
    JW = J @ camera.R  # (N, 2, 3)

    cov2 = np.einsum("nij,njk,nlk->nil", JW, act.covariances, JW)
    vxx = cov2[:, 0, 0] + dilation
    vxy = cov2[:, 0, 1]
    vyy = cov2[:, 1, 1] + dilation

    det = vxx * vyy - vxy * vxy
    tr = vxx + vyy
    disc = np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    lam_max = 0.5 * tr + disc
    lam_min = 0.5 * tr - disc
    degenerate = (det <= 0) | (lam_min <= 0) | (lam_max > MAX_CONDITION * np.maximum(lam_min, 1e-300))
    status[degenerate & ~behind] = CULL_DEGENERATE

    det_safe = np.where(det > 0, det, 1.0)
    conics = np.stack([vyy / det_safe, -vxy / det_safe, vxx / det_safe], axis=1)
    radii = gef_cull_radius(conics, act.opacities, act.alphas)

    offscreen = ((centers[:, 0] + radii < 0.0) | (centers[:, 0] - radii > camera.width)
                 | (centers[:, 1] + radii < 0.0) | (centers[:, 1] - radii > camera.height))
    status[offscreen & (status == 0)] = CULL_OFFSCREEN

    keep = status == 0
    idx = np.nonzero(keep)[0]
    return SplatBatch(
        centers=centers[idx], conics=conics[idx], depths=tz[idx], radii=radii[idx],
        colors=act.colors[idx], opacities=act.opacities[idx], alphas=act.alphas[idx],
        betas=act.betas[idx], gammas=act.gammas[idx],
        source_index=idx.astype(np.int64), ids=act.ids[idx], status=status,
        t_cam=t[idx], cov2d=np.stack([vxx, vxy, vyy], axis=1)[idx], JW=JW[idx],
        jac_gate=jac_gate[idx], camera=camera,
    )


def project(gaussian: ActivatedGaussian, camera: Camera, *, near: float = NEAR_PLANE,
            dilation: float = DILATION):
    """Single-Gaussian projection; returns a Splat or a Culled marker."""
    act = ActivatedArrays(
        means=gaussian.mean[None, :], covariances=gaussian.covariance[None, :, :],
        opacities=np.array([gaussian.opacity]), colors=gaussian.color[None, :],
        alphas=np.array([gaussian.alpha]), betas=np.array([gaussian.beta]),
        gammas=np.array([gaussian.gamma]), ids=np.array([gaussian.gid], dtype=np.int64),
        rotmats=np.eye(3)[None], quats_normed=np.array([[1.0, 0, 0, 0]]),
    )
    batch = project_batch(act, camera, near=near, dilation=dilation)
    if len(batch) == 0:
        return Culled(gid=gaussian.gid, reason=_CULL_REASONS[int(batch.status[0])])
    return batch.splat(0)


def sort_by_depth(batch: SplatBatch) -> np.ndarray:
    """Row order for compositing: ascending depth, ties broken by Gaussian id."""
    return np.lexsort((batch.ids, batch.depths))


def project_backward(batch: SplatBatch, act: ActivatedArrays, g_center, g_conic,
                     g_depth, g_color, g_opacity, g_alpha, g_beta, g_gamma, cloud):
    """Chain per-splat 2D gradients back to raw cloud parameters.

    Inputs are (M, ...) arrays aligned with the batch rows; g_conic is packed
    (xx, xy, yy) matching how the conic enters the pixel quadratic form.
    Returns a dict of (N, ...) arrays over the full cloud (zeros for culled
    rows). The cull radius is a rasterization bound and carries no gradient.
    """
    from .scene import (activate_alpha_grad, activate_beta_grad,
                        activate_gamma_grad, sigmoid_grad)

    m = len(batch)
    cam = batch.camera
    src = batch.source_index

    # conic = inv(cov2d): dL/dcov = -conic^T G conic with G the symmetric
    # adjoint matrix of the packed conic gradient (off-diagonal split in half).
    A, B, C = batch.conics[:, 0], batch.conics[:, 1], batch.conics[:, 2]
    Gxx, Gxy, Gyy = g_conic[:, 0], 0.5 * g_conic[:, 1], g_conic[:, 2]
    # rows of conic matrix: [[A, B], [B, C]]
    # P = conic @ G @ conic (all symmetric 2x2), then g_cov = -P
    PG00 = A * Gxx + B * Gxy
    PG01 = A * Gxy + B * Gyy
    PG10 = B * Gxx + C * Gxy
    PG11 = B * Gxy + C * Gyy
    P00 = PG00 * A + PG01 * B
    P01 = PG00 * B + PG01 * C
    P11 = PG10 * B + PG11 * C
    g_cov = np.empty((m, 2, 2))
    g_cov[:, 0, 0] = -P00
    g_cov[:, 0, 1] = -P01
    g_cov[:, 1, 0] = -P01
    g_cov[:, 1, 1] = -P11

    JW = batch.JW
    Sig3 = act.covariances[src]
    # cov2d = JW Sig3 JW^T (dilation is additive, gradient passes through)
    g_JW = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov, JW, Sig3)
    g_Sig3 = np.einsum("nji,njk,nkl->nil", JW, g_cov, JW)

    # JW = J @ R_cam, J a function of the camera-space mean t
    g_J = np.einsum("nij,kj->nik", g_JW, cam.R)
    t = batch.t_cam
    tz = t[:, 2]
    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    gate_x, gate_y = batch.jac_gate[:, 0], batch.jac_gate[:, 1]
    limx = 1.3 * (0.5 * cam.width / fx)
    limy = 1.3 * (0.5 * cam.height / fy)
    u = np.clip(t[:, 0] * inv_z, -limx, limx)  # clamped tx/tz feeding J
    v = np.clip(t[:, 1] * inv_z, -limy, limy)
    # J = [[fx/tz, 0, -fx*u/tz], [0, fy/tz, -fy*v/tz]], gates kill the clamp plateau
    g_tx = g_J[:, 0, 2] * (-fx * inv_z2) * gate_x
    g_ty = g_J[:, 1, 2] * (-fy * inv_z2) * gate_y
    g_tz = (g_J[:, 0, 0] * (-fx * inv_z2) + g_J[:, 1, 1] * (-fy * inv_z2)
            + g_J[:, 0, 2] * fx * inv_z2 * (u + gate_x * t[:, 0] * inv_z)
            + g_J[:, 1, 2] * fy * inv_z2 * (v + gate_y * t[:, 1] * inv_z))

    # pixel center: (fx*tx/tz + cx, fy*ty/tz + cy); unclamped ratio here
    g_tx = g_tx + g_center[:, 0] * fx * inv_z
    g_ty = g_ty + g_center[:, 1] * fy * inv_z
    g_tz = g_tz - g_center[:, 0] * fx * t[:, 0] * inv_z2 - g_center[:, 1] * fy * t[:, 1] * inv_z2
    g_tz = g_tz + g_depth

    g_t = np.stack([g_tx, g_ty, g_tz], axis=1)
    g_mean_rows = g_t @ cam.R  # t = R mu + tcam

    # Sig3 = R S^2 R^T with S^2 = diag(exp(2*log_scale))
    Rm = act.rotmats[src]
    s2 = np.exp(2.0 * cloud.log_scales[src])
    g_R = 2.0 * np.einsum("nij,njk,nk->nik", g_Sig3, Rm, s2)
    RtGR = np.einsum("nji,njk,nkl->nil", Rm, g_Sig3, Rm)
    g_log_scale_rows = np.einsum("nii->ni", RtGR) * 2.0 * s2

    g_quat_rows = _rotation_backward(g_R, act.quats_normed[src], cloud.rotations[src])

    n = len(cloud)
    grads = {
        "means": np.zeros((n, 3)), "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)), "raw_opacities": np.zeros(n),
        "colors": np.zeros((n, 3)), "raw_alphas": np.zeros(n),
        "raw_betas": np.zeros(n), "raw_gammas": np.zeros(n),
    }
    grads["means"][src] = g_mean_rows
    grads["log_scales"][src] = g_log_scale_rows
    grads["rotations"][src] = g_quat_rows
    grads["raw_opacities"][src] = g_opacity * sigmoid_grad(cloud.raw_opacities[src])
    grads["colors"][src] = g_color * sigmoid_grad(cloud.colors[src])
    grads["raw_alphas"][src] = g_alpha * activate_alpha_grad(cloud.raw_alphas[src])
    grads["raw_betas"][src] = g_beta * activate_beta_grad(cloud.raw_betas[src])
    grads["raw_gammas"][src] = g_gamma * activate_gamma_grad(cloud.raw_gammas[src])
    return grads


def _rotation_backward(g_R, q_normed, q_raw):
    """Gradient of the quaternion->rotation map, through the normalization."""
    w, x, y, z = q_normed[:, 0], q_normed[:, 1], q_normed[:, 2], q_normed[:, 3]
    zero = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz for the normalized quaternion
    dRw = _stack33(zero, -2 * z, 2 * y,
                   2 * z, zero, -2 * x,
                   -2 * y, 2 * x, zero)
    dRx = _stack33(zero, 2 * y, 2 * z,
                   2 * y, -4 * x, -2 * w,
                   2 * z, 2 * w, -4 * x)
    dRy = _stack33(-4 * y, 2 * x, 2 * w,
                   2 * x, zero, 2 * z,
                   -2 * w, 2 * z, -4 * y)
    dRz = _stack33(-4 * z, -2 * w, 2 * x,
                   2 * w, -4 * z, 2 * y,
                   2 * x, 2 * y, zero)
    g_qn = np.stack([np.einsum("nij,nij->n", g_R, d) for d in (dRw, dRx, dRy, dRz)], axis=1)
    # through normalization: q_n = q / |q|
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    dot = np.sum(g_qn * q_normed, axis=1, keepdims=True)
    return (g_qn - dot * q_normed) / norm


def _stack33(a00, a01, a02, a10, a11, a12, a20, a21, a22):
    n = a00.shape[0]
    out = np.empty((n, 3, 3))
    out[:, 0, 0], out[:, 0, 1], out[:, 0, 2] = a00, a01, a02
    out[:, 1, 0], out[:, 1, 1], out[:, 1, 2] = a10, a11, a12
    out[:, 2, 0], out[:, 2, 1], out[:, 2, 2] = a20, a21, a22
    return out
