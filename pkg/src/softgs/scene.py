"""Learnable Gaussian cloud, parameter activations, and the pinhole camera.

The cloud is stored struct-of-arrays (float64) so projection and optimization
can run vectorized; `Gaussian` / `ActivatedGaussian` are the per-element record
views used for construction and inspection.

Raw parameters and their activations:

* opacity   = sigmoid(raw_opacity)            in (0, 1)
* color     = sigmoid(color)                  per channel, in (0, 1)
* alpha     = clip(exp(raw_alpha), 0.25, 8)   boundary sharpness of one splat
* beta      = clip(exp(raw_beta), 0, 64)      strength of softmax competition
* gamma     = exp(raw_gamma)                  depth-decay rate of competition
* scale     = exp(log_scale)                  per-axis std-dev, world units

alpha/beta/gamma initial values and activation shapes are implementation
choices (exp keeps positivity; the clamps keep kernels non-degenerate); they
are not forced by the compositing math.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ALPHA_MIN = 0.25
ALPHA_MAX = 8.0
BETA_MAX = 64.0

# gamma ~ 10 / scene extent makes the competition decay length about a tenth
# of the scene; synthetic scenes here have extent ~1.
DEFAULT_RAW_GAMMA = float(np.log(10.0))
DEFAULT_RAW_BETA = 0.0  # beta = 1, mild competition


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def activate_alpha(raw):
    return np.clip(np.exp(raw), ALPHA_MIN, ALPHA_MAX)


def activate_alpha_grad(raw):
    e = np.exp(raw)
    return np.where((e > ALPHA_MIN) & (e < ALPHA_MAX), e, 0.0)


def activate_beta(raw):
    return np.clip(np.exp(raw), 0.0, BETA_MAX)


def activate_beta_grad(raw):
    e = np.exp(raw)
    return np.where(e < BETA_MAX, e, 0.0)


def activate_gamma(raw):
    return np.exp(raw)


def activate_gamma_grad(raw):
    return np.exp(raw)


def quat_to_rotmat(q):
    """Rotation matrices from (possibly unnormalized) quaternions (..., 4), order (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Gaussian:
    """One learnable Gaussian in raw (pre-activation) form."""

    mean: np.ndarray           # (3,) world units
    log_scale: np.ndarray      # (3,) log std-dev per local axis
    rotation: np.ndarray       # (4,) quaternion (w, x, y, z), normalized on use
    raw_opacity: float
    color: np.ndarray          # (3,) pre-sigmoid RGB
    raw_alpha: float = 0.0
    raw_beta: float = DEFAULT_RAW_BETA
    raw_gamma: float = DEFAULT_RAW_GAMMA
    gid: int = -1              # stable identity across densify/prune


@dataclass
class ActivatedGaussian:
    """Working-form view of one Gaussian: activations applied, covariance built."""

    mean: np.ndarray
    covariance: np.ndarray     # (3, 3) symmetric positive definite
    opacity: float
    color: np.ndarray          # (3,) in (0, 1)
    alpha: float
    beta: float
    gamma: float
    gid: int = -1


def activate(g: Gaussian) -> ActivatedGaussian:
    """Pure raw -> working-form map; rejects non-finite parameters."""
    fields = np.concatenate([
        np.asarray(g.mean, dtype=np.float64).ravel(),
        np.asarray(g.log_scale, dtype=np.float64).ravel(),
        np.asarray(g.rotation, dtype=np.float64).ravel(),
        [float(g.raw_opacity)],
        np.asarray(g.color, dtype=np.float64).ravel(),
        [float(g.raw_alpha), float(g.raw_beta), float(g.raw_gamma)],
    ])
    if not np.all(np.isfinite(fields)):
        raise ValueError(f"non-finite parameter in Gaussian id={g.gid}")
    R = quat_to_rotmat(np.asarray(g.rotation, dtype=np.float64))
    S = np.diag(np.exp(2.0 * np.asarray(g.log_scale, dtype=np.float64)))
    cov = R @ S @ R.T
    return ActivatedGaussian(
        mean=np.array(g.mean, dtype=np.float64),
        covariance=cov,
        opacity=float(sigmoid(g.raw_opacity)),
        color=sigmoid(np.asarray(g.color, dtype=np.float64)),
        alpha=float(activate_alpha(g.raw_alpha)),
        beta=float(activate_beta(g.raw_beta)),
        gamma=float(activate_gamma(g.raw_gamma)),
        gid=g.gid,
    )


@dataclass
class ActivatedArrays:
    """Vectorized activation of a whole cloud (inputs to projection)."""

    means: np.ndarray        # (N, 3)
    covariances: np.ndarray  # (N, 3, 3)
    opacities: np.ndarray    # (N,)
    colors: np.ndarray       # (N, 3)
    alphas: np.ndarray       # (N,)
    betas: np.ndarray        # (N,)
    gammas: np.ndarray       # (N,)
    ids: np.ndarray          # (N,) int64
    rotmats: np.ndarray      # (N, 3, 3) cached for the projection backward
    quats_normed: np.ndarray  # (N, 4)


class GaussianCloud:
    """Ordered collection of Gaussians with stable integer identities.

    Immutable during a render; densify/prune replace the arrays between
    optimizer steps, preserving the ids of surviving Gaussians.
    """

    FIELD_NAMES = ("means", "log_scales", "rotations", "raw_opacities",
                   "colors", "raw_alphas", "raw_betas", "raw_gammas")

    def __init__(self, means, log_scales, rotations, raw_opacities, colors,
                 raw_alphas, raw_betas, raw_gammas, ids=None, metadata=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.raw_opacities = np.asarray(raw_opacities, dtype=np.float64).ravel()
        self.colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        self.raw_alphas = np.asarray(raw_alphas, dtype=np.float64).ravel()
        self.raw_betas = np.asarray(raw_betas, dtype=np.float64).ravel()
        self.raw_gammas = np.asarray(raw_gammas, dtype=np.float64).ravel()
        n = len(self)
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64).ravel()
        self._next_id = int(self.ids.max()) + 1 if n else 0
        self.metadata = dict(metadata or {})
        shapes = [self.means.shape, self.log_scales.shape, self.rotations.shape,
                  self.colors.shape]
        if (self.means.shape != (n, 3) or self.log_scales.shape != (n, 3)
                or self.rotations.shape != (n, 4) or self.colors.shape != (n, 3)
                or self.ids.shape != (n,)):
            raise ValueError(f"inconsistent cloud array shapes: {shapes}")

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(), log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            raw_opacity=float(self.raw_opacities[i]), color=self.colors[i].copy(),
            raw_alpha=float(self.raw_alphas[i]), raw_beta=float(self.raw_betas[i]),
            raw_gamma=float(self.raw_gammas[i]), gid=int(self.ids[i]),
        )

    @classmethod
    def from_gaussians(cls, gaussians, metadata=None) -> "GaussianCloud":
        ids = [g.gid for g in gaussians]
        if any(i < 0 for i in ids):
            ids = list(range(len(gaussians)))
        return cls(
            means=[g.mean for g in gaussians],
            log_scales=[g.log_scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            raw_opacities=[g.raw_opacity for g in gaussians],
            colors=[g.color for g in gaussians],
            raw_alphas=[g.raw_alpha for g in gaussians],
            raw_betas=[g.raw_beta for g in gaussians],
            raw_gammas=[g.raw_gamma for g in gaussians],
            ids=ids, metadata=metadata,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.raw_opacities.copy(), self.colors.copy(), self.raw_alphas.copy(),
            self.raw_betas.copy(), self.raw_gammas.copy(), self.ids.copy(),
            dict(self.metadata),
        )

    def allocate_ids(self, count: int) -> np.ndarray:
        new = np.arange(self._next_id, self._next_id + count, dtype=np.int64)
        self._next_id += count
        return new

    def activated(self) -> ActivatedArrays:
        if not np.all(np.isfinite(self.means)) or not np.all(np.isfinite(self.log_scales)) \
                or not np.all(np.isfinite(self.rotations)):
            bad = ~(np.all(np.isfinite(self.means), axis=1)
                    & np.all(np.isfinite(self.log_scales), axis=1)
                    & np.all(np.isfinite(self.rotations), axis=1))
            raise ValueError(f"non-finite parameters for Gaussian ids {self.ids[bad].tolist()}")
        R = quat_to_rotmat(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)  # (N, 3) variances along local axes
        cov = np.einsum("nij,nj,nkj->nik", R, s2, R)
        qn = self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return ActivatedArrays(
            means=self.means.copy(), covariances=cov,
            opacities=sigmoid(self.raw_opacities), colors=sigmoid(self.colors),
            alphas=activate_alpha(self.raw_alphas), betas=activate_beta(self.raw_betas),
            gammas=activate_gamma(self.raw_gammas), ids=self.ids.copy(),
            rotmats=R, quats_normed=qn,
        )


@dataclass
class Camera:
    """Pinhole camera; +x right, +y down, +z forward in camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world-to-camera rotation
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) \
                or not np.isclose(np.linalg.det(self.R), 1.0, atol=1e-9):
            raise ValueError("world_to_camera rotation is not a proper rigid rotation")

    def world_to_camera(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.R.T + self.t

    def rotated_y(self, angle_rad: float) -> "Camera":
        """Camera rotated in place about its own y (vertical) axis."""
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        Ry = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        return replace(self, R=Ry @ self.R, t=Ry @ self.t)

    @classmethod
    def facing_z(cls, resolution: int = 256, world_halfwidth: float = 0.3,
                 depth: float = 1.0) -> "Camera":
        """Camera at the origin looking along +z, framing the given half-width at `depth`."""
        f = resolution * depth / (2.0 * world_halfwidth)
        return cls(fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
                   width=resolution, height=resolution)


def initialize_synthetic(metadata=None) -> GaussianCloud:
    """Four black Gaussians of identical shape, slightly apart, at depth 1.

    Means sit in a 2x2 arrangement at (+-0.15, +-0.15, 1.0) with per-axis
    std-dev 0.1, large enough to overlap near the image center.
    """
    offsets = np.array([[-0.15, -0.15], [0.15, -0.15], [-0.15, 0.15], [0.15, 0.15]])
    means = np.column_stack([offsets, np.ones(4)])
    log_scales = np.full((4, 3), np.log(0.1))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (4, 1))
    raw_opacities = np.zeros(4)  # opacity 0.5
    colors = np.full((4, 3), logit(0.01))  # near-black under the sigmoid activation
    raw_alphas = np.zeros(4)     # alpha = 1, plain Gaussian kernel
    raw_betas = np.full(4, DEFAULT_RAW_BETA)
    raw_gammas = np.full(4, DEFAULT_RAW_GAMMA)
    meta = {"initializer": "synthetic-2x2", "count": 4}
    meta.update(metadata or {})
    return GaussianCloud(means, log_scales, rotations, raw_opacities, colors,
                         raw_alphas, raw_betas, raw_gammas, metadata=meta)
