"""Synthetic color-pattern targets and image quality metrics.

Patterns are four solid shapes in a 2x2 layout on a white canvas, rasterized
at 4x supersampling with a box filter. The exact geometry below is canonical
for this package (sizes/colors are fixed so results stay comparable across
runs); shapes never touch each other or the border.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PATTERN_NAMES = ("circle4", "rect4", "oval4")
SUPERSAMPLE = 4

_CENTERS = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
_COLORS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
_CIRCLE_RADIUS = 0.16
_RECT_HALF = (0.16, 0.11)
_OVAL_AXES = (0.18, 0.10)
_OVAL_ANGLES_DEG = (30.0, -30.0, -30.0, 30.0)


def make_pattern(name: str, resolution: int) -> np.ndarray:
    """Rasterize a named pattern to (resolution, resolution, 3) float64 in [0, 1]."""
    if name not in PATTERN_NAMES:
        raise ValueError(f"unknown pattern {name!r}; choose from {PATTERN_NAMES}")
    if resolution < 64:
        raise ValueError("resolution must be >= 64")
    n = resolution * SUPERSAMPLE
    # sample positions at subpixel centers, x right / y down in unit coords
    u = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(u, u)
    img = np.ones((n, n, 3))
    for k in range(4):
        cx, cy = _CENTERS[k]
        if name == "circle4":
            mask = (X - cx) ** 2 + (Y - cy) ** 2 <= _CIRCLE_RADIUS ** 2
        elif name == "rect4":
            mask = (np.abs(X - cx) <= _RECT_HALF[0]) & (np.abs(Y - cy) <= _RECT_HALF[1])
        else:
            t = np.deg2rad(_OVAL_ANGLES_DEG[k])
            xr = (X - cx) * np.cos(t) + (Y - cy) * np.sin(t)
            yr = -(X - cx) * np.sin(t) + (Y - cy) * np.cos(t)
            mask = (xr / _OVAL_AXES[0]) ** 2 + (yr / _OVAL_AXES[1]) ** 2 <= 1.0
        img[mask] = _COLORS[k]
    s = SUPERSAMPLE
    return img.reshape(resolution, s, resolution, s, 3).mean(axis=(1, 3))


def psnr(a, b) -> float:
    """-10 log10(MSE) on [0, 1] images; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window
_K1, _K2 = 0.01, 0.03
_C1, _C2 = (_K1 ** 2), (_K2 ** 2)  # dynamic range L = 1


def _window():
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    return w / w.sum()


_W1D = _window()


def _blur(img):
    # zero-padded separable filtering; the symmetric kernel makes the
    # operator self-adjoint, which the analytic SSIM gradient relies on
    out = correlate1d(img, _W1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _W1D, axis=1, mode="constant", cval=0.0)


def _ssim_maps(x, y):
    mx = _blur(x)
    my = _blur(y)
    x2 = _blur(x * x)
    y2 = _blur(y * y)
    xy = _blur(x * y)
    sx = x2 - mx * mx
    sy = y2 - my * my
    sxy = xy - mx * my
    a1 = 2.0 * mx * my + _C1
    a2 = 2.0 * sxy + _C2
    b1 = mx * mx + my * my + _C1
    b2 = sx + sy + _C2
    return mx, my, sx, sy, sxy, a1, a2, b1, b2, (a1 * a2) / (b1 * b2)


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window sigma=1.5, k1=0.01, k2=0.03."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    return float(np.mean(_ssim_maps(a, b)[-1]))


def ssim_with_grad(x, y):
    """(mean SSIM, d mean SSIM / dx) for x against a fixed reference y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my, sx, sy, sxy, a1, a2, b1, b2, S = _ssim_maps(x, y)
    npix = S.size
    gS = 1.0 / npix
    inv_bb = 1.0 / (b1 * b2)
    g_mx = gS * (2.0 * my * a2 * inv_bb - 2.0 * mx * S / b1)
    g_sx = gS * (-S / b2)
    g_sxy = gS * (2.0 * a1 * inv_bb)
    # through sigma definitions: sx = blur(x^2) - mx^2, sxy = blur(xy) - mx my
    g_mx = g_mx + g_sx * (-2.0 * mx) + g_sxy * (-my)
    g_x = _blur(g_mx) + 2.0 * x * _blur(g_sx) + y * _blur(g_sxy)
    return float(np.mean(S)), g_x
