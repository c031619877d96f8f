"""Brute-force numerical references used by tests and studies.

Everything here evaluates the underlying ray integrals directly (composite
trapezoid over a dense grid) with none of the sequential approximations the
renderer makes, so renderer outputs can be judged against ground truth:

* `integrate_ray_exact`      the full softmax-weighted volume rendering
                             integral for 1D extinction profiles along a ray
* `integrate_softmaxed_absorbance`   the weighted mass of one profile under
                             competition from another, driving the decay study
* `vanilla_splat_oracle`     an independent re-implementation of the plain
                             splatting sum (shares no code with `compositor`)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

DEFAULT_SAMPLES = 20000
SUPPORT_SIGMAS = 6.0


@dataclass
class RayProfile:
    """A 1D Gaussian extinction lobe along a camera ray.

    `total_mass` is the integral of the extinction (the splat absorbance the
    renderer would see); `splat_exponent` is the transverse log-density
    offset that enters the softmax (0 when the ray passes dead center).
    """

    center: float
    sigma: float = 1.0
    total_mass: float = 0.5
    splat_exponent: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    @property
    def amplitude(self) -> float:
        return self.total_mass / (self.sigma * np.sqrt(2.0 * np.pi))

    def extinction(self, l):
        z = (l - self.center) / self.sigma
        return self.amplitude * np.exp(-0.5 * z * z)

    def log_density(self, l):
        z = (l - self.center) / self.sigma
        return self.splat_exponent - 0.5 * z * z


def _grid(profiles: Sequence[RayProfile], samples: int):
    lo = min(p.center - SUPPORT_SIGMAS * p.sigma for p in profiles)
    hi = max(p.center + SUPPORT_SIGMAS * p.sigma for p in profiles)
    return np.linspace(max(lo, 0.0), hi, samples)


def _softmax_weights(profiles, l, beta):
    logits = np.stack([beta * p.log_density(l) for p in profiles])
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def _cumtrapz0(y, x):
    dx = np.diff(x)
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum(0.5 * (y[1:] + y[:-1]) * dx, out=out[1:])
    return out


def integrate_ray_exact(profiles: Sequence[RayProfile], beta: float,
                        samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Numerically evaluate the softmax-weighted volume rendering integral.

    I = integral of sum_k c_k w_k o_k T(l) dl with
    T(l) = exp(-integral_0^l sum_j w_j o_j), weights w from the softmax over
    the profiles' log densities with sharpness beta. beta = 0 blends all
    profiles equally.
    """
    if samples < 1e4:
        raise ValueError("use at least 1e4 samples for the exact integral")
    profiles = list(profiles)
    l = _grid(profiles, samples)
    o = np.stack([p.extinction(l) for p in profiles])
    w = _softmax_weights(profiles, l, beta)
    weighted = w * o
    T = np.exp(-_cumtrapz0(weighted.sum(axis=0), l))
    colors = np.stack([p.color for p in profiles])  # (K, 3)
    absorbed = np.trapezoid(weighted * T, l, axis=1)  # per-profile absorbed mass
    return absorbed @ colors


def integrate_softmaxed_absorbance(separation: float, beta: float, *,
                                   sigma: float = 1.0, total_mass: float = 0.5,
                                   samples: int = DEFAULT_SAMPLES) -> float:
    """Weighted mass of one of two identical profiles a distance apart.

    Returns the integral of w_k * o_k (no transmittance) for the nearer of
    two same-shape profiles; equals total_mass / 2 when coincident (beta > 0
    splits evenly by symmetry) and approaches total_mass as they separate.
    """
    base = 10.0 * sigma
    pk = RayProfile(center=base, sigma=sigma, total_mass=total_mass)
    pj = RayProfile(center=base + separation, sigma=sigma, total_mass=total_mass)
    l = _grid([pk, pj], samples)
    w = _softmax_weights([pk, pj], l, beta)
    return float(np.trapezoid(w[0] * pk.extinction(l), l))


def interpolant(separation, total_mass, gamma):
    """Exponential-decay model of the softmaxed mass for identical profiles."""
    s = np.exp(-gamma * np.asarray(separation, dtype=np.float64))
    return total_mass * (1.0 - 0.5 * s)


def fit_decay_rate(separations, masses, total_mass) -> float:
    """Least-squares decay rate for the interpolant against measured masses."""
    seps = np.asarray(separations, dtype=np.float64)
    vals = np.asarray(masses, dtype=np.float64)

    def sse(gamma):
        return float(np.sum((interpolant(seps, total_mass, gamma) - vals) ** 2))

    res = minimize_scalar(sse, bounds=(1e-3, 50.0), method="bounded")
    return float(res.x)


def decay_study(beta: float = 4.0, *, sigma: float = 1.0, total_mass: float = 0.5,
                n_points: int = 25, samples: int = DEFAULT_SAMPLES):
    """Sweep profile separation and compare the measured softmaxed mass with
    the fitted exponential interpolant.

    Returns a dict of columns: separation, a_ring, interpolant, residual,
    plus the fitted decay rate under key "gamma".
    """
    seps = np.linspace(0.0, SUPPORT_SIGMAS * sigma, n_points)
    a_ring = np.array([integrate_softmaxed_absorbance(d, beta, sigma=sigma,
                                                      total_mass=total_mass,
                                                      samples=samples)
                       for d in seps])
    gamma = fit_decay_rate(seps, a_ring, total_mass)
    model = interpolant(seps, total_mass, gamma)
    return {"separation": seps, "a_ring": a_ring, "interpolant": model,
            "residual": a_ring - model, "gamma": gamma, "total_mass": total_mass,
            "beta": beta}


def vanilla_splat_oracle(splats, pixel) -> np.ndarray:
    """Plain splatting sum c_k a_k prod_{j<k} (1 - a_j), evaluated directly.

    Independent of the compositor module: absorbances and prefix products are
    recomputed here from the splat fields with closed-form numpy expressions.
    """
    splats = list(splats)
    if not splats:
        return np.zeros(3)
    pixel = np.asarray(pixel, dtype=np.float64)
    a = np.empty(len(splats))
    colors = np.empty((len(splats), 3))
    for k, s in enumerate(splats):
        delta = np.asarray(s.center, dtype=np.float64) - pixel
        conic = np.asarray(s.conic, dtype=np.float64)
        q = float(delta @ conic @ delta)
        a[k] = s.opacity * np.exp(-((0.5 * q) ** s.alpha))
        colors[k] = s.color
    upstream = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
    return (a * upstream) @ colors


def two_profile_scene(separation: float, *, sigma: float = 1.0,
                      exponents=(-0.1, -0.7), peak_mass: float = 0.7,
                      colors=((1.0, 0.2, 0.1), (0.1, 0.3, 1.0)),
                      base: float = 10.0) -> List[RayProfile]:
    """Two overlapping lobes with mass tied to their transverse exponents."""
    out = []
    for i, (pe, col) in enumerate(zip(exponents, colors)):
        out.append(RayProfile(center=base + i * separation, sigma=sigma,
                              total_mass=peak_mass * np.exp(pe),
                              splat_exponent=pe, color=np.asarray(col, dtype=np.float64)))
    return out


def composite_profiles(profiles: Sequence[RayProfile], beta: float, gamma: float):
    """Run the renderer's sequential recurrence on profile-level quantities."""
    from .compositor import RayState, composite_values

    state = RayState()
    for p in sorted(profiles, key=lambda q: q.center):
        state, _ = composite_values(state, p.total_mass, p.splat_exponent,
                                    p.center, p.color, beta, gamma)
    return state.c_past
