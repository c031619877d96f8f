"""Per-ray compositing: softmax-weighted absorbance with order invariance and
transmittance maintenance, plus the classic front-to-back product rule.

The sequential reduction treats everything already composited as a single
"past" entity. For each incoming splat it: records the transmittance the
plain product rule would produce, splits the absorbed mass between past and
current by a softmax over their Gaussian exponents, re-solves that split so
it is order invariant and transmittance preserving, relaxes the split back
toward the unweighted absorbances as the depth gap grows, and finally
rescales both sides so the plain-product transmittance is restored exactly.

This module is the readable scalar reference; `rasterizer`/`gradients` run
the same recurrence in compiled kernels and are differential-tested against
it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

DEFAULT_K = 128
DEFAULT_T_MIN = 1e-4
EPS_MASS = 1e-12      # below this, no absorbed mass competes
EPS_ROOT = 1e-12      # guard inside the scaling-factor square root
DISCRIMINANT_TOL = -1e-9


class ContractViolationError(ValueError):
    """Raised when a caller breaks an interface precondition (e.g. unsorted splats)."""


@dataclass
class RayState:
    """Running per-ray compositing state."""

    T_past: float = 1.0                      # transmittance so far, non-increasing
    c_past: np.ndarray = field(default_factory=lambda: np.zeros(3))  # premultiplied color
    d_past: float = 0.0                      # absorbance-weighted mean depth
    p_past: float = 0.0                      # absorbance-weighted mean exponent

    def copy(self) -> "RayState":
        return RayState(self.T_past, self.c_past.copy(), self.d_past, self.p_past)


@dataclass
class StepRecord:
    """Every intermediate of one compositing step, for the backward pass."""

    source_row: int
    p_cur: float
    a_raw: float          # GEF absorbance before any competition
    branch: bool          # False for the first contributing splat
    w_cur: float
    a_hat_past: float
    a_hat_cur: float
    a_tilde_past: float
    a_tilde_cur: float
    s: float
    a_bar_past: float
    a_bar_cur: float
    m: float
    a_fin: float          # final current absorbance actually composited
    T_orig: float
    state_before: RayState


@dataclass
class PixelTape:
    """Cache of the first K compositing steps at one pixel.

    `tail_rows` lists splats composited by the plain product rule after the
    cache filled (their count is the quantity of record; identities are kept
    so the backward pass can reconstruct that segment).
    """

    pixel: np.ndarray
    records: List[StepRecord] = field(default_factory=list)
    tail_rows: List[int] = field(default_factory=list)
    K: int = DEFAULT_K

    @property
    def vanilla_tail(self) -> int:
        return len(self.tail_rows)


def exponent(splat, pixel) -> float:
    """Gaussian exponent -0.5 * (center - pixel)^T conic (center - pixel); always <= 0."""
    d = np.asarray(splat.center, dtype=np.float64) - np.asarray(pixel, dtype=np.float64)
    q = float(d @ np.asarray(splat.conic) @ d)
    return -0.5 * q


def gef_absorbance(opacity, p, alpha):
    """Generalized-exponential absorbance opacity * exp(-(-p)^alpha); alpha=1 is Gaussian."""
    negp = -np.asarray(p, dtype=np.float64)
    out = opacity * np.exp(-np.power(negp, alpha))
    if np.ndim(out) == 0:
        return float(out)
    return out


def softmax_weight(p_past, p_cur, beta):
    """Two-way softmax over exponents; returns (w_past, w_cur), stable for any beta*dp."""
    z = beta * (np.asarray(p_past, dtype=np.float64) - p_cur)
    w_cur = np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-np.abs(z))),
                     1.0 / (1.0 + np.exp(-np.abs(z))))
    if np.ndim(w_cur) == 0:
        w_cur = float(w_cur)
    return 1.0 - w_cur, w_cur


def order_invariance_correct(a_hat_past, a_hat_cur, T_orig):
    """Redistribute absorbed mass so compositing order does not matter.

    Solves for (a~_past, a~_cur) with
        (1 - a~_past) * a~_cur / a~_past = a^_cur / a^_past
        (1 - a~_past) * (1 - a~_cur)     = T_orig
    i.e. past and current keep their softmax ratio while the plain-product
    transmittance is preserved. If neither side has mass, the inputs pass
    through unchanged.
    """
    hp = np.asarray(a_hat_past, dtype=np.float64)
    hc = np.asarray(a_hat_cur, dtype=np.float64)
    total = hp + hc
    absorbed = 1.0 - T_orig
    safe = total > EPS_MASS
    total_s = np.where(safe, total, 1.0)
    tp = hp * absorbed / total_s
    tc = hc * absorbed / np.where(safe, hc + hp * T_orig, 1.0)
    tp = np.where(safe, tp, hp)
    tc = np.where(safe, tc, hc)
    if np.ndim(tp) == 0:
        return float(tp), float(tc)
    return tp, tc


def decay_interpolate(a_tilde, a_raw, d_a, d_b, gamma):
    """Fade the competition-corrected absorbance back to raw with depth separation."""
    s = np.exp(-gamma * np.abs(np.asarray(d_a, dtype=np.float64) - d_b))
    out = s * a_tilde + (1.0 - s) * a_raw
    if np.ndim(out) == 0:
        return float(out)
    return out


def transmittance_scale(a_bar_past, a_bar_cur, T_orig):
    """Common factor m restoring (1 - m a-_past)(1 - m a-_cur) = T_orig.

    Smaller quadratic root, evaluated in the conjugate form for stability.
    The discriminant is (a-_past + a-_cur)^2 - 4 (1 - T_orig) a-_past a-_cur
    >= (a-_past - a-_cur)^2 >= 0 whenever T_orig >= 0; values below -1e-9
    indicate a broken caller and raise. When either absorbance is ~0 the
    constraint is already met to working precision and m = 1.
    """
    bp = np.asarray(a_bar_past, dtype=np.float64)
    bc = np.asarray(a_bar_cur, dtype=np.float64)
    P = 1.0 - np.asarray(T_orig, dtype=np.float64)
    S = bp + bc
    disc = S * S - 4.0 * P * bp * bc
    if np.any(disc < DISCRIMINANT_TOL):
        raise FloatingPointError(f"negative scaling discriminant: {np.min(disc)}")
    root = np.sqrt(np.maximum(disc, EPS_ROOT))
    active = (bp > EPS_MASS) & (bc > EPS_MASS)
    m = np.where(active, 2.0 * P / np.where(active, S + root, 1.0), 1.0)
    if np.ndim(m) == 0:
        return float(m)
    return m


def composite_values(state: RayState, a_raw: float, p_cur: float, depth: float,
                     color, beta: float, gamma: float, *, competition: bool = True,
                     source_row: int = -1):
    """One compositing step on precomputed (absorbance, exponent, depth, color).

    Returns the new state and the StepRecord. The competition path engages
    only once something has been absorbed (T_past < 1); disabling it gives
    the plain product rule exactly.
    """
    before = state.copy()
    color = np.asarray(color, dtype=np.float64)
    T0 = state.T_past
    branch = competition and T0 < 1.0

    w_cur = np.nan
    hp = hc = tp = tc = np.nan
    s = np.nan
    bp = np.nan
    m = np.nan
    T_orig = T0 * (1.0 - a_raw)

    if branch:
        a_past = 1.0 - T0
        _, w_cur = softmax_weight(state.p_past, p_cur, beta)
        hc = w_cur * a_raw
        hp = (1.0 - w_cur) * a_past
        tp, tc = order_invariance_correct(hp, hc, T_orig)
        s = float(np.exp(-gamma * abs(depth - state.d_past)))
        bp = s * tp + (1.0 - s) * a_past
        bc = s * tc + (1.0 - s) * a_raw
        m = transmittance_scale(bp, bc, T_orig)
        fp = m * bp
        a_fin = m * bc
        T_mid = 1.0 - fp
        rescale = fp / max(a_past, EPS_MASS)
        c_mid = state.c_past * rescale
        bc_rec = bc
    else:
        a_fin = a_raw
        T_mid = T0
        c_mid = state.c_past
        bc_rec = np.nan

    c_new = c_mid + color * a_fin * T_mid
    w1 = 1.0 - T_mid
    w2 = a_fin * T_mid
    denom = w1 + w2
    if denom > EPS_MASS:
        d_new = (state.d_past * w1 + depth * w2) / denom
        p_new = (state.p_past * w1 + p_cur * w2) / denom
    else:
        d_new, p_new = state.d_past, state.p_past
    new_state = RayState(T_past=T_mid * (1.0 - a_fin), c_past=c_new,
                         d_past=d_new, p_past=p_new)
    record = StepRecord(
        source_row=source_row, p_cur=p_cur, a_raw=a_raw, branch=bool(branch),
        w_cur=w_cur, a_hat_past=hp, a_hat_cur=hc, a_tilde_past=tp, a_tilde_cur=tc,
        s=s, a_bar_past=bp, a_bar_cur=bc_rec, m=m, a_fin=a_fin, T_orig=T_orig,
        state_before=before,
    )
    return new_state, record


def composite_step(state: RayState, splat, pixel, *, competition: bool = True,
                   source_row: int = -1):
    """One compositing step for a splat evaluated at a pixel."""
    p = exponent(splat, pixel)
    a = gef_absorbance(splat.opacity, p, splat.alpha)
    return composite_values(state, a, p, splat.depth, splat.color, splat.beta,
                            splat.gamma, competition=competition,
                            source_row=source_row)


def _check_sorted(depths):
    d = np.asarray(depths, dtype=np.float64)
    if d.size and np.any(np.diff(d) < 0):
        raise ContractViolationError("splats must be sorted near-to-far by depth")


def composite_ray(splats, pixel, K_limit: int = DEFAULT_K, *,
                  T_min: float = DEFAULT_T_MIN, competition: bool = True):
    """Composite a depth-sorted splat list at one pixel.

    The first K_limit splats run through the competition recurrence with tape
    recording; any remainder is composited by the plain product rule (so the
    final transmittance still matches the full product). Stops early once
    T_past < T_min.

    Returns (color, depth, T_final, tape).
    """
    if K_limit < 1:
        raise ContractViolationError("K_limit must be >= 1")
    splats = list(splats)
    _check_sorted([s.depth for s in splats])
    pixel = np.asarray(pixel, dtype=np.float64)
    state = RayState()
    tape = PixelTape(pixel=pixel, K=K_limit)
    for row, splat in enumerate(splats):
        if state.T_past < T_min:
            break
        if len(tape.records) < K_limit:
            state, rec = composite_step(state, splat, pixel,
                                        competition=competition, source_row=row)
            tape.records.append(rec)
        else:
            p = exponent(splat, pixel)
            a = gef_absorbance(splat.opacity, p, splat.alpha)
            state.c_past = state.c_past + np.asarray(splat.color) * a * state.T_past
            w1 = 1.0 - state.T_past
            w2 = a * state.T_past
            if w1 + w2 > EPS_MASS:
                state.d_past = (state.d_past * w1 + splat.depth * w2) / (w1 + w2)
                state.p_past = (state.p_past * w1 + p * w2) / (w1 + w2)
            state.T_past = state.T_past * (1.0 - a)
            tape.tail_rows.append(row)
    return state.c_past, state.d_past, state.T_past, tape


def composite_ray_vanilla(splats, pixel, *, T_min: float = DEFAULT_T_MIN):
    """Classic front-to-back product rule with GEF absorbances; order dependent."""
    splats = list(splats)
    _check_sorted([s.depth for s in splats])
    pixel = np.asarray(pixel, dtype=np.float64)
    color = np.zeros(3)
    T = 1.0
    for splat in splats:
        if T < T_min:
            break
        a = gef_absorbance(splat.opacity, exponent(splat, pixel), splat.alpha)
        color = color + np.asarray(splat.color) * a * T
        T *= 1.0 - a
    return color, T
