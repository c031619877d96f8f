"""Compiled kernels: tiled forward rasterization and the tape-replay backward.

Splats are marshaled into one float64 matrix with the column layout below;
per-splat gradients come back in the same layout (without the radius).
Tiles are processed in parallel; every accumulation that crosses tiles is
written to disjoint buffers and reduced in fixed order by the caller, so
results are deterministic regardless of thread count.

The backward pass stores only the pre-step state (T, color, mean depth,
mean exponent) for up to K records per pixel and recomputes each step's
intermediates while walking far-to-near, which keeps the whole pass linear
in the number of composited splats.
"""

import numpy as np
from numba import njit, prange

# splat matrix columns
SX, SY, SA, SB, SC, SD, SR, SG, SBL, SO, SAL, SBE, SGA, SRAD = range(14)
NGRAD = 13  # gradient columns = the first 13 above

EPS_MASS = 1e-12
EPS_ROOT = 1e-12


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _sigmoid_neg(z):
    """1 / (1 + exp(z)), stable for any magnitude of z."""
    if z >= 0.0:
        e = np.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + np.exp(z))


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _pixel_forward(px, py, rows, splats, K, T_min, comp, cutoff, bg0, bg1, bg2):
    """Composite all candidate rows at one pixel; returns color, T, depth, counts."""
    T = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    dp = 0.0
    pp = 0.0
    nrec = 0
    ntail = 0
    for i in range(rows.shape[0]):
        if T < T_min:
            break
        r = rows[i]
        dx = splats[r, SX] - px
        dy = splats[r, SY] - py
        if cutoff:
            rad = splats[r, SRAD]
            if dx * dx + dy * dy > rad * rad:
                continue
        A = splats[r, SA]
        B = splats[r, SB]
        C = splats[r, SC]
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        p = -0.5 * q
        negp = -p
        al = splats[r, SAL]
        powv = negp if al == 1.0 else negp ** al
        a = splats[r, SO] * np.exp(-powv)
        d = splats[r, SD]
        if nrec < K:
            if comp and T < 1.0:
                T_orig = T * (1.0 - a)
                ap = 1.0 - T
                z = splats[r, SBE] * (pp - p)
                wc = _sigmoid_neg(z)
                hc = wc * a
                hp = (1.0 - wc) * ap
                F = 1.0 - T_orig
                D1 = hp + hc
                if D1 > EPS_MASS:
                    tp = hp * F / D1
                    tc = hc * F / (hc + hp * T_orig)
                else:
                    tp = hp
                    tc = hc
                s = np.exp(-splats[r, SGA] * abs(d - dp))
                bp = s * tp + (1.0 - s) * ap
                bc = s * tc + (1.0 - s) * a
                if bp > EPS_MASS and bc > EPS_MASS:
                    S2 = bp + bc
                    disc = S2 * S2 - 4.0 * F * bp * bc
                    ra = disc if disc > EPS_ROOT else EPS_ROOT
                    m = 2.0 * F / (S2 + np.sqrt(ra))
                else:
                    m = 1.0
                fp = m * bp
                fc = m * bc
                Tm = 1.0 - fp
                apc = ap if ap > EPS_MASS else EPS_MASS
                rsc = fp / apc
                cr *= rsc
                cg *= rsc
                cb *= rsc
            else:
                fc = a
                Tm = T
            nrec += 1
        else:
            fc = a
            Tm = T
            ntail += 1
        w2 = fc * Tm
        cr += splats[r, SR] * w2
        cg += splats[r, SG] * w2
        cb += splats[r, SBL] * w2
        w1 = 1.0 - Tm
        D3 = w1 + w2
        if D3 > EPS_MASS:
            dp = (dp * w1 + d * w2) / D3
            pp = (pp * w1 + p * w2) / D3
        T = Tm * (1.0 - fc)
    cr += bg0 * T
    cg += bg1 * T
    cb += bg2 * T
    return cr, cg, cb, T, dp, nrec, ntail


@njit(cache=True, fastmath=True, error_model="numpy")
def _pixel_forward_tape(px, py, rows, splats, K, T_min, comp, cutoff,
                        pre, rec_pos, tail_pos, tail_val):
    """Forward identical to `_pixel_forward`, recording tape buffers.

    pre[k]      pre-step state (T, cr, cg, cb, dp, pp) of record k
    rec_pos[k]  position of record k inside `rows`
    tail_pos[j] position of tail splat j inside `rows`
    tail_val[j] (a, p, T_before) of tail splat j
    """
    T = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    dp = 0.0
    pp = 0.0
    nrec = 0
    ntail = 0
    for i in range(rows.shape[0]):
        if T < T_min:
            break
        r = rows[i]
        dx = splats[r, SX] - px
        dy = splats[r, SY] - py
        if cutoff:
            rad = splats[r, SRAD]
            if dx * dx + dy * dy > rad * rad:
                continue
        A = splats[r, SA]
        B = splats[r, SB]
        C = splats[r, SC]
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        p = -0.5 * q
        negp = -p
        al = splats[r, SAL]
        powv = negp if al == 1.0 else negp ** al
        a = splats[r, SO] * np.exp(-powv)
        d = splats[r, SD]
        if nrec < K:
            pre[nrec, 0] = T
            pre[nrec, 1] = cr
            pre[nrec, 2] = cg
            pre[nrec, 3] = cb
            pre[nrec, 4] = dp
            pre[nrec, 5] = pp
            rec_pos[nrec] = i
            if comp and T < 1.0:
                T_orig = T * (1.0 - a)
                ap = 1.0 - T
                z = splats[r, SBE] * (pp - p)
                wc = _sigmoid_neg(z)
                hc = wc * a
                hp = (1.0 - wc) * ap
                F = 1.0 - T_orig
                D1 = hp + hc
                if D1 > EPS_MASS:
                    tp = hp * F / D1
                    tc = hc * F / (hc + hp * T_orig)
                else:
                    tp = hp
                    tc = hc
                s = np.exp(-splats[r, SGA] * abs(d - dp))
                bp = s * tp + (1.0 - s) * ap
                bc = s * tc + (1.0 - s) * a
                if bp > EPS_MASS and bc > EPS_MASS:
                    S2 = bp + bc
                    disc = S2 * S2 - 4.0 * F * bp * bc
                    ra = disc if disc > EPS_ROOT else EPS_ROOT
                    m = 2.0 * F / (S2 + np.sqrt(ra))
                else:
                    m = 1.0
                fp = m * bp
                fc = m * bc
                Tm = 1.0 - fp
                apc = ap if ap > EPS_MASS else EPS_MASS
                rsc = fp / apc
                cr *= rsc
                cg *= rsc
                cb *= rsc
            else:
                fc = a
                Tm = T
            nrec += 1
        else:
            tail_pos[ntail] = i
            tail_val[ntail, 0] = a
            tail_val[ntail, 1] = p
            tail_val[ntail, 2] = T
            fc = a
            Tm = T
            ntail += 1
        w2 = fc * Tm
        cr += splats[r, SR] * w2
        cg += splats[r, SG] * w2
        cb += splats[r, SBL] * w2
        w1 = 1.0 - Tm
        D3 = w1 + w2
        if D3 > EPS_MASS:
            dp = (dp * w1 + d * w2) / D3
            pp = (pp * w1 + p * w2) / D3
        T = Tm * (1.0 - fc)
    # background is composited by callers; the tape path returns raw accumulation
    return cr, cg, cb, T, dp, nrec, ntail


@njit(cache=True, fastmath=True, error_model="numpy")
def _pixel_backward(px, py, rows, splats, K, T_min, comp, cutoff, detach,
                    dlr, dlg, dlb, bg0, bg1, bg2,
                    pre, rec_pos, tail_pos, tail_val, tile_grads):
    """Replay the forward at one pixel, then chain adjoints far-to-near.

    Accumulates per-splat gradients into tile_grads rows aligned with `rows`.
    """
    cr, cg, cb, T, dp, nrec, ntail = _pixel_forward_tape(
        px, py, rows, splats, K, T_min, comp, cutoff, pre, rec_pos, tail_pos, tail_val)

    gcr = dlr
    gcg = dlg
    gcb = dlb
    gT = dlr * bg0 + dlg * bg1 + dlb * bg2  # output color includes bg * T_final

    # plain-product tail, farthest first
    for j in range(ntail - 1, -1, -1):
        i = tail_pos[j]
        r = rows[i]
        a = tail_val[j, 0]
        p = tail_val[j, 1]
        Tb = tail_val[j, 2]
        dot_c = gcr * splats[r, SR] + gcg * splats[r, SG] + gcb * splats[r, SBL]
        g_a = dot_c * Tb - gT * Tb
        gT = dot_c * a + gT * (1.0 - a)
        tile_grads[i, SR] += gcr * a * Tb
        tile_grads[i, SG] += gcg * a * Tb
        tile_grads[i, SBL] += gcb * a * Tb
        negp = -p
        alpha = splats[r, SAL]
        powv = negp if alpha == 1.0 else negp ** alpha
        o = splats[r, SO]
        tile_grads[i, SO] += g_a * np.exp(-powv)
        gpow = -g_a * a
        if negp > 0.0:
            gnegp = gpow * alpha if alpha == 1.0 else gpow * alpha * negp ** (alpha - 1.0)
            tile_grads[i, SAL] += gpow * powv * np.log(negp)
        else:
            gnegp = 0.0
        g_p = -gnegp
        gq = -0.5 * g_p
        dx = splats[r, SX] - px
        dy = splats[r, SY] - py
        A = splats[r, SA]
        B = splats[r, SB]
        C = splats[r, SC]
        tile_grads[i, SA] += gq * dx * dx
        tile_grads[i, SB] += gq * 2.0 * dx * dy
        tile_grads[i, SC] += gq * dy * dy
        tile_grads[i, SX] += gq * (2.0 * A * dx + 2.0 * B * dy)
        tile_grads[i, SY] += gq * (2.0 * B * dx + 2.0 * C * dy)

    gdp = 0.0
    gpp = 0.0
    for k in range(nrec - 1, -1, -1):
        if detach:
            gdp = 0.0
            gpp = 0.0
        i = rec_pos[k]
        r = rows[i]
        T0 = pre[k, 0]
        c0r = pre[k, 1]
        c0g = pre[k, 2]
        c0b = pre[k, 3]
        dp0 = pre[k, 4]
        pp0 = pre[k, 5]

        # --- replay this step's intermediates ---
        dx = splats[r, SX] - px
        dy = splats[r, SY] - py
        A = splats[r, SA]
        B = splats[r, SB]
        C = splats[r, SC]
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        p = -0.5 * q
        negp = -p
        alpha = splats[r, SAL]
        powv = negp if alpha == 1.0 else negp ** alpha
        o = splats[r, SO]
        E = np.exp(-powv)
        a = o * E
        d = splats[r, SD]
        branch = comp and T0 < 1.0
        beta = splats[r, SBE]
        gamma = splats[r, SGA]
        # defaults so the non-branch path leaves them defined
        T_orig = ap = wc = hc = hp = F = tp = tc = s = bp = bc = 0.0
        S2 = Q = disc = root = m = fp = apc = rsc = 0.0
        pass1 = False
        bypass = False
        dd = 0.0
        if branch:
            T_orig = T0 * (1.0 - a)
            ap = 1.0 - T0
            z = beta * (pp0 - p)
            wc = _sigmoid_neg(z)
            hc = wc * a
            hp = (1.0 - wc) * ap
            F = 1.0 - T_orig
            D1 = hp + hc
            pass1 = D1 <= EPS_MASS
            if not pass1:
                tp = hp * F / D1
                D2 = hc + hp * T_orig
                tc = hc * F / D2
            else:
                tp = hp
                tc = hc
                D1 = 1.0
                D2 = 1.0
            dd = d - dp0
            s = np.exp(-gamma * abs(dd))
            bp = s * tp + (1.0 - s) * ap
            bc = s * tc + (1.0 - s) * a
            bypass = not (bp > EPS_MASS and bc > EPS_MASS)
            if not bypass:
                S2 = bp + bc
                Q = bp * bc
                disc = S2 * S2 - 4.0 * F * Q
                ra = disc if disc > EPS_ROOT else EPS_ROOT
                root = np.sqrt(ra)
                m = 2.0 * F / (S2 + root)
            else:
                m = 1.0
            fp = m * bp
            fc = m * bc
            Tm = 1.0 - fp
            apc = ap if ap > EPS_MASS else EPS_MASS
            rsc = fp / apc
        else:
            fc = a
            Tm = T0
            D2 = 1.0
        w2 = fc * Tm
        w1 = 1.0 - Tm
        D3 = w1 + w2
        upd = D3 > EPS_MASS
        if upd:
            dp1 = (dp0 * w1 + d * w2) / D3
            pp1 = (pp0 * w1 + p * w2) / D3
        else:
            dp1 = dp0
            pp1 = pp0

        # --- adjoints, exact reverse order ---
        gTm = gT * (1.0 - fc)
        gfc = -gT * Tm
        if upd:
            gdp0 = gdp * w1 / D3
            g_d = gdp * w2 / D3
            gw1 = gdp * (dp0 - dp1) / D3
            gw2 = gdp * (d - dp1) / D3
            gpp0 = gpp * w1 / D3
            g_p = gpp * w2 / D3
            gw1 += gpp * (pp0 - pp1) / D3
            gw2 += gpp * (p - pp1) / D3
        else:
            gdp0 = gdp
            gpp0 = gpp
            gw1 = 0.0
            gw2 = 0.0
            g_d = 0.0
            g_p = 0.0
        gTm += -gw1 + gw2 * fc
        gfc += gw2 * Tm
        dot_c = gcr * splats[r, SR] + gcg * splats[r, SG] + gcb * splats[r, SBL]
        tile_grads[i, SR] += gcr * fc * Tm
        tile_grads[i, SG] += gcg * fc * Tm
        tile_grads[i, SBL] += gcb * fc * Tm
        gfc += dot_c * Tm
        gTm += dot_c * fc
        g_a = 0.0
        if branch:
            grsc = gcr * c0r + gcg * c0g + gcb * c0b
            gcr *= rsc
            gcg *= rsc
            gcb *= rsc
            gfp = grsc / apc
            if ap > EPS_MASS:
                gap = -grsc * fp / (apc * apc)
            else:
                gap = 0.0
            gfp += -gTm
            gm = gfc * bc + gfp * bp
            gbc = gfc * m
            gbp = gfp * m
            gF = 0.0
            if not bypass:
                den = S2 + root
                gF += gm * 2.0 / den
                gS2 = -gm * m / den
                groot = -gm * m / den
                if disc > EPS_ROOT:
                    gdisc = groot / (2.0 * root)
                else:
                    gdisc = 0.0
                gS2 += gdisc * 2.0 * S2
                gF += -gdisc * 4.0 * Q
                gQ = -gdisc * 4.0 * F
                gbp += gQ * bc + gS2
                gbc += gQ * bp + gS2
            gs = gbc * (tc - a) + gbp * (tp - ap)
            gtc = gbc * s
            g_a += gbc * (1.0 - s)
            gtp = gbp * s
            gap += gbp * (1.0 - s)
            tile_grads[i, SGA] += -gs * s * abs(dd)
            gadd = -gs * s * gamma
            sg = 0.0
            if dd > 0.0:
                sg = 1.0
            elif dd < 0.0:
                sg = -1.0
            g_d += gadd * sg
            gdp0 += -gadd * sg
            if not pass1:
                ghc = gtc * F / D2
                gF += gtc * hc / D2
                gD2 = -gtc * tc / D2
                ghc += gD2
                ghp = gD2 * T_orig
                gTor = gD2 * hp
                ghp += gtp * F / D1
                gF += gtp * hp / D1
                gD1 = -gtp * tp / D1
                ghp += gD1
                ghc += gD1
            else:
                ghc = gtc
                ghp = gtp
                gTor = 0.0
            gTor += -gF
            gwp = ghp * ap
            gap += ghp * (1.0 - wc)
            gwc = ghc * a
            g_a += ghc * wc
            gwc += -gwp
            gz = -gwc * wc * (1.0 - wc)
            tile_grads[i, SBE] += gz * (pp0 - p)
            gpp0 += gz * beta
            g_p += -gz * beta
            gT0 = -gap
            gT0 += gTor * (1.0 - a)
            g_a += -gTor * T0
        else:
            g_a += gfc
            gT0 = gTm
        tile_grads[i, SO] += g_a * E
        gpow = -g_a * a
        if negp > 0.0:
            gnegp = gpow * alpha if alpha == 1.0 else gpow * alpha * negp ** (alpha - 1.0)
            tile_grads[i, SAL] += gpow * powv * np.log(negp)
        else:
            gnegp = 0.0
        g_p += -gnegp
        gq = -0.5 * g_p
        tile_grads[i, SA] += gq * dx * dx
        tile_grads[i, SB] += gq * 2.0 * dx * dy
        tile_grads[i, SC] += gq * dy * dy
        tile_grads[i, SX] += gq * (2.0 * A * dx + 2.0 * B * dy)
        tile_grads[i, SY] += gq * (2.0 * B * dx + 2.0 * C * dy)
        tile_grads[i, SD] += g_d
        gT = gT0
        gdp = gdp0
        gpp = gpp0


@njit(cache=True, parallel=True, fastmath=True, error_model="numpy")
def render_tiles(splats, bin_offsets, bin_rows, H, W, tile, K, T_min, comp, cutoff,
                 bg, out_color, out_depth, out_T, out_nrec, out_ntail):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    for ti in prange(ntx * nty):
        tyi = ti // ntx
        txi = ti % ntx
        rows = bin_rows[bin_offsets[ti]:bin_offsets[ti + 1]]
        y1 = min((tyi + 1) * tile, H)
        x1 = min((txi + 1) * tile, W)
        for yy in range(tyi * tile, y1):
            py = yy + 0.5
            for xx in range(txi * tile, x1):
                px = xx + 0.5
                cr, cg, cb, T, dp, nrec, ntail = _pixel_forward(
                    px, py, rows, splats, K, T_min, comp, cutoff,
                    bg[0], bg[1], bg[2])
                out_color[yy, xx, 0] = cr
                out_color[yy, xx, 1] = cg
                out_color[yy, xx, 2] = cb
                out_T[yy, xx] = T
                out_depth[yy, xx] = dp
                out_nrec[yy, xx] = nrec
                out_ntail[yy, xx] = ntail


@njit(cache=True, parallel=True, fastmath=True, error_model="numpy")
def backward_tiles(splats, bin_offsets, bin_rows, H, W, tile, K, T_min, comp,
                   cutoff, detach, bg, dL_dcolor, entry_grads):
    """Fill entry_grads (aligned with bin_rows) with per-tile splat gradients."""
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    for ti in prange(ntx * nty):
        tyi = ti // ntx
        txi = ti % ntx
        lo = bin_offsets[ti]
        hi = bin_offsets[ti + 1]
        nbin = hi - lo
        if nbin == 0:
            continue
        rows = bin_rows[lo:hi]
        tile_grads = np.zeros((nbin, NGRAD))
        pre = np.empty((K, 6))
        rec_pos = np.empty(K, dtype=np.int64)
        tail_pos = np.empty(nbin, dtype=np.int64)
        tail_val = np.empty((nbin, 3))
        y1 = min((tyi + 1) * tile, H)
        x1 = min((txi + 1) * tile, W)
        for yy in range(tyi * tile, y1):
            py = yy + 0.5
            for xx in range(txi * tile, x1):
                px = xx + 0.5
                _pixel_backward(px, py, rows, splats, K, T_min, comp, cutoff,
                                detach, dL_dcolor[yy, xx, 0], dL_dcolor[yy, xx, 1],
                                dL_dcolor[yy, xx, 2], bg[0], bg[1], bg[2],
                                pre, rec_pos, tail_pos, tail_val, tile_grads)
        entry_grads[lo:hi] = tile_grads


@njit(cache=True)
def render_tapes(splats, bin_offsets, bin_rows, H, W, tile, K, T_min, comp, cutoff,
                 tape_pre, tape_rows, tape_count, tail_count, tail_rows_out):
    """Serial tape materialization over the full image (test-scale only)."""
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    max_tail = tail_rows_out.shape[1]
    for ti in range(ntx * nty):
        tyi = ti // ntx
        txi = ti % ntx
        rows = bin_rows[bin_offsets[ti]:bin_offsets[ti + 1]]
        nbin = rows.shape[0]
        tail_pos = np.empty(max(nbin, 1), dtype=np.int64)
        tail_val = np.empty((max(nbin, 1), 3))
        rec_pos = np.empty(K, dtype=np.int64)
        y1 = min((tyi + 1) * tile, H)
        x1 = min((txi + 1) * tile, W)
        for yy in range(tyi * tile, y1):
            py = yy + 0.5
            for xx in range(txi * tile, x1):
                px = xx + 0.5
                pix = yy * W + xx
                cr, cg, cb, T, dp, nrec, ntail = _pixel_forward_tape(
                    px, py, rows, splats, K, T_min, comp, cutoff,
                    tape_pre[pix], rec_pos, tail_pos, tail_val)
                tape_count[pix] = nrec
                tail_count[pix] = ntail
                for k in range(nrec):
                    tape_rows[pix, k] = rows[rec_pos[k]]
                for j in range(min(ntail, max_tail)):
                    tail_rows_out[pix, j] = rows[tail_pos[j]]


@njit(cache=True)
def gather_ray_rows(splats, bin_offsets, bin_rows, tile, ntx, K, T_min, comp,
                    cutoff, pys, pxs, out_rows, out_counts):
    """Tape membership (global splat rows) for a list of sampled pixels."""
    pre = np.empty((K, 6))
    rec_pos = np.empty(K, dtype=np.int64)
    for j in range(pys.shape[0]):
        yy = pys[j]
        xx = pxs[j]
        ti = (yy // tile) * ntx + (xx // tile)
        rows = bin_rows[bin_offsets[ti]:bin_offsets[ti + 1]]
        nbin = rows.shape[0]
        tail_pos = np.empty(max(nbin, 1), dtype=np.int64)
        tail_val = np.empty((max(nbin, 1), 3))
        cr, cg, cb, T, dp, nrec, ntail = _pixel_forward_tape(
            xx + 0.5, yy + 0.5, rows, splats, K, T_min, comp, cutoff,
            pre, rec_pos, tail_pos, tail_val)
        out_counts[j] = nrec
        for k in range(nrec):
            out_rows[j, k] = rows[rec_pos[k]]


@njit(cache=True)
def bin_splats(centers, radii, H, W, tile):
    """CSR tile bins: for each tile, the splat rows whose cull disc meets it.

    Input rows must already be in compositing (depth) order; bins preserve it.
    """
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    n = centers.shape[0]
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for r in range(n):
        cx = centers[r, 0]
        cy = centers[r, 1]
        rad = radii[r]
        x0 = max(int(np.floor((cx - rad) / tile)), 0)
        x1 = min(int(np.floor((cx + rad) / tile)), ntx - 1)
        y0 = max(int(np.floor((cy - rad) / tile)), 0)
        y1 = min(int(np.floor((cy + rad) / tile)), nty - 1)
        for tyi in range(y0, y1 + 1):
            for txi in range(x0, x1 + 1):
                # nearest point of the tile rectangle to the splat center
                nx = min(max(cx, txi * tile), min((txi + 1) * tile, W))
                ny = min(max(cy, tyi * tile), min((tyi + 1) * tile, H))
                ddx = cx - nx
                ddy = cy - ny
                if ddx * ddx + ddy * ddy <= rad * rad:
                    counts[tyi * ntx + txi + 1] += 1
    offsets = np.cumsum(counts)
    out = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for r in range(n):
        cx = centers[r, 0]
        cy = centers[r, 1]
        rad = radii[r]
        x0 = max(int(np.floor((cx - rad) / tile)), 0)
        x1 = min(int(np.floor((cx + rad) / tile)), ntx - 1)
        y0 = max(int(np.floor((cy - rad) / tile)), 0)
        y1 = min(int(np.floor((cy + rad) / tile)), nty - 1)
        for tyi in range(y0, y1 + 1):
            for txi in range(x0, x1 + 1):
                nx = min(max(cx, txi * tile), min((txi + 1) * tile, W))
                ny = min(max(cy, tyi * tile), min((tyi + 1) * tile, H))
                ddx = cx - nx
                ddy = cy - ny
                if ddx * ddx + ddy * ddy <= rad * rad:
                    t = tyi * ntx + txi
                    out[cursor[t]] = r
                    cursor[t] += 1
    return offsets, out
