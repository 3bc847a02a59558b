"""Fused per-pixel blending kernels (numba) with a hand-written backward pass.

Table rows are [M (9, row-major), o (3), sigma, rgb (3)]: M maps camera-frame
directions into a Gaussian's unit-sphere frame and o is the camera origin in
that frame. Rays have camera z component 1.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4


@njit(cache=True, inline="always")
def _eval(tab, g, dx, dy, dz):
    rx = tab[g, 0] * dx + tab[g, 1] * dy + tab[g, 2] * dz
    ry = tab[g, 3] * dx + tab[g, 4] * dy + tab[g, 5] * dz
    rz = tab[g, 6] * dx + tab[g, 7] * dy + tab[g, 8] * dz
    ox, oy, oz = tab[g, 9], tab[g, 10], tab[g, 11]
    rr = rx * rx + ry * ry + rz * rz
    t = -(ox * rx + oy * ry + oz * rz) / rr
    cx = oy * rz - oz * ry
    cy = oz * rx - ox * rz
    cz = ox * ry - oy * rx
    d2 = (cx * cx + cy * cy + cz * cz) / rr
    return rx, ry, rz, rr, t, d2


@njit(cache=True, inline="always")
def _plane_normal(tab, g, rx, ry, rz):
    mx = tab[g, 0] * rx + tab[g, 3] * ry + tab[g, 6] * rz
    my = tab[g, 1] * rx + tab[g, 4] * ry + tab[g, 7] * rz
    mz = tab[g, 2] * rx + tab[g, 5] * ry + tab[g, 8] * rz
    return mx, my, mz


@njit(cache=True)
def fused_forward(tab, cand, ncand, H, W, tile, ntx, fx, fy, cx, cy, near, bg):
    """Build sorted per-pixel lists and blend them.

    cand: (n_tiles, gmax) candidate ids per tile in ascending id order.
    Returns per-pixel rgb, acc, normal_acc, depth, crossing slot and the
    contribution lists as (start, count, flat ids).
    """
    P = H * W
    rgb = np.zeros((P, 3))
    acc = np.zeros(P)
    nacc = np.zeros((P, 3))
    depth = np.full(P, np.nan)
    first = np.full(P, -1, np.int64)
    start = np.zeros(P, np.int64)
    count = np.zeros(P, np.int64)
    gmax = cand.shape[1]
    buf = np.empty(max(16, P * 8), np.int32)
    used = 0
    tt = np.empty(gmax)
    aa = np.empty(gmax)
    ii = np.empty(gmax, np.int64)
    n_tiles = cand.shape[0]
    for tid in range(n_tiles):
        nc = ncand[tid]
        ty = tid // ntx
        tx = tid - ty * ntx
        for ly in range(tile):
            py = ty * tile + ly
            if py >= H:
                break
            for lx in range(tile):
                px = tx * tile + lx
                if px >= W:
                    break
                p = py * W + px
                dx = (px + 0.5 - cx) / fx
                dy = (py + 0.5 - cy) / fy
                m = 0
                for k in range(nc):
                    g = cand[tid, k]
                    rx, ry, rz, rr, t, d2 = _eval(tab, g, dx, dy, 1.0)
                    a = min(tab[g, 12] * math.exp(-0.5 * d2), ALPHA_MAX)
                    if a >= ALPHA_MIN and t > near and math.isfinite(t):
                        tt[m] = t
                        aa[m] = a
                        ii[m] = g
                        m += 1
                order = np.argsort(tt[:m], kind="mergesort")
                if used + m > buf.size:
                    nb = np.empty(max(buf.size * 2, used + m), np.int32)
                    nb[:used] = buf[:used]
                    buf = nb
                start[p] = used
                T = 1.0
                cum = 0.0
                n = 0
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                for q in range(m):
                    if T < TRANSMITTANCE_MIN:
                        break
                    j = order[q]
                    g = ii[j]
                    a = aa[j]
                    w = a * T
                    r0 += w * tab[g, 13]
                    r1 += w * tab[g, 14]
                    r2 += w * tab[g, 15]
                    rx, ry, rz, rr, t, d2 = _eval(tab, g, dx, dy, 1.0)
                    mx, my, mz = _plane_normal(tab, g, rx, ry, rz)
                    inv = 1.0 / math.sqrt(max(mx * mx + my * my + mz * mz, 1e-60))
                    n0 -= w * mx * inv
                    n1 -= w * my * inv
                    n2 -= w * mz * inv
                    cum += w
                    if first[p] < 0 and cum > 0.5:
                        first[p] = n
                        depth[p] = tt[j]
                    buf[used + n] = g
                    n += 1
                    T *= 1.0 - a
                count[p] = n
                used += n
                rgb[p, 0] = r0 + (1.0 - cum) * bg[0]
                rgb[p, 1] = r1 + (1.0 - cum) * bg[1]
                rgb[p, 2] = r2 + (1.0 - cum) * bg[2]
                acc[p] = cum
                nacc[p, 0] = n0
                nacc[p, 1] = n1
                nacc[p, 2] = n2
    return rgb, acc, nacc, depth, first, start, count, buf[:used].copy()


@njit(cache=True)
def fused_backward(tab, start, count, ids, first, H, W, fx, fy, cx, cy, bg, g_rgb, g_acc, g_nacc, g_depth):
    """Gradient of the blended outputs with respect to the table rows."""
    G = tab.shape[0]
    gt_ = np.zeros((G, 16))
    P = H * W
    kmax = 0
    for p in range(P):
        kmax = max(kmax, count[p])
    sa = np.empty(kmax)
    sraw = np.empty(kmax)
    sT = np.empty(kmax)
    se = np.empty(kmax)
    for p in range(P):
        n = count[p]
        if n == 0:
            continue
        py = p // W
        px = p - py * W
        dx = (px + 0.5 - cx) / fx
        dy = (py + 0.5 - cy) / fy
        dz = 1.0
        s0 = start[p]
        gr0, gr1, gr2 = g_rgb[p, 0], g_rgb[p, 1], g_rgb[p, 2]
        gn0, gn1, gn2 = g_nacc[p, 0], g_nacc[p, 1], g_nacc[p, 2]
        T = 1.0
        for j in range(n):
            g = ids[s0 + j]
            rx, ry, rz, rr, t, d2 = _eval(tab, g, dx, dy, dz)
            raw = tab[g, 12] * math.exp(-0.5 * d2)
            a = min(raw, ALPHA_MAX)
            mx, my, mz = _plane_normal(tab, g, rx, ry, rz)
            inv = 1.0 / math.sqrt(max(mx * mx + my * my + mz * mz, 1e-60))
            e = (gr0 * (tab[g, 13] - bg[0]) + gr1 * (tab[g, 14] - bg[1]) + gr2 * (tab[g, 15] - bg[2])
                 + g_acc[p] - (gn0 * mx + gn1 * my + gn2 * mz) * inv)
            sa[j] = a
            sraw[j] = raw
            sT[j] = T
            se[j] = e
            T *= 1.0 - a
        S = 0.0
        for j in range(n - 1, -1, -1):
            g = ids[s0 + j]
            a = sa[j]
            w = a * sT[j]
            g_alpha = se[j] * sT[j] - S / (1.0 - a)
            S += se[j] * w
            gt_[g, 13] += w * gr0
            gt_[g, 14] += w * gr1
            gt_[g, 15] += w * gr2

            rx, ry, rz, rr, t, d2 = _eval(tab, g, dx, dy, dz)
            ox, oy, oz = tab[g, 9], tab[g, 10], tab[g, 11]
            # normal n = -m/|m| with m = M^T r
            mx, my, mz = _plane_normal(tab, g, rx, ry, rz)
            mm = max(mx * mx + my * my + mz * mz, 1e-60)
            inv = 1.0 / math.sqrt(mm)
            ux, uy, uz = mx * inv, my * inv, mz * inv
            hx, hy, hz = w * gn0, w * gn1, w * gn2
            hu = hx * ux + hy * uy + hz * uz
            gmx = -(hx - hu * ux) * inv
            gmy = -(hy - hu * uy) * inv
            gmz = -(hz - hu * uz) * inv

            g_d2 = 0.0
            if sraw[j] <= ALPHA_MAX:
                E = math.exp(-0.5 * d2)
                gt_[g, 12] += g_alpha * E
                g_d2 = -0.5 * g_alpha * sraw[j]
            g_t = g_depth[p] if j == first[p] else 0.0
            # closest point of the ray to the mean, local frame
            qx, qy, qz = ox + t * rx, oy + t * ry, oz + t * rz
            gt_[g, 9] += 2.0 * g_d2 * qx - g_t * rx / rr
            gt_[g, 10] += 2.0 * g_d2 * qy - g_t * ry / rr
            gt_[g, 11] += 2.0 * g_d2 * qz - g_t * rz / rr
            grx = 2.0 * g_d2 * t * qx - g_t * (ox + 2.0 * t * rx) / rr
            gry = 2.0 * g_d2 * t * qy - g_t * (oy + 2.0 * t * ry) / rr
            grz = 2.0 * g_d2 * t * qz - g_t * (oz + 2.0 * t * rz) / rr
            grx += tab[g, 0] * gmx + tab[g, 1] * gmy + tab[g, 2] * gmz
            gry += tab[g, 3] * gmx + tab[g, 4] * gmy + tab[g, 5] * gmz
            grz += tab[g, 6] * gmx + tab[g, 7] * gmy + tab[g, 8] * gmz
            gt_[g, 0] += grx * dx + rx * gmx
            gt_[g, 1] += grx * dy + rx * gmy
            gt_[g, 2] += grx * dz + rx * gmz
            gt_[g, 3] += gry * dx + ry * gmx
            gt_[g, 4] += gry * dy + ry * gmy
            gt_[g, 5] += gry * dz + ry * gmz
            gt_[g, 6] += grz * dx + rz * gmx
            gt_[g, 7] += grz * dy + rz * gmy
            gt_[g, 8] += grz * dz + rz * gmz
    return gt_
