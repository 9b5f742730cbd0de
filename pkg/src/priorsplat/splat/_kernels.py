"""Numba kernels for tile-binned front-to-back splatting and its adjoint.

All inputs are already projected to screen space and sorted front to back.
Pixel (r, c) samples the screen point (c + 0.5, r + 0.5). Loops are serial so
every reduction has a fixed order and repeated runs are bit-identical.
"""

import math

import numpy as np
from numba import njit

DENSITY_CUTOFF = 1.0 / 255.0
ALPHA_MAX = 0.99
DEPTH_MIN_ALPHA = 1e-4
TILE = 16


@njit(cache=True)
def bin_tiles(mx, my, rad, height, width, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n = mx.shape[0]
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(ntx * nty, np.int64)
    for k in range(n):
        # columns whose centres lie within rad of the mean
        c0 = math.ceil(mx[k] - rad[k] - 0.5)
        c1 = math.floor(mx[k] + rad[k] - 0.5)
        r0 = math.ceil(my[k] - rad[k] - 0.5)
        r1 = math.floor(my[k] + rad[k] - 0.5)
        if c1 < 0 or r1 < 0 or c0 > width - 1 or r0 > height - 1:
            x0[k] = 1
            x1[k] = 0
            y0[k] = 1
            y1[k] = 0
            continue
        x0[k] = max(c0, 0) // tile
        x1[k] = min(c1, width - 1) // tile
        y0[k] = max(r0, 0) // tile
        y1[k] = min(r1, height - 1) // tile
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, np.int64)
    for t in range(ntx * nty):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    idx = np.empty(offsets[-1], np.int64)
    for k in range(n):
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                t = ty * ntx + tx
                idx[fill[t]] = k
                fill[t] += 1
    return offsets, idx


@njit(cache=True)
def render_tiles(mx, my, ca, cb, cc, opac, col, z, offsets, idx,
                 height, width, tile, bg):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    img = np.empty((height, width, 3))
    dep = np.zeros((height, width))
    acc = np.zeros((height, width))
    tfin = np.ones((height, width))
    ncontrib = np.zeros(mx.shape[0], np.int64)
    for t in range(ntiles):
        ty = t // ntx
        tx = t % ntx
        s = offsets[t]
        e = offsets[t + 1]
        for r in range(ty * tile, min(height, (ty + 1) * tile)):
            py = r + 0.5
            for c in range(tx * tile, min(width, (tx + 1) * tile)):
                px = c + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                nz = 0.0
                aw = 0.0
                for j in range(s, e):
                    k = idx[j]
                    dx = px - mx[k]
                    dy = py - my[k]
                    q = ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy
                    g = math.exp(-0.5 * q)
                    if g < DENSITY_CUTOFF:
                        continue
                    a = opac[k] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    c0 += w * col[k, 0]
                    c1 += w * col[k, 1]
                    c2 += w * col[k, 2]
                    nz += w * z[k]
                    aw += w
                    T *= 1.0 - a
                    ncontrib[k] += 1
                img[r, c, 0] = c0 + T * bg[0]
                img[r, c, 1] = c1 + T * bg[1]
                img[r, c, 2] = c2 + T * bg[2]
                acc[r, c] = aw
                tfin[r, c] = T
                if aw >= DEPTH_MIN_ALPHA:
                    dep[r, c] = nz / aw
    return img, dep, acc, tfin, ncontrib


@njit(cache=True)
def backward_tiles(mx, my, ca, cb, cc, opac, col, z, offsets, idx,
                   height, width, tile, bg, g_img, g_dep):
    """Adjoint of ``render_tiles``.

    Returns gradients w.r.t. the screen-space mean, conic entries (a, b, c of
    q = a dx^2 + 2 b dx dy + c dy^2), opacity, colour and depth.
    """
    n = mx.shape[0]
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    gmx = np.zeros(n)
    gmy = np.zeros(n)
    gca = np.zeros(n)
    gcb = np.zeros(n)
    gcc = np.zeros(n)
    gop = np.zeros(n)
    gcol = np.zeros((n, 3))
    gz = np.zeros(n)
    maxlen = 0
    for t in range(ntiles):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    ks = np.empty(maxlen, np.int64)
    gs = np.empty(maxlen)
    als = np.empty(maxlen)
    ts = np.empty(maxlen)
    dxs = np.empty(maxlen)
    dys = np.empty(maxlen)
    for t in range(ntiles):
        ty = t // ntx
        tx = t % ntx
        s = offsets[t]
        e = offsets[t + 1]
        for r in range(ty * tile, min(height, (ty + 1) * tile)):
            py = r + 0.5
            for c in range(tx * tile, min(width, (tx + 1) * tile)):
                gi0 = g_img[r, c, 0]
                gi1 = g_img[r, c, 1]
                gi2 = g_img[r, c, 2]
                gd = g_dep[r, c]
                if gi0 == 0.0 and gi1 == 0.0 and gi2 == 0.0 and gd == 0.0:
                    continue
                px = c + 0.5
                T = 1.0
                m = 0
                nz = 0.0
                aw = 0.0
                for j in range(s, e):
                    k = idx[j]
                    dx = px - mx[k]
                    dy = py - my[k]
                    q = ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy
                    g = math.exp(-0.5 * q)
                    if g < DENSITY_CUTOFF:
                        continue
                    a = opac[k] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    ks[m] = k
                    gs[m] = g
                    als[m] = a
                    ts[m] = T
                    dxs[m] = dx
                    dys[m] = dy
                    m += 1
                    nz += a * T * z[k]
                    aw += a * T
                    T *= 1.0 - a
                valid = aw >= DEPTH_MIN_ALPHA
                dval = nz / aw if valid else 0.0
                s0 = T * bg[0]
                s1 = T * bg[1]
                s2 = T * bg[2]
                sz = 0.0
                sw = 0.0
                for i in range(m - 1, -1, -1):
                    k = ks[i]
                    a = als[i]
                    Tk = ts[i]
                    w = a * Tk
                    inv = 1.0 / (1.0 - a)
                    dca = (
                        gi0 * (col[k, 0] * Tk - s0 * inv)
                        + gi1 * (col[k, 1] * Tk - s1 * inv)
                        + gi2 * (col[k, 2] * Tk - s2 * inv)
                    )
                    gcol[k, 0] += gi0 * w
                    gcol[k, 1] += gi1 * w
                    gcol[k, 2] += gi2 * w
                    if valid and gd != 0.0:
                        dn = z[k] * Tk - sz * inv
                        da = Tk - sw * inv
                        dca += gd * (dn - dval * da) / aw
                        gz[k] += gd * w / aw
                    s0 += w * col[k, 0]
                    s1 += w * col[k, 1]
                    s2 += w * col[k, 2]
                    sz += w * z[k]
                    sw += w
                    g = gs[i]
                    if opac[k] * g > ALPHA_MAX:
                        continue
                    gop[k] += dca * g
                    dq = -0.5 * g * opac[k] * dca
                    dx = dxs[i]
                    dy = dys[i]
                    gca[k] += dq * dx * dx
                    gcb[k] += dq * 2.0 * dx * dy
                    gcc[k] += dq * dy * dy
                    # d = pixel - mean
                    gmx[k] -= dq * (2.0 * ca[k] * dx + 2.0 * cb[k] * dy)
                    gmy[k] -= dq * (2.0 * cb[k] * dx + 2.0 * cc[k] * dy)
    return gmx, gmy, gca, gcb, gcc, gop, gcol, gz


@njit(cache=True)
def contribution_by_group(mx, my, ca, cb, cc, opac, group, ngroups,
                          offsets, idx, height, width, tile):
    """Per-group alpha-weighted contribution sum_k alpha_k T_k at every pixel."""
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    out = np.zeros((ngroups, height, width))
    for t in range(ntiles):
        ty = t // ntx
        tx = t % ntx
        s = offsets[t]
        e = offsets[t + 1]
        for r in range(ty * tile, min(height, (ty + 1) * tile)):
            py = r + 0.5
            for c in range(tx * tile, min(width, (tx + 1) * tile)):
                px = c + 0.5
                T = 1.0
                for j in range(s, e):
                    k = idx[j]
                    dx = px - mx[k]
                    dy = py - my[k]
                    q = ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy
                    g = math.exp(-0.5 * q)
                    if g < DENSITY_CUTOFF:
                        continue
                    a = opac[k] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if group[k] >= 0:
                        out[group[k], r, c] += a * T
                    T *= 1.0 - a
    return out
