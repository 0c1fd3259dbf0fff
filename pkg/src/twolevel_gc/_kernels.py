"""Compiled loop kernels for same-padded cross-correlation.

Every output element is accumulated in one fixed order (in-channel, kernel
row, kernel column, then batch/pixel for weight gradients), so a result does
not depend on how many other output channels are computed in the same call.
That property is what makes a combined (m/N + 1)-row kernel reproduce two
separate convolutions bit for bit.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def corr_forward(xp, w):
    # xp: (B, n, H + d - 1, W + d - 1) zero-padded input; w: (m, n, d, d)
    B, n, hp, wp = xp.shape
    m = w.shape[0]
    d = w.shape[2]
    H = hp - d + 1
    W = wp - d + 1
    out = np.zeros((B, m, H, W))
    for b in range(B):
        for o in range(m):
            for i in range(n):
                for u in range(d):
                    for v in range(d):
                        c = w[o, i, u, v]
                        for y in range(H):
                            for x in range(W):
                                out[b, o, y, x] += c * xp[b, i, y + u, x + v]
    return out


@numba.njit(cache=True)
def corr_grad_input(g, w):
    # g: (B, m, H, W) upstream; returns gradient w.r.t. the padded input
    B, m, H, W = g.shape
    n = w.shape[1]
    d = w.shape[2]
    dxp = np.zeros((B, n, H + d - 1, W + d - 1))
    for b in range(B):
        for i in range(n):
            for o in range(m):
                for u in range(d):
                    for v in range(d):
                        c = w[o, i, u, v]
                        for y in range(H):
                            for x in range(W):
                                dxp[b, i, y + u, x + v] += c * g[b, o, y, x]
    return dxp


@numba.njit(cache=True)
def corr_grad_weight(xp, g, d):
    B, n, hp, wp = xp.shape
    m = g.shape[1]
    H = g.shape[2]
    W = g.shape[3]
    dw = np.zeros((m, n, d, d))
    for o in range(m):
        for i in range(n):
            for u in range(d):
                for v in range(d):
                    s = 0.0
                    for b in range(B):
                        for y in range(H):
                            for x in range(W):
                                s += g[b, o, y, x] * xp[b, i, y + u, x + v]
                    dw[o, i, u, v] = s
    return dw
