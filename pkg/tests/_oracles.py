"""
Straight-loop reference implementations, written independently of `emattn.ops` (no numpy vectorization beyond
scalar access) so that the vectorized kernels can be compared against them.
"""
from math import exp

import numpy as np


def sig(z):
    return 1. / (1. + exp(-z)) if z >= 0 else exp(z) / (1. + exp(z))


def softmax_list(values):
    m = max(values)
    e = [exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def matmul_loop(a, b):
    n, m, k = a.shape
    p = b.shape[2]
    out = np.zeros((n, m, p))
    for s in range(n):
        for i in range(m):
            for j in range(p):
                acc = 0.
                for t in range(k):
                    acc += a[s, i, t] * b[s, t, j]
                out[s, i, j] = acc
    return out


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for s in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0. if b is None else b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i * stride + u - padding, j * stride + v - padding
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += w[o, c, u, v] * x[s, c, ii, jj]
                    out[s, o, i, j] = acc
    return out


def avgpool_width_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h, 1))
    for s in range(n):
        for k in range(c):
            for i in range(h):
                out[s, k, i, 0] = sum(x[s, k, i, j] for j in range(w)) / w
    return out


def avgpool_height_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, w))
    for s in range(n):
        for k in range(c):
            for j in range(w):
                out[s, k, 0, j] = sum(x[s, k, i, j] for i in range(h)) / h
    return out


def _plane_mean(plane):
    h, w = plane.shape
    return sum(plane[i, j] for i in range(h) for j in range(w)) / (h * w)


def _normalize_plane(plane, gamma, beta, eps=1e-5):
    h, w = plane.shape
    mu = _plane_mean(plane)
    var = sum((plane[i, j] - mu) ** 2 for i in range(h) for j in range(w)) / (h * w)
    out = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            out[i, j] = gamma * (plane[i, j] - mu) / np.sqrt(var + eps) + beta
    return out


def ema_loop(buffers, groups, x, cross_spatial=True):
    """EMA on x (B, C, H, W), one group of one sample at a time."""
    B, C, H, W = x.shape
    c = C // groups
    w1, b1 = buffers["conv1x1.weight"], buffers["conv1x1.bias"]
    w3, b3 = buffers["conv3x3.weight"], buffers["conv3x3.bias"]
    out = np.zeros_like(x)
    for b in range(B):
        for g in range(groups):
            xg = x[b, g * c:(g + 1) * c]
            ph = [[sum(xg[k, i, j] for j in range(W)) / W for i in range(H)] for k in range(c)]
            pw = [[sum(xg[k, i, j] for i in range(H)) / H for j in range(W)] for k in range(c)]
            gate_h = [[sig(b1[o] + sum(w1[o, k, 0, 0] * ph[k][i] for k in range(c))) for i in range(H)]
                      for o in range(c)]
            gate_w = [[sig(b1[o] + sum(w1[o, k, 0, 0] * pw[k][j] for k in range(c))) for j in range(W)]
                      for o in range(c)]
            x1 = np.zeros((c, H, W))
            for k in range(c):
                for i in range(H):
                    for j in range(W):
                        x1[k, i, j] = xg[k, i, j] * gate_h[k][i] * gate_w[k][j]
            if "gn.weight" in buffers:
                for k in range(c):
                    x1[k] = _normalize_plane(x1[k], buffers["gn.weight"][k], buffers["gn.bias"][k])
            x2 = conv2d_loop(xg[None], w3, b3, padding=1)[0]

            if not cross_spatial:
                out[b, g * c:(g + 1) * c] = (x1 + x2) / 2.
                continue
            a1 = softmax_list([_plane_mean(x1[k]) for k in range(c)])
            a2 = softmax_list([_plane_mean(x2[k]) for k in range(c)])
            for i in range(H):
                for j in range(W):
                    y = sum(a1[k] * x2[k, i, j] + a2[k] * x1[k, i, j] for k in range(c))
                    for k in range(c):
                        out[b, g * c + k, i, j] = xg[k, i, j] * sig(y)
    return out


def ca_loop(buffers, x):
    B, C, H, W = x.shape
    wr, br = buffers["reduce.weight"][:, :, 0, 0], buffers["reduce.bias"]
    wh, bh = buffers["route_h.weight"][:, :, 0, 0], buffers["route_h.bias"]
    ww, bw = buffers["route_w.weight"][:, :, 0, 0], buffers["route_w.bias"]
    mip = wr.shape[0]
    out = np.zeros_like(x)
    for b in range(B):
        desc = [[sum(x[b, k, i, j] for j in range(W)) / W for i in range(H)]
                + [sum(x[b, k, i, j] for i in range(H)) / H for j in range(W)] for k in range(C)]
        f = [[max(0., br[m] + sum(wr[m, k] * desc[k][t] for k in range(C))) for t in range(H + W)]
             for m in range(mip)]
        gh = [[sig(bh[k] + sum(wh[k, m] * f[m][i] for m in range(mip))) for i in range(H)] for k in range(C)]
        gw = [[sig(bw[k] + sum(ww[k, m] * f[m][H + j] for m in range(mip))) for j in range(W)] for k in range(C)]
        for k in range(C):
            for i in range(H):
                for j in range(W):
                    out[b, k, i, j] = x[b, k, i, j] * gh[k][i] * gw[k][j]
    return out


def se_loop(buffers, x):
    B, C, H, W = x.shape
    w1, b1 = buffers["squeeze.weight"], buffers["squeeze.bias"]
    w2, b2 = buffers["excite.weight"], buffers["excite.bias"]
    mip = w1.shape[0]
    out = np.zeros_like(x)
    for b in range(B):
        s = [_plane_mean(x[b, k]) for k in range(C)]
        z = [max(0., b1[m] + sum(w1[m, k] * s[k] for k in range(C))) for m in range(mip)]
        e = [sig(b2[k] + sum(w2[k, m] * z[m] for m in range(mip))) for k in range(C)]
        for k in range(C):
            out[b, k] = x[b, k] * e[k]
    return out
