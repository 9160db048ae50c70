"""Independent brute-force reference implementations used as test oracles.

Everything here is nested-loop scalar code, deliberately sharing nothing
with the library's vectorized paths.
"""

import math

import numpy as np


def pad_index(i, n, padding):
    if padding == "replicate":
        return min(max(i, 0), n - 1)
    return i % n  # circular


def conv_depthwise_ref(x, kernels, padding):
    c, H, W = x.shape
    k = kernels.shape[1]
    p = k // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for y in range(H):
            for xx in range(W):
                acc = 0.0
                for dy in range(k):
                    for dx in range(k):
                        sy = pad_index(y + dy - p, H, padding)
                        sx = pad_index(xx + dx - p, W, padding)
                        acc += kernels[ch, dy, dx] * x[ch, sy, sx]
                out[ch, y, xx] = acc
    return out


def conv_dense_ref(x, kernels, padding, bias=None):
    ci, H, W = x.shape
    co, _, k, _ = kernels.shape
    p = k // 2
    out = np.zeros((co, H, W), dtype=x.dtype)
    for o in range(co):
        for y in range(H):
            for xx in range(W):
                acc = 0.0 if bias is None else float(bias[o])
                for i in range(ci):
                    for dy in range(k):
                        for dx in range(k):
                            sy = pad_index(y + dy - p, H, padding)
                            sx = pad_index(xx + dx - p, W, padding)
                            acc += kernels[o, i, dy, dx] * x[i, sy, sx]
                out[o, y, xx] = acc
    return out


def pool_ref(x, kind, k=None):
    c, H, W = x.shape
    if kind == "global-avg":
        return np.array([x[ch].sum() / (H * W) for ch in range(c)], dtype=x.dtype)
    if kind == "global-max":
        return np.array([x[ch].max() for ch in range(c)], dtype=x.dtype)
    if kind == "channel-avg":
        out = np.zeros((1, H, W), dtype=x.dtype)
        for y in range(H):
            for xx in range(W):
                out[0, y, xx] = sum(x[ch, y, xx] for ch in range(c)) / c
        return out
    if kind == "channel-max":
        out = np.zeros((1, H, W), dtype=x.dtype)
        for y in range(H):
            for xx in range(W):
                out[0, y, xx] = max(x[ch, y, xx] for ch in range(c))
        return out
    if kind == "spatial-avg":
        out = np.zeros((c, H // k, W // k), dtype=x.dtype)
        for ch in range(c):
            for y in range(H // k):
                for xx in range(W // k):
                    acc = 0.0
                    for dy in range(k):
                        for dx in range(k):
                            acc += x[ch, y * k + dy, xx * k + dx]
                    out[ch, y, xx] = acc / (k * k)
        return out
    raise ValueError(kind)


def central_diff(f, x, step=1e-5):
    """Gradient of scalar f w.r.t. flat array x by central differences."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def schedule_ref(T, beta_start, beta_end):
    betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)] \
        if T > 1 else [beta_start]
    abar = []
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
        abar.append(prod)
    return betas, abar


def p_step_scalar(x, t, eps_hat, z, betas, abar):
    """Scalar re-implementation of the reverse transition (t is 1-based)."""
    beta = betas[t - 1]
    alpha = 1.0 - beta
    ab = abar[t - 1]
    mean = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    return mean + math.sqrt(beta) * z
