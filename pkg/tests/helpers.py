"""Independent reference implementations used as test oracles."""

import numpy as np


def naive_conv(x, w, b, stride=1, padding=0):
    """Direct six-loop convolution of one (C, H, W) input."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * x[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def naive_maxpool(x, k, s):
    c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ch, i, j] = max(x[ch, i * s + a, j * s + b] for a in range(k) for b in range(k))
    return out


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))
