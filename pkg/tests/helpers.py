"""Shared numerical oracles for the test-suite."""

import numpy as np

FD_STEP = 1e-5


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def naive_conv2d(x, k, b, stride=1, padding=0):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for s in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[s, ch, i * stride + u, j * stride + v] * k[o, ch, u, v]
                    out[s, o, i, j] = acc
    return out


def naive_maxpool(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    arg = np.zeros((n, c, ho, wo), dtype=int)
    for s in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, bi = -np.inf, 0
                    for t in range(window * window):
                        u, v = divmod(t, window)
                        val = x[s, ch, i * stride + u, j * stride + v]
                        if val > best:
                            best, bi = val, t
                    out[s, ch, i, j] = best
                    arg[s, ch, i, j] = bi
    return out, arg


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
