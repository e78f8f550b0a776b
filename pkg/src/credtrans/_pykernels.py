"""NumPy reference kernels (fallback for ``_ckernels``).

All functions take 2-D C-contiguous float64 arrays and reduce over the last
axis unless stated otherwise.
"""

import numpy as np
from scipy.special import erfc

_INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(x):
    y = np.exp(x - x.max(axis=1, keepdims=True))
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def layer_norm_backward(g, xhat, rstd, gamma):
    d = g.shape[1]
    gh = g * gamma
    s1 = gh.sum(axis=1, keepdims=True)
    s2 = (gh * xhat).sum(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - (s1 + xhat * s2) / d)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_forward(x):
    return 0.5 * x * erfc(-x * np.sqrt(0.5))


def gelu_backward(x, g):
    cdf = 0.5 * erfc(-x * np.sqrt(0.5))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def ple_forward(x, bounds):
    lo = bounds[:-1]
    hi = bounds[1:]
    width = hi - lo
    xc = x[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (xc - lo) / width
    e = np.where(xc >= hi, 1.0, np.where(xc < lo, 0.0, inner))
    return np.ascontiguousarray(e)


def ple_backward(x, bounds, g):
    lo = bounds[:-1]
    hi = bounds[1:]
    width = hi - lo
    xc = x[:, None]
    inside = (xc >= lo) & (xc < hi)
    safe = np.where(width > 0, width, 1.0)
    e = np.where(inside, (xc - lo) / safe, 0.0)
    gi = np.where(inside, g / safe, 0.0)
    gx = gi.sum(axis=1)
    gb = np.zeros(bounds.shape[0])
    gb[:-1] -= (gi * (1.0 - e)).sum(axis=0)
    gb[1:] -= (gi * e).sum(axis=0)
    return gx, gb
