"""Pure-numpy reference kernels.

These are the fallback implementations of the hot elementwise/rowwise
kernels used by the graph engine (GELU, softmax, layer norm). The compiled
extension in ``_native.pyx`` implements the same contracts with fused
single-pass loops; either backend must satisfy the same numerical tests.

All rowwise kernels take a C-contiguous 2-D array and reduce over the last
axis. Callers are responsible for reshaping.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

BACKEND_NAME = "python"


def gelu_fwd(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, gy):
    x2 = x * x
    u = GELU_C * (x + GELU_A * x * x2)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(p, gy):
    dot = np.sum(gy * p, axis=-1, keepdims=True)
    return p * (gy - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mean = np.mean(x, axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd * gamma + beta
    return y, mean[..., 0], rstd[..., 0]


def layernorm_bwd(x, gamma, mean, rstd, gy):
    xhat = (x - mean[..., None]) * rstd[..., None]
    dgamma = np.sum(gy * xhat, axis=0)
    dbeta = np.sum(gy, axis=0)
    dxhat = gy * gamma
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd[..., None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta
