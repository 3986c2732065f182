"""Compiled kernels for one-hidden-layer tanh networks with a scalar output.

Same parameter layout as :mod:`idm.models`: the hidden block
``(p_x + 1, h)`` row-major (bias row first), then the output block
``(h + 1, 1)``. Rows are accumulated sequentially in index order.
"""
import math

import numpy as np
from numba import njit

# family codes
GAUSSIAN_KNOWN_VAR = 0
GAUSSIAN_SSE = 1
BERNOULLI_LOGIT = 2

CODES = {"gaussian_known_var": GAUSSIAN_KNOWN_VAR, "gaussian_sse": GAUSSIAN_SSE, "bernoulli_logit": BERNOULLI_LOGIT}

_LOG2PI = math.log(2.0 * math.pi)


@njit(cache=True, nogil=True)
def value_and_grad(theta, x, y, h, code, sigma2):
    n, p = x.shape
    d1 = (p + 1) * h
    grad = np.zeros(theta.shape[0])
    a = np.empty(h)
    val = 0.0
    for i in range(n):
        for k in range(h):
            z = theta[k]
            for j in range(p):
                z += x[i, j] * theta[(j + 1) * h + k]
            a[k] = math.tanh(z)
        out = theta[d1]
        for k in range(h):
            out += a[k] * theta[d1 + 1 + k]
        yi = y[i]
        if code == 0:
            r = yi - out
            val += -0.5 * (_LOG2PI + math.log(sigma2)) - 0.5 * r * r / sigma2
            dl = r / sigma2
        elif code == 1:
            r = yi - out
            val += -0.5 * r * r
            dl = r
        else:
            if out > 0:
                sp = out + math.log1p(math.exp(-out))
            else:
                sp = math.log1p(math.exp(out))
            val += yi * out - sp
            dl = yi - 0.5 * (1.0 + math.tanh(0.5 * out))
        grad[d1] += dl
        for k in range(h):
            w = theta[d1 + 1 + k]
            grad[d1 + 1 + k] += dl * a[k]
            dz = dl * w * (1.0 - a[k] * a[k])
            grad[k] += dz
            for j in range(p):
                grad[(j + 1) * h + k] += dz * x[i, j]
    return val, grad


@njit(cache=True, nogil=True)
def forward(theta, x, h):
    n, p = x.shape
    d1 = (p + 1) * h
    out = np.empty(n)
    for i in range(n):
        o = theta[d1]
        for k in range(h):
            z = theta[k]
            for j in range(p):
                z += x[i, j] * theta[(j + 1) * h + k]
            o += math.tanh(z) * theta[d1 + 1 + k]
        out[i] = o
    return out


@njit(cache=True, nogil=True)
def jacobian(theta, x, h):
    """Rows ``d out_i / d theta``."""
    n, p = x.shape
    d1 = (p + 1) * h
    jac = np.zeros((n, theta.shape[0]))
    for i in range(n):
        jac[i, d1] = 1.0
        for k in range(h):
            z = theta[k]
            for j in range(p):
                z += x[i, j] * theta[(j + 1) * h + k]
            a = math.tanh(z)
            jac[i, d1 + 1 + k] = a
            dz = theta[d1 + 1 + k] * (1.0 - a * a)
            jac[i, k] = dz
            for j in range(p):
                jac[i, (j + 1) * h + k] = dz * x[i, j]
    return jac
