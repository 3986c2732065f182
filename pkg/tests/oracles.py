"""Independent reference computations used by the tests.

Nothing here imports the estimators under test; model-specific pieces are
written out directly from their textbook definitions.
"""
import math

import numpy as np


def design(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.hstack([np.ones((x.shape[0], 1)), x])


def ols(x, y):
    """Least-squares coefficients via the normal equations."""
    x1 = design(x)
    return np.linalg.solve(x1.T @ x1, x1.T @ np.asarray(y, dtype=float))


def linear_prediction_cov(x, points, sigma2):
    """``sigma2 * P (X1'X1)^{-1} P'`` for prediction rows ``P = [1, points]``."""
    x1 = design(x)
    p1 = design(points)
    return sigma2 * p1 @ np.linalg.solve(x1.T @ x1, p1.T)


def irls_logistic(x, y, iters=100, tol=1e-13):
    """Newton / iteratively reweighted least squares for logistic regression."""
    x1 = design(x)
    beta = np.zeros(x1.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x1 @ beta)))
        w = p * (1 - p)
        step = np.linalg.solve((x1.T * w) @ x1, x1.T @ (y - p))
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def logistic_info(x, beta):
    x1 = design(x)
    p = 1.0 / (1.0 + np.exp(-(x1 @ beta)))
    return (x1.T * (p * (1 - p))) @ x1


def central_diff_grad(f, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for j in range(theta.shape[0]):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += step
        tm[j] -= step
        g[j] = (f(tp) - f(tm)) / (2 * step)
    return g


def tanh_mlp_1x2(theta, x):
    """Hand-written forward pass of a 1-input, 2-hidden-unit, 1-output tanh net.

    Layout: hidden bias (2), hidden weights (2), output bias, output weights (2).
    """
    b1 = theta[0:2]
    w1 = theta[2:4]
    b2 = theta[4]
    w2 = theta[5:7]
    hidden = [math.tanh(b1[k] + w1[k] * x) for k in range(2)]
    return b2 + w2[0] * hidden[0] + w2[1] * hidden[1]


def splitmix64_reference(seed, count):
    """Textbook sequential splitmix64 (state += golden; mix)."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out
