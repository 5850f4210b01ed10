"""Vectorized NumPy implementation of the hot kernels.

Operates on particle/scenario batches: states X (K,8), sensitivities
XI (K,8,8), per-row parameters TH (K,8). `params` is the flat constant
vector packed by `pack_params` in the package __init__:

    [delta, eps, beta, k_absorb, k_elim_plasma, k_elim_metab,
     k3, k4, k5, k6, k_death, kappa_vol, dose_to_gut]
"""

import numpy as np


def _sigmoid(d):
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _drift(X, U, TH, params, want_jac):
    (delta, eps, beta, ka, ke, kg, k3, k4, k5, k6, kd, kvol, b0) = params
    K = X.shape[0]
    x0, x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    x4, x5, x6, x7 = X[:, 4], X[:, 5], X[:, 6], X[:, 7]
    th0, th1, th2 = TH[:, 0], TH[:, 1], TH[:, 2]
    th3, th4, th5, th6 = TH[:, 3], TH[:, 4], TH[:, 5], TH[:, 6]

    conv = -th0 * x1 / (th1 + x1)
    s = (x7 / th4) ** th3
    one_s = 1.0 + s
    gain = th2 / one_s
    drug = th5 * x2 / (th6 + x2)

    fb = np.empty_like(X)
    fb[:, 0] = -ka * x0 + b0 * U
    fb[:, 1] = ka * x0 - ke * x1 + conv
    fb[:, 2] = -kg * x2 - conv
    fb[:, 3] = (gain - drug - k3) * x3
    fb[:, 4] = k3 * x3 - k4 * x4
    fb[:, 5] = k4 * x4 - k5 * x5
    fb[:, 6] = k5 * x5 - k6 * x6
    fb[:, 7] = kvol * k6 * x6 - kd * x7
    if not want_jac:
        return fb, None, None

    jx = np.zeros((K, 8, 8))
    dconv = -th0 * th1 / (th1 + x1) ** 2
    jx[:, 0, 0] = -ka
    jx[:, 1, 0] = ka
    jx[:, 1, 1] = -ke + dconv
    jx[:, 2, 1] = -dconv
    jx[:, 2, 2] = -kg
    jx[:, 3, 2] = -x3 * th5 * th6 / (th6 + x2) ** 2
    jx[:, 3, 3] = gain - drug - k3
    jx[:, 3, 7] = -x3 * th2 * th3 * s / (x7 * one_s**2)
    jx[:, 4, 3] = k3
    jx[:, 4, 4] = -k4
    jx[:, 5, 4] = k4
    jx[:, 5, 5] = -k5
    jx[:, 6, 5] = k5
    jx[:, 6, 6] = -k6
    jx[:, 7, 6] = kvol * k6
    jx[:, 7, 7] = -kd

    jth = np.zeros((K, 8, 8))
    mm = x1 / (th1 + x1)
    jth[:, 1, 0] = -mm
    jth[:, 2, 0] = mm
    dkm = th0 * x1 / (th1 + x1) ** 2
    jth[:, 1, 1] = dkm
    jth[:, 2, 1] = -dkm
    jth[:, 3, 2] = x3 / one_s
    jth[:, 3, 3] = -x3 * th2 * s * np.log(x7 / th4) / one_s**2
    jth[:, 3, 4] = x3 * th2 * th3 * s / (th4 * one_s**2)
    jth[:, 3, 5] = -x3 * x2 / (th6 + x2)
    jth[:, 3, 6] = x3 * th5 * x2 / (th6 + x2) ** 2
    return fb, jx, jth


def step_batch(X, U, D, TH, params):
    delta, eps, beta = params[0], params[1], params[2]
    fb, _, _ = _drift(X, U, TH, params, want_jac=False)
    z = X + delta * fb + D
    hi = np.maximum(z, eps)
    lo = np.minimum(z, eps)
    return hi + np.log1p(np.exp(beta * (lo - hi))) / beta


def step_sens_batch(X, XI, U, D, TH, params):
    delta, eps, beta = params[0], params[1], params[2]
    fb, jx, jth = _drift(X, U, TH, params, want_jac=True)
    z = X + delta * fb + D
    hi = np.maximum(z, eps)
    lo = np.minimum(z, eps)
    x_new = hi + np.log1p(np.exp(beta * (lo - hi))) / beta
    slope = _sigmoid(beta * (z - eps))
    full_jx = slope[:, :, None] * (np.eye(8)[None, :, :] + delta * jx)
    full_jth = slope[:, :, None] * (delta * jth)
    xi_new = np.matmul(full_jx, XI) + full_jth
    return x_new, xi_new
