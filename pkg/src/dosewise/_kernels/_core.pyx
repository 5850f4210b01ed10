# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of reference.py: per-row C loops over the particle batch.

Keep the arithmetic in the same order as the NumPy reference so the two
backends agree to a few ulps.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, pow

cnp.import_array()


cdef inline double _floor_smooth(double z, double eps, double beta) noexcept nogil:
    cdef double hi = z if z > eps else eps
    cdef double lo = z if z < eps else eps
    return hi + log1p(exp(beta * (lo - hi))) / beta


cdef inline double _floor_slope(double z, double eps, double beta) noexcept nogil:
    cdef double d = beta * (z - eps)
    cdef double e
    if d >= 0.0:
        return 1.0 / (1.0 + exp(-d))
    e = exp(d)
    return e / (1.0 + e)


def step_batch(const double[:, ::1] X, const double[::1] U, const double[:, ::1] D,
               const double[:, ::1] TH, const double[::1] params):
    cdef Py_ssize_t K = X.shape[0]
    cdef double delta = params[0], eps = params[1], beta = params[2]
    cdef double ka = params[3], ke = params[4], kg = params[5]
    cdef double k3 = params[6], k4 = params[7], k5 = params[8], k6 = params[9]
    cdef double kd = params[10], kvol = params[11], b0 = params[12]
    out_arr = np.empty((K, 8), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i
    cdef double x0, x1, x2, x3, x4, x5, x6, x7
    cdef double th0, th1, th2, th3, th4, th5, th6
    cdef double conv, s, gain, drug
    cdef double fb[8]
    cdef double z
    with nogil:
        for k in range(K):
            x0 = X[k, 0]; x1 = X[k, 1]; x2 = X[k, 2]; x3 = X[k, 3]
            x4 = X[k, 4]; x5 = X[k, 5]; x6 = X[k, 6]; x7 = X[k, 7]
            th0 = TH[k, 0]; th1 = TH[k, 1]; th2 = TH[k, 2]; th3 = TH[k, 3]
            th4 = TH[k, 4]; th5 = TH[k, 5]; th6 = TH[k, 6]
            conv = -th0 * x1 / (th1 + x1)
            s = pow(x7 / th4, th3)
            gain = th2 / (1.0 + s)
            drug = th5 * x2 / (th6 + x2)
            fb[0] = -ka * x0 + b0 * U[k]
            fb[1] = ka * x0 - ke * x1 + conv
            fb[2] = -kg * x2 - conv
            fb[3] = (gain - drug - k3) * x3
            fb[4] = k3 * x3 - k4 * x4
            fb[5] = k4 * x4 - k5 * x5
            fb[6] = k5 * x5 - k6 * x6
            fb[7] = kvol * k6 * x6 - kd * x7
            for i in range(8):
                z = X[k, i] + delta * fb[i] + D[k, i]
                out[k, i] = _floor_smooth(z, eps, beta)
    return out_arr


def step_sens_batch(const double[:, ::1] X, const double[:, :, ::1] XI, const double[::1] U,
                    const double[:, ::1] D, const double[:, ::1] TH, const double[::1] params):
    cdef Py_ssize_t K = X.shape[0]
    cdef double delta = params[0], eps = params[1], beta = params[2]
    cdef double ka = params[3], ke = params[4], kg = params[5]
    cdef double k3 = params[6], k4 = params[7], k5 = params[8], k6 = params[9]
    cdef double kd = params[10], kvol = params[11], b0 = params[12]
    x_arr = np.empty((K, 8), dtype=np.float64)
    xi_arr = np.empty((K, 8, 8), dtype=np.float64)
    cdef double[:, ::1] xout = x_arr
    cdef double[:, :, ::1] xiout = xi_arr
    cdef Py_ssize_t k, i, j
    cdef double x0, x1, x2, x3, x4, x5, x6, x7
    cdef double th0, th1, th2, th3, th4, th5, th6
    cdef double conv, s, one_s, gain, drug, dconv, dkm, mm, lg
    cdef double j32, j33, j37
    cdef double g2, g3, g4, g5, g6   # drift dtheta row-3 entries, cols 2..6
    cdef double fb[8]
    cdef double sl[8]
    cdef double z
    cdef double v0, v1, v2, v3, v4, v5, v6, v7
    with nogil:
        for k in range(K):
            x0 = X[k, 0]; x1 = X[k, 1]; x2 = X[k, 2]; x3 = X[k, 3]
            x4 = X[k, 4]; x5 = X[k, 5]; x6 = X[k, 6]; x7 = X[k, 7]
            th0 = TH[k, 0]; th1 = TH[k, 1]; th2 = TH[k, 2]; th3 = TH[k, 3]
            th4 = TH[k, 4]; th5 = TH[k, 5]; th6 = TH[k, 6]
            conv = -th0 * x1 / (th1 + x1)
            s = pow(x7 / th4, th3)
            one_s = 1.0 + s
            gain = th2 / one_s
            drug = th5 * x2 / (th6 + x2)
            fb[0] = -ka * x0 + b0 * U[k]
            fb[1] = ka * x0 - ke * x1 + conv
            fb[2] = -kg * x2 - conv
            fb[3] = (gain - drug - k3) * x3
            fb[4] = k3 * x3 - k4 * x4
            fb[5] = k4 * x4 - k5 * x5
            fb[6] = k5 * x5 - k6 * x6
            fb[7] = kvol * k6 * x6 - kd * x7
            for i in range(8):
                z = X[k, i] + delta * fb[i] + D[k, i]
                xout[k, i] = _floor_smooth(z, eps, beta)
                sl[i] = _floor_slope(z, eps, beta)

            dconv = -th0 * th1 / ((th1 + x1) * (th1 + x1))
            j32 = -x3 * th5 * th6 / ((th6 + x2) * (th6 + x2))
            j33 = gain - drug - k3
            j37 = -x3 * th2 * th3 * s / (x7 * one_s * one_s)
            mm = x1 / (th1 + x1)
            dkm = th0 * x1 / ((th1 + x1) * (th1 + x1))
            lg = log(x7 / th4)
            g2 = x3 / one_s
            g3 = -x3 * th2 * s * lg / (one_s * one_s)
            g4 = x3 * th2 * th3 * s / (th4 * one_s * one_s)
            g5 = -x3 * x2 / (th6 + x2)
            g6 = x3 * th5 * x2 / ((th6 + x2) * (th6 + x2))

            for j in range(8):
                v0 = XI[k, 0, j]; v1 = XI[k, 1, j]; v2 = XI[k, 2, j]
                v3 = XI[k, 3, j]; v4 = XI[k, 4, j]; v5 = XI[k, 5, j]
                v6 = XI[k, 6, j]; v7 = XI[k, 7, j]
                xiout[k, 0, j] = sl[0] * (v0 + delta * (-ka * v0))
                xiout[k, 1, j] = sl[1] * (v1 + delta * (ka * v0 + (dconv - ke) * v1
                                 + (-mm if j == 0 else (dkm if j == 1 else 0.0))))
                xiout[k, 2, j] = sl[2] * (v2 + delta * (-dconv * v1 - kg * v2
                                 + (mm if j == 0 else (-dkm if j == 1 else 0.0))))
                xiout[k, 3, j] = sl[3] * (v3 + delta * (j32 * v2 + j33 * v3 + j37 * v7
                                 + (g2 if j == 2 else (g3 if j == 3 else (g4 if j == 4
                                 else (g5 if j == 5 else (g6 if j == 6 else 0.0)))))))
                xiout[k, 4, j] = sl[4] * (v4 + delta * (k3 * v3 - k4 * v4))
                xiout[k, 5, j] = sl[5] * (v5 + delta * (k4 * v4 - k5 * v5))
                xiout[k, 6, j] = sl[6] * (v6 + delta * (k5 * v5 - k6 * v6))
                xiout[k, 7, j] = sl[7] * (v7 + delta * (kvol * k6 * v6 - kd * v7))
    return x_arr, xi_arr
