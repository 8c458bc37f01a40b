# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused single-pass kernels for the hot per-iteration loops.

Each function mirrors a numpy_backend counterpart; backward kernels
accumulate into a caller-owned buffer.  Supports float32 and float64.
"""

from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, tanh as c_tanh

ctypedef fused real:
    float
    double


def row_softmax(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef real mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0
        for j in range(m):
            out[i, j] = <real>c_exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(m):
            out[i, j] /= s


def row_softmax_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef real dot
    for i in range(n):
        dot = 0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            acc[i, j] += y[i, j] * (gy[i, j] - dot)


def row_normalize(real[:, ::1] x, real[:, ::1] out, real[::1] norms):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef real s
    for i in range(n):
        s = 0
        for j in range(m):
            s += x[i, j] * x[i, j]
        s = <real>c_sqrt(s)
        norms[i] = s
        if s == 0:
            for j in range(m):
                out[i, j] = 0
        else:
            for j in range(m):
                out[i, j] = x[i, j] / s


def row_normalize_bwd(real[:, ::1] y, real[::1] norms, real[:, ::1] gy,
                      real[:, ::1] acc):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef real dot
    for i in range(n):
        if norms[i] == 0:
            continue
        dot = 0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            acc[i, j] += (gy[i, j] - y[i, j] * dot) / norms[i]


def sigmoid(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef real e
    for i in range(n):
        for j in range(m):
            if x[i, j] >= 0:
                out[i, j] = <real>(1.0 / (1.0 + c_exp(-x[i, j])))
            else:
                e = <real>c_exp(x[i, j])
                out[i, j] = <real>(e / (1.0 + e))


def sigmoid_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    for i in range(n):
        for j in range(m):
            acc[i, j] += gy[i, j] * y[i, j] * (1 - y[i, j])


def tanh(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = <real>c_tanh(x[i, j])


def tanh_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    for i in range(n):
        for j in range(m):
            acc[i, j] += gy[i, j] * (1 - y[i, j] * y[i, j])


def relu(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = x[i, j] if x[i, j] > 0 else 0


def relu_bwd(real[:, ::1] x, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            if x[i, j] > 0:
                acc[i, j] += gy[i, j]


def exp(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = <real>c_exp(x[i, j])


def exp_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    for i in range(n):
        for j in range(m):
            acc[i, j] += gy[i, j] * y[i, j]


def log(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = <real>c_log(x[i, j])


def log_bwd(real[:, ::1] x, real[:, ::1] gy, real[:, ::1] acc):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    for i in range(n):
        for j in range(m):
            acc[i, j] += gy[i, j] / x[i, j]


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bias1, double bias2):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double mhat, vhat
    for i in range(n):
        m[i] = <real>(beta1 * m[i] + (1.0 - beta1) * grad[i])
        v[i] = <real>(beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i])
        mhat = m[i] / bias1
        vhat = v[i] / bias2
        param[i] -= <real>(lr * mhat / (c_sqrt(vhat) + eps))
