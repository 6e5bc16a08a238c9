# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the synthetic task models.

Same signatures and weight layouts as the numpy reference backend; fuses the
per-sample softmax/backprop loops so small mini-batches avoid per-op numpy
overhead. Results agree with the reference to float rounding (summation
order differs), not bit-for-bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, tanh

cnp.import_array()

BACKEND = "compiled"


cdef double _linear_accumulate(const double[::1] w, const double[:, ::1] X,
                               const cnp.int64_t[::1] idx, Py_ssize_t start,
                               Py_ssize_t count, const cnp.int64_t[::1] y,
                               Py_ssize_t C, double[::1] grad,
                               double[::1] z) noexcept nogil:
    """Sum of per-sample CE losses and unnormalized grad over idx[start:start+count]."""
    cdef Py_ssize_t s = X.shape[1]
    cdef Py_ssize_t k, b, c, j, yb
    cdef double acc, zmax, denom, loss, g, zy
    loss = 0.0
    for k in range(count):
        b = idx[start + k]
        yb = y[b]
        zmax = -1e300
        for c in range(C):
            acc = w[C * s + c]
            for j in range(s):
                acc += w[c * s + j] * X[b, j]
            z[c] = acc
            if acc > zmax:
                zmax = acc
        zy = z[yb] - zmax
        denom = 0.0
        for c in range(C):
            z[c] = exp(z[c] - zmax)
            denom += z[c]
        loss += log(denom) - zy
        for c in range(C):
            g = z[c] / denom
            if c == yb:
                g -= 1.0
            grad[C * s + c] += g
            for j in range(s):
                grad[c * s + j] += g * X[b, j]
    return loss


cdef double _mlp_accumulate(const double[::1] w, const double[:, ::1] X,
                            const cnp.int64_t[::1] idx, Py_ssize_t start,
                            Py_ssize_t count, const cnp.int64_t[::1] y,
                            Py_ssize_t C, Py_ssize_t H, double[::1] grad,
                            double[::1] h1, double[::1] z) noexcept nogil:
    cdef Py_ssize_t s = X.shape[1]
    cdef Py_ssize_t o1 = H * s
    cdef Py_ssize_t o2 = o1 + H
    cdef Py_ssize_t o3 = o2 + C * H
    cdef Py_ssize_t k, b, c, j, yb, h
    cdef double acc, zmax, denom, loss, g, dh, zy
    loss = 0.0
    for k in range(count):
        b = idx[start + k]
        yb = y[b]
        for h in range(H):
            acc = w[o1 + h]
            for j in range(s):
                acc += w[h * s + j] * X[b, j]
            h1[h] = tanh(acc)
        zmax = -1e300
        for c in range(C):
            acc = w[o3 + c]
            for h in range(H):
                acc += w[o2 + c * H + h] * h1[h]
            z[c] = acc
            if acc > zmax:
                zmax = acc
        zy = z[yb] - zmax
        denom = 0.0
        for c in range(C):
            z[c] = exp(z[c] - zmax)
            denom += z[c]
        loss += log(denom) - zy
        for c in range(C):
            z[c] = z[c] / denom
            if c == yb:
                z[c] -= 1.0
            grad[o3 + c] += z[c]
        for h in range(H):
            dh = 0.0
            for c in range(C):
                grad[o2 + c * H + h] += z[c] * h1[h]
                dh += z[c] * w[o2 + c * H + h]
            dh *= 1.0 - h1[h] * h1[h]
            grad[o1 + h] += dh
            for j in range(s):
                grad[h * s + j] += dh * X[b, j]
    return loss


def linear_loss_grad(w, X, y, n_classes):
    cdef cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t n = X.shape[0]
    cdef cnp.int64_t[::1] idx = np.arange(n, dtype=np.int64)
    grad = np.zeros_like(w)
    z = np.empty(n_classes, dtype=np.float64)
    cdef double loss = _linear_accumulate(w, X, idx, 0, n, yv, n_classes, grad, z)
    grad /= n
    return loss / n, grad


def mlp_loss_grad(w, X, y, n_classes, hidden):
    cdef cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t n = X.shape[0]
    cdef cnp.int64_t[::1] idx = np.arange(n, dtype=np.int64)
    grad = np.zeros_like(w)
    h1 = np.empty(hidden, dtype=np.float64)
    z = np.empty(n_classes, dtype=np.float64)
    cdef double loss = _mlp_accumulate(w, X, idx, 0, n, yv, n_classes, hidden,
                                       grad, h1, z)
    grad /= n
    return loss / n, grad


def linear_sgd_epoch(w, X, y, n_classes, eta, order, batch_size):
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(order, dtype=np.int64)
    cdef cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    w_out = w.copy()
    cdef double[::1] wv = w_out
    cdef double[:, ::1] Xv = X
    grad_arr = np.zeros_like(w_out)
    cdef double[::1] grad = grad_arr
    z = np.empty(n_classes, dtype=np.float64)
    cdef double[::1] zv = z
    cdef Py_ssize_t C = n_classes
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t dim = wv.shape[0]
    cdef Py_ssize_t start, count, i
    cdef Py_ssize_t B = batch_size
    cdef double lr = eta
    cdef double scale
    with nogil:
        start = 0
        while start < n:
            count = B if start + B <= n else n - start
            for i in range(dim):
                grad[i] = 0.0
            _linear_accumulate(wv, Xv, idx, start, count, yv, C, grad, zv)
            scale = lr / count
            for i in range(dim):
                wv[i] -= scale * grad[i]
            start += count
    return w_out


def mlp_sgd_epoch(w, X, y, n_classes, hidden, eta, order, batch_size):
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(order, dtype=np.int64)
    cdef cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    w_out = w.copy()
    cdef double[::1] wv = w_out
    cdef double[:, ::1] Xv = X
    grad_arr = np.zeros_like(w_out)
    cdef double[::1] grad = grad_arr
    h1 = np.empty(hidden, dtype=np.float64)
    z = np.empty(n_classes, dtype=np.float64)
    cdef double[::1] h1v = h1
    cdef double[::1] zv = z
    cdef Py_ssize_t C = n_classes
    cdef Py_ssize_t H = hidden
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t dim = wv.shape[0]
    cdef Py_ssize_t start, count, i
    cdef Py_ssize_t B = batch_size
    cdef double lr = eta
    cdef double scale
    with nogil:
        start = 0
        while start < n:
            count = B if start + B <= n else n - start
            for i in range(dim):
                grad[i] = 0.0
            _mlp_accumulate(wv, Xv, idx, start, count, yv, C, H,
                            grad, h1v, zv)
            scale = lr / count
            for i in range(dim):
                wv[i] -= scale * grad[i]
            start += count
    return w_out
