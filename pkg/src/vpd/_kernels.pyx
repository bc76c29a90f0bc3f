# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-step kernels; mirrors ``vpd._kernels_py`` exactly in API."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

REVERSE_KL = 0
FORWARD_KL = 1
JS = 2


cdef double _lse(const double[::1] z) noexcept nogil:
    cdef Py_ssize_t i, n = z.shape[0]
    cdef double m = z[0], s = 0.0
    for i in range(1, n):
        if z[i] > m:
            m = z[i]
    for i in range(n):
        s += exp(z[i] - m)
    return m + log(s)


cdef inline const double[::1] _as_view(object a):
    return np.ascontiguousarray(a, dtype=np.float64)


def logsumexp(z):
    return _lse(_as_view(z))


def log_softmax(z):
    cdef const double[::1] zv = _as_view(z)
    cdef Py_ssize_t i, n = zv.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double c = _lse(zv)
    for i in range(n):
        o[i] = zv[i] - c
    return out


def softmax(z):
    cdef const double[::1] zv = _as_view(z)
    cdef Py_ssize_t i, n = zv.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double m = zv[0], s = 0.0
    for i in range(1, n):
        if zv[i] > m:
            m = zv[i]
    for i in range(n):
        o[i] = exp(zv[i] - m)
        s += o[i]
    for i in range(n):
        o[i] /= s
    return out


cdef double _kl(const double[::1] p, const double[::1] q) except? -1.0:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double s = 0.0
    for i in range(n):
        if p[i] > 0.0:
            if q[i] <= 0.0:
                raise ValueError("KL undefined: q has zero mass where p is positive")
            s += p[i] * (log(p[i]) - log(q[i]))
    return s


def token_divergence(p, q, int kind):
    cdef const double[::1] pv = _as_view(p)
    cdef const double[::1] qv = _as_view(q)
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double[::1] m
    if kind == 0:
        return _kl(pv, qv)
    if kind == 1:
        return _kl(qv, pv)
    if kind == 2:
        m = np.empty(n, dtype=np.float64)
        for i in range(n):
            m[i] = 0.5 * (pv[i] + qv[i])
        return 0.5 * _kl(pv, m) + 0.5 * _kl(qv, m)
    raise ValueError(f"unknown divergence kind {kind}")


def divergence_logit_grad(z, q, int kind):
    cdef const double[::1] zv = _as_view(z)
    cdef const double[::1] qv = _as_view(q)
    cdef Py_ssize_t i, n = zv.shape[0]
    cdef double c = _lse(zv), val = 0.0, mean_g = 0.0, lp, pi, mi, lm
    grad = np.empty(n, dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double[::1] g = np.empty(n, dtype=np.float64)
    cdef double[::1] p = np.empty(n, dtype=np.float64)
    for i in range(n):
        p[i] = exp(zv[i] - c)
    if kind == 0:
        for i in range(n):
            g[i] = (zv[i] - c) - log(qv[i])
            val += p[i] * g[i]
        for i in range(n):
            gv[i] = p[i] * (g[i] - val)
        return val, grad
    if kind == 1:
        for i in range(n):
            val += qv[i] * (log(qv[i]) - (zv[i] - c))
            gv[i] = p[i] - qv[i]
        return val, grad
    if kind == 2:
        for i in range(n):
            lp = zv[i] - c
            mi = 0.5 * (p[i] + qv[i])
            lm = log(mi)
            val += 0.5 * p[i] * (lp - lm) + 0.5 * qv[i] * (log(qv[i]) - lm)
            g[i] = 0.5 * (lp - lm)
            mean_g += p[i] * g[i]
        for i in range(n):
            gv[i] = p[i] * (g[i] - mean_g)
        return val, grad
    raise ValueError(f"unknown divergence kind {kind}")


def sample_index(p, double u):
    cdef const double[::1] pv = _as_view(p)
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double total = 0.0, acc = 0.0, target
    for i in range(n):
        total += pv[i]
    target = u * total
    for i in range(n):
        acc += pv[i]
        if target < acc:
            return i
    return n - 1
