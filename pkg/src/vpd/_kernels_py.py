"""Pure NumPy implementations of the per-step numeric kernels.

Used when the compiled ``vpd._kernels`` extension is unavailable or when
``VPD_PURE_PYTHON=1`` is set.  Every function here has a byte-compatible
signature in ``_kernels.pyx``.
"""
import numpy as np

REVERSE_KL = 0
FORWARD_KL = 1
JS = 2


def logsumexp(z):
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    return z - logsumexp(z)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def token_divergence(p, q, kind):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if kind == REVERSE_KL:
        return _kl(p, q)
    if kind == FORWARD_KL:
        return _kl(q, p)
    if kind == JS:
        m = 0.5 * (p + q)
        return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    raise ValueError(f"unknown divergence kind {kind}")


def _kl(p, q):
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def divergence_logit_grad(z, q, kind):
    """Divergence between softmax(z) and fixed q, and its gradient in z."""
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    logp = log_softmax(z)
    p = np.exp(logp)
    if kind == REVERSE_KL:
        g = logp - np.log(q)
        val = float(np.sum(p * g))
        return val, p * (g - val)
    if kind == FORWARD_KL:
        val = float(np.sum(q * (np.log(q) - logp)))
        return val, p - q
    if kind == JS:
        m = 0.5 * (p + q)
        logm = np.log(m)
        val = 0.5 * float(np.sum(p * (logp - logm))) + 0.5 * float(np.sum(q * (np.log(q) - logm)))
        g = 0.5 * (logp - logm)
        return val, p * (g - np.sum(p * g))
    raise ValueError(f"unknown divergence kind {kind}")


def sample_index(p, u):
    """Inverse-CDF draw of one index from p given a uniform variate u."""
    c = np.cumsum(p)
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(i, len(p) - 1)
