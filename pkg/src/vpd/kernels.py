"""Kernel backend selection.

The compiled extension is preferred; set ``VPD_PURE_PYTHON=1`` to force the
NumPy fallback (the benchmark and the parity tests use both explicitly).
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VPD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None

DIVERGENCE_KINDS = {
    "reverse-kl": _kernels_py.REVERSE_KL,
    "forward-kl": _kernels_py.FORWARD_KL,
    "js": _kernels_py.JS,
}

logsumexp = _impl.logsumexp
log_softmax = _impl.log_softmax
softmax = _impl.softmax
token_divergence = _impl.token_divergence
divergence_logit_grad = _impl.divergence_logit_grad
sample_index = _impl.sample_index


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out
