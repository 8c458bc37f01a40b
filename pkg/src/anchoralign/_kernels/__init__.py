"""Kernel backend selection.

The compiled Cython extension is used when importable; otherwise the numpy
fallback.  ``ANCHORALIGN_KERNELS=numpy|compiled|auto`` overrides the choice,
and :func:`set_backend` switches at runtime (used by the benchmark and the
parity tests).  Both backends implement the same module-level API; see
``numpy_backend`` for the reference signatures.
"""

import logging
import os

from . import numpy_backend

logger = logging.getLogger(__name__)

_BACKENDS = {"numpy": numpy_backend}

try:
    from . import compiled_backend

    _BACKENDS["compiled"] = compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

_impl = numpy_backend


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Select the active kernel backend by name ("numpy" or "compiled")."""
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _impl = _BACKENDS[name]
    return _impl


def active_backend():
    return _impl.NAME


def _select_initial():
    choice = os.environ.get("ANCHORALIGN_KERNELS", "auto").lower()
    if choice == "auto":
        choice = "compiled" if "compiled" in _BACKENDS else "numpy"
    if choice not in _BACKENDS:
        logger.warning("kernel backend %r unavailable, using numpy", choice)
        choice = "numpy"
    set_backend(choice)


_select_initial()


def row_softmax(x):
    return _impl.row_softmax(x)


def row_softmax_bwd(y, gy, acc):
    _impl.row_softmax_bwd(y, gy, acc)


def row_normalize(x):
    return _impl.row_normalize(x)


def row_normalize_bwd(y, norms, gy, acc):
    _impl.row_normalize_bwd(y, norms, gy, acc)


def sigmoid(x):
    return _impl.sigmoid(x)


def sigmoid_bwd(y, gy, acc):
    _impl.sigmoid_bwd(y, gy, acc)


def tanh(x):
    return _impl.tanh(x)


def tanh_bwd(y, gy, acc):
    _impl.tanh_bwd(y, gy, acc)


def relu(x):
    return _impl.relu(x)


def relu_bwd(x, gy, acc):
    _impl.relu_bwd(x, gy, acc)


def exp(x):
    return _impl.exp(x)


def exp_bwd(y, gy, acc):
    _impl.exp_bwd(y, gy, acc)


def log(x):
    return _impl.log(x)


def log_bwd(x, gy, acc):
    _impl.log_bwd(x, gy, acc)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    _impl.adam_update(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2)
