"""Compute-kernel backend selection.

The compiled extension (_speedups, built from Cython) is preferred when
importable; the pure-numpy implementation is the fallback and the semantic
reference.  Set BATTVOLT_PURE_PYTHON=1 to force the fallback, e.g. for
benchmarking or debugging.
"""

import os

from . import _numpy_impl, layout  # noqa: F401

try:
    from . import _speedups
except ImportError:
    _speedups = None

_FORCE_PURE = os.environ.get("BATTVOLT_PURE_PYTHON", "") not in ("", "0")
_impl = _numpy_impl if (_speedups is None or _FORCE_PURE) else _speedups

ACTIVE_BACKEND = "numpy" if _impl is _numpy_impl else "compiled"

rc_rk4 = _impl.rc_rk4
rc_rk4_sens = _impl.rc_rk4_sens
ude_simulate = _impl.ude_simulate
ude_loss_grad = _impl.ude_loss_grad
lstm_forward = _impl.lstm_forward
lstm_loss_grad = _impl.lstm_loss_grad


def available_backends() -> dict:
    """Importable backend modules keyed by name."""
    backends = {"numpy": _numpy_impl}
    if _speedups is not None:
        backends["compiled"] = _speedups
    return backends
