"""Backend selection for the hot kernels.

The compiled extension ``leadinst._ckernels`` is used when it imports;
otherwise the numpy versions in ``leadinst._pykernels`` are used. Setting
``LEADINST_PURE_PYTHON=1`` forces the numpy path.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("LEADINST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def resample_poly(x, table, base, phase, impl=None):
    impl = impl or _impl
    return impl.resample_poly(_f64(x), _f64(table), _i64(base), _i64(phase))


def attention_forward(q, k, v, heads, impl=None):
    impl = impl or _impl
    return impl.attention_forward(_f64(q), _f64(k), _f64(v), int(heads))


def attention_backward(q, k, v, w, g_out, heads, impl=None):
    impl = impl or _impl
    return impl.attention_backward(_f64(q), _f64(k), _f64(v), _f64(w), _f64(g_out), int(heads))


def confusion_matrix(ref, pred, n_classes, impl=None):
    impl = impl or _impl
    return impl.confusion_matrix(_i64(ref), _i64(pred), int(n_classes))


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
