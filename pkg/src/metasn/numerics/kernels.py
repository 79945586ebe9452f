"""Backend selection for the fused encoder kernel.

The compiled extension is used when it imports; set ``METASN_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("METASN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def conv_relu_maxpool_forward(x, lengths, w, b, backend=None):
    impl = _select(backend)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype)
    lengths = np.ascontiguousarray(lengths, dtype=np.intp)
    return impl.conv_relu_maxpool_forward(x, lengths, w, b)


def conv_relu_maxpool_backward(grad, pooled, arg, x, w, need_dx=False, backend=None):
    impl = _select(backend)
    x = np.ascontiguousarray(x)
    return impl.conv_relu_maxpool_backward(
        np.ascontiguousarray(grad, dtype=x.dtype),
        np.ascontiguousarray(pooled, dtype=x.dtype),
        np.ascontiguousarray(arg, dtype=np.intp),
        x,
        np.ascontiguousarray(w, dtype=x.dtype),
        need_dx,
    )


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")
