"""Selects the batched IRLS kernel at import time.

The compiled ``_irls_ext`` module is preferred; the numpy implementation in
``_irls_py`` is used when the extension is not built or when the environment
variable ``MULTIDR_BACKEND=python`` is set.
"""
import os

from . import _irls_py

try:
    from . import _irls_ext
except ImportError:  # extension not built
    _irls_ext = None

KERNELS = {"python": _irls_py.irls_many}
if _irls_ext is not None:
    KERNELS["compiled"] = _irls_ext.irls_many

_requested = os.environ.get("MULTIDR_BACKEND", "").strip().lower()
if _requested in KERNELS:
    DEFAULT = _requested
else:
    DEFAULT = "compiled" if "compiled" in KERNELS else "python"


def available():
    return sorted(KERNELS)


def get_kernel(name=None):
    name = DEFAULT if name is None else name
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available()}") from None
