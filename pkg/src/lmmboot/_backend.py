"""Kernel backend selection.

The compiled extension ``lmmboot._core`` is used when importable; otherwise
(or when ``LMMBOOT_PURE_PYTHON=1``) the NumPy implementation in
``lmmboot._core_py`` is used.  Both expose the same functions.
"""
import contextlib
import os

from . import _core_py

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _core_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

if _compiled is not None and not os.environ.get("LMMBOOT_PURE_PYTHON"):
    kernels = _compiled
    name = "compiled"
else:
    kernels = _core_py
    name = "python"


def available():
    """Names of the kernel backends that can be selected."""
    return sorted(_BACKENDS)


def set_backend(backend):
    """Select the kernel backend (``"compiled"`` or ``"python"``) process-wide."""
    global kernels, name
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    kernels = _BACKENDS[backend]
    name = backend


@contextlib.contextmanager
def using(backend):
    """Temporarily switch the kernel backend."""
    previous = name
    set_backend(backend)
    try:
        yield kernels
    finally:
        set_backend(previous)
