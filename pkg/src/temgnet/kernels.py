"""Kernel backend selection.

The compiled extension is used when importable; setting the environment
variable ``TEMGNET_PURE_PYTHON=1`` forces the pure-Python fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("TEMGNET_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python') or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def sosfilt(sos, x, zi):
    return _impl.sosfilt(sos, x, zi)


def signed_rank_counts(ranks):
    return _impl.signed_rank_counts(ranks)
