"""Kernel backend selection.

``RDN_BACKEND=numpy`` forces the pure-numpy kernels; ``numba`` (the default
when numba imports) runs the compiled loop kernels.  The choice can also be
flipped at runtime with :func:`set_backend`, which is what the benchmark and
the cross-backend tests do.
"""

import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _initial():
    name = os.environ.get("RDN_BACKEND", "numba" if HAVE_NUMBA else "numpy").strip().lower()
    if name not in _VALID:
        raise ValueError(f"RDN_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        name = "numpy"
    return name


_current = _initial()


def get_backend() -> str:
    return _current


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _current
    name = name.strip().lower()
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev, _current = _current, name
    return prev


def use_numba() -> bool:
    return _current == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a passthrough without numba."""
    if not HAVE_NUMBA:
        def wrap(fn):
            return fn
        return wrap(args[0]) if args and callable(args[0]) else wrap
    import numba

    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
