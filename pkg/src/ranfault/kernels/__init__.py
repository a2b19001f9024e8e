"""Hot-path kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``ranfault.kernels._core``) is built at install time
when a C toolchain is available; otherwise the numpy implementation is used.
Set RANFAULT_BACKEND=c or RANFAULT_BACKEND=python to force a choice (``c``
raises if the extension is missing).
"""

from __future__ import annotations

import os


def _load(name: str):
    if name == "c":
        from . import _core
        return _core
    from . import _fallback
    return _fallback


def available_backends() -> list[str]:
    names = []
    try:
        from . import _core  # noqa: F401
        names.append("c")
    except ImportError:
        pass
    names.append("python")
    return names


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    if name not in ("c", "python"):
        raise ValueError(f"unknown backend {name!r}, expected 'c' or 'python'")
    return _load(name)


def _select():
    choice = os.environ.get("RANFAULT_BACKEND", "auto").lower()
    if choice == "auto":
        try:
            return _load("c")
        except ImportError:
            return _load("python")
    if choice == "c":
        try:
            return _load("c")
        except ImportError as exc:
            raise ImportError("RANFAULT_BACKEND=c but the compiled kernel extension "
                              "is not built; reinstall with a C toolchain") from exc
    if choice == "python":
        return _load("python")
    raise ValueError(f"RANFAULT_BACKEND={choice!r} not understood (auto|c|python)")


_impl = _select()
backend_name = _impl.backend_tag
sequence_forward = _impl.sequence_forward
sequence_backward = _impl.sequence_backward

__all__ = ["backend_name", "sequence_forward", "sequence_backward",
           "available_backends", "get_backend"]
