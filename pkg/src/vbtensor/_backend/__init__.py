"""Kernel backend selection.

The compiled Cython core is preferred when importable; the numpy lane is the
fallback and the semantic twin. ``VBT_FORCE_FALLBACK=1`` forces the pure lane
(used by the backend-differential tests and the benchmark).
"""

from __future__ import annotations

import os

from . import fallback

_impl = fallback
_compiled = None

if os.environ.get("VBT_FORCE_FALLBACK") != "1":
    try:
        from . import compiled as _compiled_mod

        _compiled = _compiled_mod
        _impl = _compiled_mod
    except ImportError:
        _compiled = None


def active_name() -> str:
    return _impl.NAME


def has_compiled() -> bool:
    return _compiled is not None


def get_lane(name: str):
    """Return a specific lane by name ('compiled' or 'fallback')."""
    if name == "fallback":
        return fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel lane is not available")
        return _compiled
    raise ValueError(f"unknown backend lane {name!r}")


def binary(op, out, a, b):
    _impl.binary(op, out, a, b)


def unary(op, out, a):
    _impl.unary(op, out, a)


def copy(out, a):
    _impl.copy(out, a)


def fill(out, value):
    _impl.fill(out, value)


def reduce_sum(out, a, axes):
    _impl.reduce_sum(out, a, axes)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
    _impl.adam_step(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2)
