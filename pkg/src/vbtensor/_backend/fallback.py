"""Pure-Python (numpy) kernel lane.

Every function takes operand *specs*: ``(base, offset, shape, strides)`` where
``base`` is the flat 1-D typed storage array, ``offset`` is in elements and
``strides`` are element-unit strides (0 allowed for broadcast dims). The
compiled lane in ``_ckernels`` implements the same contract with explicit
loops; this lane reconstructs strided views and lets numpy do the work.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "fallback"


def _view(spec) -> np.ndarray:
    base, offset, shape, strides = spec
    itemsize = base.itemsize
    return as_strided(
        base[offset:],
        shape=tuple(shape),
        strides=tuple(int(s) * itemsize for s in strides),
    )


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "maximum": np.maximum,
    "pow": np.power,
}

_UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
}


def binary(op: str, out, a, b) -> None:
    # IEEE semantics to match the compiled lane: div by zero yields inf/nan
    # without warning.
    with np.errstate(divide="ignore", invalid="ignore"):
        _BINARY[op](_view(a), _view(b), out=_view(out))


def unary(op: str, out, a) -> None:
    if op == "relu":
        np.maximum(_view(a), 0, out=_view(out))
        return
    _UNARY[op](_view(a), out=_view(out))


def copy(out, a) -> None:
    _view(out)[...] = _view(a)


def fill(out, value) -> None:
    _view(out)[...] = value


def reduce_sum(out, a, axes) -> None:
    """out = sum(a) over ``axes``.

    The out spec arrives with the full common shape and stride 0 on reduced
    dims (the compiled lane accumulates through it); numpy instead wants a
    keepdims-shaped out view.
    """
    base, offset, shape, strides = out
    axes = tuple(axes)
    keep_shape = tuple(1 if d in axes else s for d, s in enumerate(shape))
    ov = _view((base, offset, keep_shape, strides))
    av = _view(a)
    if not axes:
        ov[...] = av
        return
    np.sum(av, axis=axes, keepdims=True, out=ov)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2) -> None:
    """Fused Adam update; ``bias1``/``bias2`` are 1-beta^t corrections."""
    pv, gv, mv, vv = _view(p), _view(g), _view(m), _view(v)
    mv *= beta1
    mv += (1.0 - beta1) * gv
    vv *= beta2
    vv += (1.0 - beta2) * gv * gv
    pv -= lr * (mv / bias1) / (np.sqrt(vv / bias2) + eps)
