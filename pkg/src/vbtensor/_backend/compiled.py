"""Adapter exposing the Cython kernel core behind the backend contract."""

from __future__ import annotations

import numpy as np

from . import _ckernels as ck

NAME = "compiled"

_BIN_OPS = {"add": 0, "sub": 1, "mul": 2, "div": 3, "maximum": 4}
_UN_OPS = {"neg": 0, "exp": 1, "log": 2, "tanh": 3, "relu": 4, "sqrt": 5,
           "abs": 6}


def _base(arr: np.ndarray) -> np.ndarray:
    # bool buffers run through the uint8 loops (same layout).
    if arr.dtype == np.bool_:
        return arr.view(np.uint8)
    return arr


def _i64(values) -> np.ndarray:
    return np.asarray(tuple(values), dtype=np.int64)


def _unpack(spec):
    base, offset, shape, strides = spec
    return _base(base), int(offset), _i64(shape), _i64(strides)


def binary(op: str, out, a, b) -> None:
    ob, oo, shape, so = _unpack(out)
    ab, ao, _, sa = _unpack(a)
    bb, bo, _, sb = _unpack(b)
    ck.binary_kernel(_BIN_OPS[op], ob, oo, ab, ao, bb, bo, shape, so, sa, sb)


def unary(op: str, out, a) -> None:
    ob, oo, shape, so = _unpack(out)
    ab, ao, _, sa = _unpack(a)
    ck.unary_kernel(_UN_OPS[op], ob, oo, ab, ao, shape, so, sa)


def copy(out, a) -> None:
    ob, oo, shape, so = _unpack(out)
    ab, ao, _, sa = _unpack(a)
    ck.copy_kernel(ob, oo, ab, ao, shape, so, sa)


def fill(out, value) -> None:
    ob, oo, shape, so = _unpack(out)
    ck.fill_kernel(ob, oo, shape, so, ob.dtype.type(value))


def reduce_sum(out, a, axes) -> None:
    """out = sum(a) over ``axes``: zero the distinct out cells, accumulate."""
    ob, oo, shape, so = _unpack(out)
    ab, ao, _, sa = _unpack(a)
    axes = set(axes)
    keep = [d for d in range(len(shape)) if d not in axes]
    fill_shape = _i64(int(shape[d]) for d in keep)
    fill_strides = _i64(int(so[d]) for d in keep)
    ck.fill_kernel(ob, oo, fill_shape, fill_strides, ob.dtype.type(0))
    ck.accumulate_kernel(ob, oo, ab, ao, shape, so, sa)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2) -> None:
    pb, po, shape, sp = _unpack(p)
    gb, go, _, sg = _unpack(g)
    mb, mo, _, sm = _unpack(m)
    vb, vo, _, sv = _unpack(v)
    ck.adam_kernel(pb, po, gb, go, mb, mo, vb, vo, shape, sp, sg, sm, sv,
                   lr, beta1, beta2, eps, bias1, bias2)
