"""Operator library: forward kernels and backward formulas.

Every op is registered in the dispatcher under "vt::<name>" with the same
kernel body for both dispatch keys (the execution helpers run host calls
eagerly and enqueue virtual-device calls on the current stream). Backward
formulas are registered as autograd derivatives; they run under no_grad and
call the internal ``*_impl`` helpers directly.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import _exec
from .autograd import Derivative, check_inplace
from .dispatch import (DevicePolicy, DispatchKey, OpSchemaLite, registry)
from .dtypes import DType
from .errors import DTypeError, ShapeError
from .storage import (Tensor, as_strided, bump_version, contiguous_strides,
                      is_contiguous, make_tensor)


def _require_float(t: Tensor, op: str) -> None:
    if not t.dtype.is_float:
        raise DTypeError(f"{op} requires a float tensor, got {t.dtype.tag}")


def _norm_dim(d: int, ndim: int, op: str) -> int:
    if d < 0:
        d += ndim
    if not (0 <= d < ndim):
        raise ShapeError(f"{op}: dim {d} out of range for rank {ndim}")
    return d


# -- view helpers (share storage + version counter) ---------------------------


def reshape_impl(t: Tensor, sizes: Sequence[int]) -> Tensor:
    sizes = list(int(s) for s in sizes)
    if sizes.count(-1) > 1:
        raise ShapeError("reshape: at most one dim may be -1")
    if -1 in sizes:
        rest = math.prod(s for s in sizes if s != -1)
        if rest == 0 or t.numel() % rest:
            raise ShapeError(f"reshape: cannot infer -1 in {sizes} for {t.sizes}")
        sizes[sizes.index(-1)] = t.numel() // rest
    if math.prod(sizes) != t.numel():
        raise ShapeError(f"reshape: {t.sizes} -> {sizes} changes element count")
    if is_contiguous(t):
        return Tensor(t.storage, t.offset_elems, sizes,
                      contiguous_strides(sizes), t.dtype, version=t.version)
    return reshape_impl(contiguous_copy(t), sizes)


def transpose_impl(t: Tensor, d0: int, d1: int) -> Tensor:
    d0 = _norm_dim(d0, t.ndim, "transpose")
    d1 = _norm_dim(d1, t.ndim, "transpose")
    sizes = list(t.sizes)
    strides = list(t.strides)
    sizes[d0], sizes[d1] = sizes[d1], sizes[d0]
    strides[d0], strides[d1] = strides[d1], strides[d0]
    return as_strided(t, sizes, strides, t.offset_elems)


def select_impl(t: Tensor, dim: int, index: int) -> Tensor:
    dim = _norm_dim(dim, t.ndim, "select")
    if not (0 <= index < t.sizes[dim]):
        raise ShapeError(f"select: index {index} out of range")
    sizes = list(t.sizes)
    strides = list(t.strides)
    offset = t.offset_elems + index * strides[dim]
    del sizes[dim], strides[dim]
    return as_strided(t, sizes, strides, offset)


def narrow_impl(t: Tensor, dim: int, start: int, length: int) -> Tensor:
    dim = _norm_dim(dim, t.ndim, "narrow")
    if start < 0 or start + length > t.sizes[dim]:
        raise ShapeError("narrow out of range")
    sizes = list(t.sizes)
    sizes[dim] = length
    return as_strided(t, sizes, t.strides,
                      t.offset_elems + start * t.strides[dim])


def expand_impl(t: Tensor, sizes: Sequence[int]) -> Tensor:
    sizes = tuple(int(s) for s in sizes)
    pad = len(sizes) - t.ndim
    if pad < 0:
        raise ShapeError(f"expand: rank {len(sizes)} < tensor rank {t.ndim}")
    strides = []
    for d, target in enumerate(sizes):
        if d < pad:
            strides.append(0)
            continue
        size, stride = t.sizes[d - pad], t.strides[d - pad]
        if size == target:
            strides.append(stride)
        elif size == 1:
            strides.append(0)
        else:
            raise ShapeError(f"expand: cannot expand {t.sizes} to {sizes}")
    return as_strided(t, sizes, strides, t.offset_elems)


def contiguous_copy(t: Tensor) -> Tensor:
    out = make_tensor(t.sizes, t.dtype, t.device)
    _exec.copy_into(out, t)
    return out


def sum_to_shape(g: Tensor, shape: Sequence[int]) -> Tensor:
    """Reduce a broadcasted gradient back to the input's shape."""
    shape = tuple(shape)
    if g.sizes == shape:
        return g
    lead = g.ndim - len(shape)
    dims = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and g.sizes[lead + i] != 1:
            dims.append(lead + i)
    kept = _exec.reduce_sum_keepdim(g, dims) if dims else g
    return reshape_impl(kept, shape)


def broadcast_grad(g: Tensor, shape: Sequence[int], keepdim_shape) -> Tensor:
    """Materialize a reduced gradient back over the pre-reduction shape."""
    src = reshape_impl(g, keepdim_shape)
    out = make_tensor(tuple(shape), g.dtype, g.device)
    _exec.copy_into(out, src)
    return out


# -- elementwise binary/unary ------------------------------------------------


def _binary_kernel(op: str, float_only: bool = False):
    def kernel(args):
        a, b = args[0], args[1]
        if a.dtype is DType.BOOL:
            raise DTypeError(f"{op} does not support BOOL tensors")
        if float_only:
            _require_float(a, op)
        return [_exec.elementwise_binary(op, a, b)]
    return kernel


def _unary_kernel(op: str, float_only: bool = True):
    def kernel(args):
        (a,) = args[:1]
        if float_only:
            _require_float(a, op)
        return [_exec.elementwise_unary(op, a)]
    return kernel


# -- composite kernels ----------------------------------------------------------


def matmul_impl(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul takes 2-D operands, got {a.sizes} @ {b.sizes}")
    if a.sizes[1] != b.sizes[0]:
        raise ShapeError(f"matmul inner dims differ: {a.sizes} @ {b.sizes}")
    if a.dtype != b.dtype:
        raise DTypeError("matmul dtype mismatch")
    _require_float(a, "matmul")
    out = make_tensor((a.sizes[0], b.sizes[1]), a.dtype, a.device)

    def body(o, av, bv):
        np.matmul(av, bv, out=o)

    _exec.custom(body, reads=[a, b], writes=[out], label="vt::matmul")
    return out


def softmax_impl(x: Tensor, dim: int, log: bool = False) -> Tensor:
    _require_float(x, "softmax")
    dim = _norm_dim(dim, x.ndim, "softmax")
    out = make_tensor(x.sizes, x.dtype, x.device)

    def body(o, xv):
        m = xv.max(axis=dim, keepdims=True)
        e = np.exp(xv - m)
        s = e.sum(axis=dim, keepdims=True)
        if log:
            np.subtract(xv - m, np.log(s), out=o)
        else:
            np.divide(e, s, out=o)

    _exec.custom(body, reads=[x], writes=[out],
                 label="vt::log_softmax" if log else "vt::softmax")
    return out


def sum_impl(x: Tensor, dims: Optional[Sequence[int]]) -> Tensor:
    if x.dtype is DType.BOOL:
        raise DTypeError("sum does not support BOOL tensors")
    if dims is None or len(tuple(dims)) == 0:
        dims = tuple(range(x.ndim))
    dims = tuple(sorted(_norm_dim(d, x.ndim, "sum") for d in dims))
    kept = _exec.reduce_sum_keepdim(x, dims)
    out_sizes = tuple(s for d, s in enumerate(x.sizes) if d not in dims)
    return reshape_impl(kept, out_sizes)


def mean_impl(x: Tensor, dims: Optional[Sequence[int]]) -> Tensor:
    _require_float(x, "mean")
    if dims is None or len(tuple(dims)) == 0:
        dims = tuple(range(x.ndim))
    dims = tuple(sorted(_norm_dim(d, x.ndim, "mean") for d in dims))
    count = math.prod(x.sizes[d] for d in dims)
    s = sum_impl(x, dims)
    return _exec.scalar_binary("mul", s, 1.0 / count)


def index_select_impl(x: Tensor, dim: int, idx: Tensor) -> Tensor:
    dim = _norm_dim(dim, x.ndim, "index_select")
    if idx.dtype is not DType.I64 or idx.ndim != 1:
        raise DTypeError("index_select expects a 1-D I64 index tensor")
    out_sizes = list(x.sizes)
    out_sizes[dim] = idx.numel()
    out = make_tensor(out_sizes, x.dtype, x.device)
    bound = x.sizes[dim]

    def body(o, xv, iv):
        if iv.size and (iv.min() < 0 or iv.max() >= bound):
            raise IndexError(
                f"index_select: index out of range for dim of size {bound}")
        np.take(xv, iv, axis=dim, out=o)

    _exec.custom(body, reads=[x, idx], writes=[out], label="vt::index_select")
    return out


def embedding_impl(table: Tensor, idx: Tensor) -> Tensor:
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D (vocab, dim)")
    if idx.dtype is not DType.I64:
        raise DTypeError("embedding indices must be I64")
    out = make_tensor((*idx.sizes, table.sizes[1]), table.dtype, table.device)
    vocab = table.sizes[0]

    def body(o, tv, iv):
        if iv.size and (iv.min() < 0 or iv.max() >= vocab):
            raise IndexError(f"embedding: index out of range for vocab {vocab}")
        o[...] = tv[iv]

    _exec.custom(body, reads=[table, idx], writes=[out], label="vt::embedding")
    return out


def layer_norm_impl(x: Tensor, normalized_shape: Sequence[int], eps: float) -> Tensor:
    _require_float(x, "layer_norm")
    ns = tuple(int(s) for s in normalized_shape)
    if len(ns) == 0 or len(ns) > x.ndim or x.sizes[x.ndim - len(ns):] != ns:
        raise ShapeError(
            f"layer_norm: normalized_shape {ns} must match trailing dims of "
            f"{x.sizes}")
    axes = tuple(range(x.ndim - len(ns), x.ndim))
    out = make_tensor(x.sizes, x.dtype, x.device)

    def body(o, xv):
        mu = xv.mean(axis=axes, keepdims=True)
        var = xv.var(axis=axes, keepdims=True)  # population variance
        np.divide(xv - mu, np.sqrt(var + eps), out=o)

    _exec.custom(body, reads=[x], writes=[out], label="vt::layer_norm")
    return out


def cross_entropy_impl(logits: Tensor, targets: Tensor) -> Tensor:
    _require_float(logits, "cross_entropy")
    if logits.ndim != 2 or targets.ndim != 1 \
            or logits.sizes[0] != targets.sizes[0]:
        raise ShapeError(
            f"cross_entropy expects (N, C) logits and (N,) targets, got "
            f"{logits.sizes} and {targets.sizes}")
    if targets.dtype is not DType.I64:
        raise DTypeError("cross_entropy targets must be I64")
    out = make_tensor((), logits.dtype, logits.device)
    n_classes = logits.sizes[1]

    def body(o, lv, tv):
        if tv.size and (tv.min() < 0 or tv.max() >= n_classes):
            raise IndexError("cross_entropy: target out of range")
        m = lv.max(axis=1, keepdims=True)
        lse = np.log(np.exp(lv - m).sum(axis=1, keepdims=True)) + m
        picked = np.take_along_axis(lv, tv[:, None], axis=1)
        o[()] = float((lse - picked).mean())

    _exec.custom(body, reads=[logits, targets], writes=[out],
                 label="vt::cross_entropy")
    return out


def attention_impl(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Tensor:
    """Fused streaming attention with running-max (natural log) stabilization."""
    for t, name in ((q, "q"), (k, "k"), (v, "v")):
        _require_float(t, "attention")
        if t.ndim != 4:
            raise ShapeError(f"attention {name} must be (B, H, T, D), got {t.sizes}")
    if not (q.sizes == k.sizes == v.sizes):
        raise ShapeError(
            f"attention shapes must match: {q.sizes}, {k.sizes}, {v.sizes}")
    B, H, T, D = q.sizes
    scale = 1.0 / math.sqrt(D)
    out = make_tensor(q.sizes, q.dtype, q.device)
    block = 32

    def body(o, qv, kv, vv):
        m = np.full((B, H, T, 1), -np.inf, dtype=qv.dtype)
        l = np.zeros((B, H, T, 1), dtype=qv.dtype)
        acc = np.zeros((B, H, T, D), dtype=qv.dtype)
        rows = np.arange(T)[:, None]
        for j0 in range(0, T, block):
            j1 = min(j0 + block, T)
            s = np.matmul(qv, kv[:, :, j0:j1].swapaxes(-1, -2)) * scale
            if causal:
                cols = np.arange(j0, j1)[None, :]
                s = np.where(cols > rows, -np.inf, s)
            m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
            alpha = np.exp(m - m_new)
            p = np.exp(s - m_new)
            l[...] = l * alpha + p.sum(axis=-1, keepdims=True)
            acc[...] = acc * alpha + np.matmul(p, vv[:, :, j0:j1])
            m[...] = m_new
        np.divide(acc, l, out=o)

    _exec.custom(body, reads=[q, k, v], writes=[out], label="vt::attention")
    return out


def _attention_backward(saved, aux, grads):
    q, k, v = saved
    causal, = aux
    g = grads[0]
    B, H, T, D = q.sizes
    scale = 1.0 / math.sqrt(D)
    gq = make_tensor(q.sizes, q.dtype, q.device)
    gk = make_tensor(k.sizes, k.dtype, k.device)
    gv = make_tensor(v.sizes, v.dtype, v.device)

    def body(gqv, gkv, gvv, qv, kv, vv, gov):
        s = np.matmul(qv, kv.swapaxes(-1, -2)) * scale
        if causal:
            mask = np.triu(np.ones((T, T), dtype=bool), k=1)
            s = np.where(mask, -np.inf, s)
        m = s.max(axis=-1, keepdims=True)
        p = np.exp(s - m)
        p /= p.sum(axis=-1, keepdims=True)
        dv = np.matmul(p.swapaxes(-1, -2), gov)
        dp = np.matmul(gov, vv.swapaxes(-1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        gqv[...] = np.matmul(ds, kv) * scale
        gkv[...] = np.matmul(ds.swapaxes(-1, -2), qv) * scale
        gvv[...] = dv

    _exec.custom(body, reads=[q, k, v, g], writes=[gq, gk, gv],
                 label="vt::attention_bwd")
    return [gq, gk, gv]


# -- in-place ops -------------------------------------------------------------------


def copy__impl(dst: Tensor, src: Tensor) -> Tensor:
    check_inplace(dst, "vt::copy_")
    _exec.copy_into(dst, src, allow_alias=True)
    bump_version(dst)
    return dst


def add__impl(dst: Tensor, other: Tensor) -> Tensor:
    check_inplace(dst, "vt::add_")
    _exec.elementwise_binary("add", dst, other, out=dst, allow_alias=True)
    bump_version(dst)
    return dst


def fill__impl(dst: Tensor, value: float) -> Tensor:
    check_inplace(dst, "vt::fill_")
    _exec.fill_(dst, value)
    bump_version(dst)
    return dst


def adam_step_impl(p: Tensor, g: Tensor, m: Tensor, v: Tensor, step: int,
                   lr: float, beta1: float, beta2: float, eps: float) -> Tensor:
    check_inplace(p, "vt::adam_step")
    _exec.adam_update(p, g, m, v, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                      step=step)
    for t in (p, m, v):
        bump_version(t)
    return p


def sgd_step_impl(p: Tensor, g: Tensor, lr: float) -> Tensor:
    check_inplace(p, "vt::sgd_step")
    scaled = _exec.scalar_binary("mul", g, -lr)
    _exec.elementwise_binary("add", p, scaled, out=p, allow_alias=True)
    bump_version(p)
    return p


# -- registration ---------------------------------------------------------------------


def _def_op(name: str, n_in: int, n_out: int, kernel, *, backward=None,
            save=None, inplace_alias=None,
            policy=DevicePolicy.ALL_SAME_DEVICE) -> None:
    qual = f"vt::{name}"
    schema = OpSchemaLite(qual, n_in, n_out, inplace_alias=inplace_alias,
                          device_policy=policy)
    registry.register_op(schema)
    registry.register_kernel(qual, DispatchKey.HOST_KERNEL, kernel)
    registry.register_kernel(qual, DispatchKey.VIRT_KERNEL, kernel)
    if backward is not None:
        registry.register_autograd(qual, Derivative(qual, backward, save))


_REGISTERED = False


def register_all() -> None:
    global _REGISTERED
    if _REGISTERED:
        return
    _REGISTERED = True

    # add / sub: gradients pass through (reduced over broadcast dims).
    def bin_bwd(op):
        def bwd(saved, aux, grads):
            a_shape, b_shape = aux
            g = grads[0]
            if op == "add":
                ga, gb = g, g
            elif op == "sub":
                ga, gb = g, _exec.scalar_binary("mul", g, -1.0)
            return [sum_to_shape(ga, a_shape), sum_to_shape(gb, b_shape)]
        return bwd

    def bin_save(args, outs):
        return [], (args[0].sizes, args[1].sizes)

    _def_op("add", 2, 1, _binary_kernel("add"),
            backward=bin_bwd("add"), save=bin_save)
    _def_op("sub", 2, 1, _binary_kernel("sub"),
            backward=bin_bwd("sub"), save=bin_save)

    def mul_bwd(saved, aux, grads):
        a, b = saved
        g = grads[0]
        ga = _exec.elementwise_binary("mul", g, b)
        gb = _exec.elementwise_binary("mul", g, a)
        return [sum_to_shape(ga, a.sizes), sum_to_shape(gb, b.sizes)]

    _def_op("mul", 2, 1, _binary_kernel("mul"),
            backward=mul_bwd, save=lambda args, outs: (list(args[:2]), None))

    def div_bwd(saved, aux, grads):
        a, b = saved
        g = grads[0]
        ga = _exec.elementwise_binary("div", g, b)
        gb = _exec.elementwise_binary("mul", g, a)
        gb = _exec.elementwise_binary("div", gb, b)
        gb = _exec.elementwise_binary("div", gb, b)
        gb = _exec.scalar_binary("mul", gb, -1.0)
        return [sum_to_shape(ga, a.sizes), sum_to_shape(gb, b.sizes)]

    _def_op("div", 2, 1, _binary_kernel("div", float_only=True),
            backward=div_bwd, save=lambda args, outs: (list(args[:2]), None))

    def neg_kernel(args):
        a = args[0]
        if a.dtype is DType.BOOL:
            raise DTypeError("neg does not support BOOL tensors")
        return [_exec.elementwise_unary("neg", a)]

    _def_op("neg", 1, 1, neg_kernel,
            backward=lambda saved, aux, g: [_exec.scalar_binary("mul", g[0], -1.0)],
            save=lambda args, outs: ([], None))

    _def_op("exp", 1, 1, _unary_kernel("exp"),
            backward=lambda saved, aux, g: [
                _exec.elementwise_binary("mul", g[0], saved[0])],
            save=lambda args, outs: ([outs[0]], None))

    def log_bwd(saved, aux, grads):
        return [_exec.elementwise_binary("div", grads[0], saved[0])]

    _def_op("log", 1, 1, _unary_kernel("log"),
            backward=log_bwd, save=lambda args, outs: ([args[0]], None))

    def tanh_bwd(saved, aux, grads):
        y = saved[0]
        y2 = _exec.elementwise_binary("mul", y, y)
        one_minus = _exec.scalar_binary("mul", y2, -1.0)
        one_minus = _exec.scalar_binary("add", one_minus, 1.0)
        return [_exec.elementwise_binary("mul", grads[0], one_minus)]

    _def_op("tanh", 1, 1, _unary_kernel("tanh"),
            backward=tanh_bwd, save=lambda args, outs: ([outs[0]], None))

    def relu_bwd(saved, aux, grads):
        x = saved[0]
        mask = make_tensor(x.sizes, x.dtype, x.device)

        def body(mv, xv):
            mv[...] = (xv > 0).astype(mv.dtype)

        _exec.custom(body, reads=[x], writes=[mask], label="vt::relu_bwd")
        return [_exec.elementwise_binary("mul", grads[0], mask)]

    _def_op("relu", 1, 1, _unary_kernel("relu"),
            backward=relu_bwd, save=lambda args, outs: ([args[0]], None))

    def matmul_bwd(saved, aux, grads):
        a, b = saved
        g = grads[0]
        ga = matmul_impl(g, transpose_impl(b, 0, 1))
        gb = matmul_impl(transpose_impl(a, 0, 1), g)
        return [ga, gb]

    _def_op("matmul", 2, 1, lambda args: [matmul_impl(args[0], args[1])],
            backward=matmul_bwd, save=lambda args, outs: (list(args[:2]), None))

    def softmax_bwd(saved, aux, grads):
        y = saved[0]
        dim, = aux
        g = grads[0]
        gy = _exec.elementwise_binary("mul", g, y)
        s = _exec.reduce_sum_keepdim(gy, [dim])
        sb = expand_impl(s, y.sizes)
        inner = _exec.elementwise_binary("sub", g, sb)
        return [_exec.elementwise_binary("mul", inner, y)]

    _def_op("softmax", 1, 1,
            lambda args: [softmax_impl(args[0], args[1])],
            backward=softmax_bwd,
            save=lambda args, outs: ([outs[0]],
                                     (_norm_dim(args[1], args[0].ndim, "softmax"),)))

    def log_softmax_bwd(saved, aux, grads):
        y = saved[0]  # log-probabilities
        dim, = aux
        g = grads[0]
        p = _exec.elementwise_unary("exp", y)
        s = _exec.reduce_sum_keepdim(g, [dim])
        sb = expand_impl(s, y.sizes)
        return [_exec.elementwise_binary("sub", g,
                                         _exec.elementwise_binary("mul", p, sb))]

    _def_op("log_softmax", 1, 1,
            lambda args: [softmax_impl(args[0], args[1], log=True)],
            backward=log_softmax_bwd,
            save=lambda args, outs: ([outs[0]],
                                     (_norm_dim(args[1], args[0].ndim,
                                                "log_softmax"),)))

    def sum_bwd(saved, aux, grads):
        in_shape, dims = aux
        keep = tuple(1 if d in dims else s for d, s in enumerate(in_shape))
        return [broadcast_grad(grads[0], in_shape, keep)]

    def sum_save(args, outs):
        x = args[0]
        dims = args[1]
        if dims is None or len(tuple(dims)) == 0:
            dims = tuple(range(x.ndim))
        dims = tuple(sorted(_norm_dim(d, x.ndim, "sum") for d in dims))
        return [], (x.sizes, dims)

    _def_op("sum", 1, 1, lambda args: [sum_impl(args[0], args[1])],
            backward=sum_bwd, save=sum_save)

    def mean_bwd(saved, aux, grads):
        in_shape, dims, count = aux
        keep = tuple(1 if d in dims else s for d, s in enumerate(in_shape))
        g = _exec.scalar_binary("mul", grads[0], 1.0 / count)
        return [broadcast_grad(g, in_shape, keep)]

    def mean_save(args, outs):
        x = args[0]
        dims = args[1]
        if dims is None or len(tuple(dims)) == 0:
            dims = tuple(range(x.ndim))
        dims = tuple(sorted(_norm_dim(d, x.ndim, "mean") for d in dims))
        count = math.prod(x.sizes[d] for d in dims)
        return [], (x.sizes, dims, count)

    _def_op("mean", 1, 1, lambda args: [mean_impl(args[0], args[1])],
            backward=mean_bwd, save=mean_save)

    _def_op("reshape", 1, 1, lambda args: [reshape_impl(args[0], args[1])],
            backward=lambda saved, aux, g: [reshape_impl(contiguous_copy(g[0]),
                                                         aux[0])],
            save=lambda args, outs: ([], (args[0].sizes,)))

    _def_op("transpose", 1, 1,
            lambda args: [transpose_impl(args[0], args[1], args[2])],
            backward=lambda saved, aux, g: [transpose_impl(g[0], aux[0], aux[1])],
            save=lambda args, outs: ([], (args[1], args[2])))

    def index_select_bwd(saved, aux, grads):
        idx = saved[0]
        in_shape, dim = aux
        g = grads[0]
        gx = make_tensor(in_shape, g.dtype, g.device)

        def body(gv, gradv, iv):
            sel = tuple(slice(None) if d != dim else iv
                        for d in range(len(in_shape)))
            np.add.at(gv, sel, gradv)

        _exec.custom(body, reads=[g, idx], writes=[gx],
                     label="vt::index_select_bwd")
        return [gx, None]

    _def_op("index_select", 2, 1,
            lambda args: [index_select_impl(args[0], args[2], args[1])],
            backward=index_select_bwd,
            save=lambda args, outs: ([args[1]],
                                     (args[0].sizes,
                                      _norm_dim(args[2], args[0].ndim,
                                                "index_select"))))

    def embedding_bwd(saved, aux, grads):
        idx = saved[0]
        table_shape, = aux
        g = grads[0]
        gt = make_tensor(table_shape, g.dtype, g.device)

        def body(gv, gradv, iv):
            np.add.at(gv, iv.reshape(-1), gradv.reshape(-1, table_shape[1]))

        _exec.custom(body, reads=[g, idx], writes=[gt], label="vt::embedding_bwd")
        return [gt, None]

    _def_op("embedding", 2, 1,
            lambda args: [embedding_impl(args[0], args[1])],
            backward=embedding_bwd,
            save=lambda args, outs: ([args[1]], (args[0].sizes,)))

    def layer_norm_bwd(saved, aux, grads):
        x = saved[0]
        axes, eps = aux
        g = grads[0]
        gx = make_tensor(x.sizes, x.dtype, x.device)

        def body(gv, xv, gradv):
            mu = xv.mean(axis=axes, keepdims=True)
            var = xv.var(axis=axes, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (xv - mu) * inv
            gm = gradv.mean(axis=axes, keepdims=True)
            gxm = (gradv * xhat).mean(axis=axes, keepdims=True)
            gv[...] = inv * (gradv - gm - xhat * gxm)

        _exec.custom(body, reads=[x, g], writes=[gx], label="vt::layer_norm_bwd")
        return [gx]

    def layer_norm_save(args, outs):
        x = args[0]
        ns = tuple(int(s) for s in args[1])
        axes = tuple(range(x.ndim - len(ns), x.ndim))
        return [x], (axes, float(args[2]))

    _def_op("layer_norm", 1, 1,
            lambda args: [layer_norm_impl(args[0], args[1], args[2])],
            backward=layer_norm_bwd, save=layer_norm_save)

    def cross_entropy_bwd(saved, aux, grads):
        logits, targets = saved
        g = grads[0]
        gl = make_tensor(logits.sizes, logits.dtype, logits.device)
        n = logits.sizes[0]

        def body(gv, lv, tv, gradv):
            m = lv.max(axis=1, keepdims=True)
            e = np.exp(lv - m)
            p = e / e.sum(axis=1, keepdims=True)
            p[np.arange(n), tv] -= 1.0
            gv[...] = p * (gradv[()] / n)

        _exec.custom(body, reads=[logits, targets, g], writes=[gl],
                     label="vt::cross_entropy_bwd")
        return [gl, None]

    _def_op("cross_entropy", 2, 1,
            lambda args: [cross_entropy_impl(args[0], args[1])],
            backward=cross_entropy_bwd,
            save=lambda args, outs: (list(args[:2]), None))

    _def_op("attention", 3, 1,
            lambda args: [attention_impl(args[0], args[1], args[2],
                                         bool(args[3]))],
            backward=_attention_backward,
            save=lambda args, outs: (list(args[:3]), (bool(args[3]),)))

    # In-place ops: bump versions, declare alias maps, never differentiable.
    _def_op("copy_", 2, 1, lambda args: [copy__impl(args[0], args[1])],
            inplace_alias={0: 0})
    _def_op("add_", 2, 1, lambda args: [add__impl(args[0], args[1])],
            inplace_alias={0: 0})
    _def_op("fill_", 1, 1, lambda args: [fill__impl(args[0], args[1])],
            inplace_alias={0: 0})
    _def_op("adam_step", 4, 1,
            lambda args: [adam_step_impl(*args[:4], int(args[4]),
                                         float(args[5]), float(args[6]),
                                         float(args[7]), float(args[8]))],
            inplace_alias={0: 0})
    _def_op("sgd_step", 2, 1,
            lambda args: [sgd_step_impl(args[0], args[1], float(args[2]))],
            inplace_alias={0: 0})
