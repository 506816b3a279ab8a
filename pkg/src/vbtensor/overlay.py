"""Torch-like user-facing overlay.

Factories, the functional ops namespace (routing through the dispatcher so
overrides and autograd wrappers apply), device/stream utilities, and the
method/dunder surface installed on Tensor. This module is what the parity
manifest checks.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np

from . import _exec, autograd, ops as _ops
from .dispatch import call_boxed, registry
from .dtypes import Device, DType, HOST, parse_device, virt
from .runtime import get_runtime, stream_scope
from .storage import Tensor, as_strided, is_contiguous, make_tensor

_ops.register_all()

# Dtype aliases for the torch-shaped surface.
float32 = DType.F32
float64 = DType.F64
int64 = DType.I64
int32 = DType.I32
bool_ = DType.BOOL

no_grad = autograd.no_grad
enable_grad = autograd.enable_grad
is_grad_enabled = autograd.is_grad_enabled
set_grad_enabled = autograd.set_grad_enabled

_rng_lock = threading.Lock()
_default_rng = np.random.default_rng(0)


def manual_seed(seed: int) -> None:
    global _default_rng
    with _rng_lock:
        _default_rng = np.random.default_rng(seed)


def _rng() -> np.random.Generator:
    return _default_rng


# -- factories ---------------------------------------------------------------


def tensor(data, dtype: Optional[DType] = None, device=HOST,
           requires_grad: bool = False) -> Tensor:
    device = parse_device(device)
    arr = np.asarray(data)
    if dtype is None:
        if arr.dtype.kind == "f":
            dtype = DType.F32 if arr.dtype.itemsize <= 4 else DType.F64
        elif arr.dtype.kind == "b":
            dtype = DType.BOOL
        else:
            dtype = DType.I64
    t = _exec.from_numpy(arr.astype(dtype.np), dtype, device)
    if requires_grad:
        t.requires_grad = True
    return t


def zeros(*sizes, dtype: DType = DType.F32, device=HOST,
          requires_grad: bool = False) -> Tensor:
    sizes = sizes[0] if len(sizes) == 1 and isinstance(sizes[0], (tuple, list)) else sizes
    t = make_tensor(sizes, dtype, parse_device(device))
    if requires_grad:
        t.requires_grad = True
    return t


def ones(*sizes, dtype: DType = DType.F32, device=HOST,
         requires_grad: bool = False) -> Tensor:
    t = zeros(*sizes, dtype=dtype, device=device)
    _exec.fill_(t, 1)
    if requires_grad:
        t.requires_grad = True
    return t


def full(sizes, value, dtype: DType = DType.F32, device=HOST) -> Tensor:
    t = make_tensor(sizes, dtype, parse_device(device))
    _exec.fill_(t, value)
    return t


def arange(n, dtype: DType = DType.I64, device=HOST) -> Tensor:
    return tensor(np.arange(n), dtype=dtype, device=device)


def rand(*sizes, dtype: DType = DType.F32, device=HOST) -> Tensor:
    sizes = sizes[0] if len(sizes) == 1 and isinstance(sizes[0], (tuple, list)) else sizes
    return tensor(_rng().random(sizes), dtype=dtype, device=device)


def randn(*sizes, dtype: DType = DType.F32, device=HOST,
          requires_grad: bool = False) -> Tensor:
    sizes = sizes[0] if len(sizes) == 1 and isinstance(sizes[0], (tuple, list)) else sizes
    t = tensor(_rng().standard_normal(sizes), dtype=dtype, device=device)
    if requires_grad:
        t.requires_grad = True
    return t


def randint(low, high, sizes, dtype: DType = DType.I64, device=HOST) -> Tensor:
    return tensor(_rng().integers(low, high, sizes), dtype=dtype, device=device)


def zeros_like(t: Tensor) -> Tensor:
    return make_tensor(t.sizes, t.dtype, t.device)


def ones_like(t: Tensor) -> Tensor:
    out = make_tensor(t.sizes, t.dtype, t.device)
    _exec.fill_(out, 1)
    return out


# -- functional ops (dispatcher-routed) ------------------------------------------


def _coerce_operand(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return b
    return full((), b, dtype=a.dtype, device=a.device)


def add(a: Tensor, b) -> Tensor:
    return call_boxed("vt::add", [a, _coerce_operand(a, b)])[0]


def sub(a: Tensor, b) -> Tensor:
    return call_boxed("vt::sub", [a, _coerce_operand(a, b)])[0]


def mul(a: Tensor, b) -> Tensor:
    return call_boxed("vt::mul", [a, _coerce_operand(a, b)])[0]


def div(a: Tensor, b) -> Tensor:
    return call_boxed("vt::div", [a, _coerce_operand(a, b)])[0]


def neg(a: Tensor) -> Tensor:
    return call_boxed("vt::neg", [a])[0]


def exp(a: Tensor) -> Tensor:
    return call_boxed("vt::exp", [a])[0]


def log(a: Tensor) -> Tensor:
    return call_boxed("vt::log", [a])[0]


def tanh(a: Tensor) -> Tensor:
    return call_boxed("vt::tanh", [a])[0]


def relu(a: Tensor) -> Tensor:
    return call_boxed("vt::relu", [a])[0]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return call_boxed("vt::matmul", [a, b])[0]


def softmax(a: Tensor, dim: int) -> Tensor:
    return call_boxed("vt::softmax", [a, int(dim)])[0]


def log_softmax(a: Tensor, dim: int) -> Tensor:
    return call_boxed("vt::log_softmax", [a, int(dim)])[0]


def sum(a: Tensor, dims: Optional[Sequence[int]] = None) -> Tensor:  # noqa: A001
    return call_boxed("vt::sum", [a, None if dims is None else list(dims)])[0]


def mean(a: Tensor, dims: Optional[Sequence[int]] = None) -> Tensor:
    return call_boxed("vt::mean", [a, None if dims is None else list(dims)])[0]


def reshape(a: Tensor, sizes) -> Tensor:
    return call_boxed("vt::reshape", [a, list(sizes)])[0]


def transpose(a: Tensor, d0: int, d1: int) -> Tensor:
    return call_boxed("vt::transpose", [a, int(d0), int(d1)])[0]


def index_select(a: Tensor, dim: int, idx: Tensor) -> Tensor:
    return call_boxed("vt::index_select", [a, idx, int(dim)])[0]


def embedding(table: Tensor, idx: Tensor) -> Tensor:
    return call_boxed("vt::embedding", [table, idx])[0]


def layer_norm(a: Tensor, normalized_shape, eps: float = 1e-5) -> Tensor:
    return call_boxed("vt::layer_norm",
                      [a, list(normalized_shape), float(eps)])[0]


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    return call_boxed("vt::cross_entropy", [logits, targets])[0]


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    return call_boxed("vt::attention", [q, k, v, bool(causal)])[0]


def adam_step(p: Tensor, g: Tensor, m: Tensor, v: Tensor, *, step: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tensor:
    return call_boxed("vt::adam_step",
                      [p, g, m, v, int(step), float(lr), float(beta1),
                       float(beta2), float(eps)])[0]


def sgd_step(p: Tensor, g: Tensor, lr: float) -> Tensor:
    return call_boxed("vt::sgd_step", [p, g, float(lr)])[0]


def copy_(dst: Tensor, src: Tensor) -> Tensor:
    return call_boxed("vt::copy_", [dst, src])[0]


def add_(dst: Tensor, other: Tensor) -> Tensor:
    return call_boxed("vt::add_", [dst, _coerce_operand(dst, other)])[0]


def fill_(dst: Tensor, value: float) -> Tensor:
    return call_boxed("vt::fill_", [dst, float(value)])[0]


def scale(a: Tensor, s: float) -> Tensor:
    """a * s with gradient support (s becomes a 0-d operand)."""
    return mul(a, s)


def attention_ref(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Dense reference attention composed from primitive ops."""
    B, H, T, D = q.sizes
    import math as _math
    inv = 1.0 / _math.sqrt(D)
    mask_np = np.where(np.triu(np.ones((T, T)), k=1) > 0, -np.inf, 0.0) \
        if causal else np.zeros((T, T))
    mask = tensor(mask_np, dtype=q.dtype, device=q.device)
    rows = []
    for b in range(B):
        heads = []
        for h in range(H):
            qh = _ops.select_impl(_ops.select_impl(q, 0, b), 0, h)
            kh = _ops.select_impl(_ops.select_impl(k, 0, b), 0, h)
            vh = _ops.select_impl(_ops.select_impl(v, 0, b), 0, h)
            s = mul(matmul(qh, transpose(kh, 0, 1)), inv)
            s = add(s, mask)
            p = softmax(s, dim=1)
            heads.append(reshape(matmul(p, vh), [1, 1, T, D]))
        rows.append(cat_rows(heads, dim=1))
    return cat_rows(rows, dim=0)


def cat_rows(parts: list[Tensor], dim: int) -> Tensor:
    """Concatenate along ``dim`` via narrow+copy (no dedicated kernel)."""
    if len(parts) == 1:
        return parts[0]
    sizes = list(parts[0].sizes)
    total = 0
    for p in parts:
        total += p.sizes[dim]
    sizes[dim] = total
    out = make_tensor(sizes, parts[0].dtype, parts[0].device)
    off = 0
    for p in parts:
        dstv = _ops.narrow_impl(out, dim, off, p.sizes[dim])
        _exec.copy_into(dstv, p)
        off += p.sizes[dim]
    return out


# -- view utilities ---------------------------------------------------------------

select = _ops.select_impl
narrow = _ops.narrow_impl
expand = _ops.expand_impl
contiguous = _ops.contiguous_copy


def detach(t: Tensor) -> Tensor:
    """Same-storage view sharing the version counter, cut from the graph."""
    return as_strided(t, t.sizes, t.strides, t.offset_elems)


# -- autograd entry points -----------------------------------------------------------

backward = autograd.backward


# -- host transfer ---------------------------------------------------------------------

to_numpy = _exec.to_numpy
from_numpy = _exec.from_numpy
to_device = _exec.to_device
item = _exec.item


# -- device utilities --------------------------------------------------------------------


def device(spec) -> Device:
    return parse_device(spec)


def device_count() -> int:
    return get_runtime().num_devices


def synchronize(dev=None) -> None:
    rt = get_runtime()
    if dev is None:
        for d in rt.devices:
            d.synchronize()
        return
    dev = parse_device(dev)
    if dev.is_virt:
        rt.device(dev.index).synchronize()


def current_stream(device_index: int = 0):
    return get_runtime().current_stream(device_index)


def create_stream(device_index: int = 0):
    return get_runtime().device(device_index).create_stream()


stream = stream_scope


def create_event(device_index: int = 0):
    return get_runtime().device(device_index).create_event()


def memory_stats(device_index: int = 0) -> dict:
    return get_runtime().allocator(device_index).memory_stats()


def memory_snapshot(device_index: int = 0) -> dict:
    return get_runtime().allocator(device_index).memory_snapshot()


def set_per_process_memory_fraction(fraction: float, device_index: int = 0) -> None:
    get_runtime().allocator(device_index).set_per_process_memory_fraction(fraction)


def hazard_check_mode(enabled: bool, device_index: int = 0) -> None:
    get_runtime().device(device_index).hazard_check_mode(enabled)


def hazard_reports(device_index: int = 0) -> list[dict]:
    return get_runtime().device(device_index).hazard_reports()


def op_names() -> list[str]:
    return registry.op_names()


# -- Tensor method surface -------------------------------------------------------------------


def _install_tensor_methods() -> None:
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(self, other)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__mul__ = lambda self, other: mul(self, other)
    Tensor.__rmul__ = lambda self, other: mul(self, other)
    Tensor.__truediv__ = lambda self, other: div(self, other)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)
    Tensor.backward = lambda self, seed=None: backward(self, seed)
    Tensor.numpy = lambda self: to_numpy(self)
    Tensor.item = lambda self: item(self)
    Tensor.reshape = lambda self, *s: reshape(
        self, s[0] if len(s) == 1 and isinstance(s[0], (tuple, list)) else s)
    Tensor.transpose = lambda self, d0, d1: transpose(self, d0, d1)
    Tensor.sum = lambda self, dims=None: sum(self, dims)
    Tensor.mean = lambda self, dims=None: mean(self, dims)
    Tensor.detach = lambda self: detach(self)
    Tensor.contiguous = lambda self: contiguous(self)
    Tensor.is_contiguous = lambda self: is_contiguous(self)
    Tensor.to = lambda self, dev: to_device(self, parse_device(dev))


_install_tensor_methods()
