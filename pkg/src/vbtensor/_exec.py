"""Device-aware kernel execution helpers.

Every helper runs its body immediately for host tensors and enqueues a
command on the current stream for virtual-device tensors. Bodies only touch
tensor element views (no host-side decisions), so the same closure serves
eager execution, stream replay, and graph capture.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend as backend
from .dtypes import Device, DType, HOST
from .errors import DTypeError, ShapeError
from .iterator import IterPlan, OperandSpec, build_iter
from .runtime import get_runtime
from .storage import Tensor, make_tensor
from .vdevice import CommandKind, DeviceCommand


def run_on_device(device: Device, fn: Callable[[], None], *,
                  reads: Sequence[Tensor] = (), writes: Sequence[Tensor] = (),
                  label: str = "kernel", kind: CommandKind = CommandKind.KERNEL,
                  copy_kind: str = "", stream=None) -> None:
    """Run ``fn`` now (host) or enqueue it on the device's current stream."""
    if device.is_host:
        fn()
        return
    rt = get_runtime()
    dev = rt.device(device.index)
    if stream is None:
        stream = rt.current_stream(device.index)
    accesses = []
    for t in reads:
        accesses.extend(t.accesses("r"))
    for t in writes:
        accesses.extend(t.accesses("w"))
    dev.launch(stream, DeviceCommand(
        kind, run=fn, accesses=tuple(accesses), label=label, copy_kind=copy_kind))
    for t in (*reads, *writes):
        if t.device.is_virt and t.device.index == device.index:
            t.storage.last_stream = stream.id


def _spec_for_backend(base, offset, shape, strides, dtype: DType):
    if dtype is DType.BOOL:
        base = base.view(np.uint8)
    return (base, offset, shape, strides)


def _plan_specs(plan: IterPlan):
    return [
        _spec_for_backend(t.storage.typed(t.dtype.np), t.offset_elems,
                          plan.coalesced_shape, plan.coalesced_strides[k],
                          t.dtype)
        for k, t in enumerate(plan.operands)
    ]


def elementwise_binary(op: str, a: Tensor, b: Tensor,
                       out: Optional[Tensor] = None,
                       allow_alias: bool = False) -> Tensor:
    if out is None:
        from .iterator import broadcast_shapes
        out = make_tensor(broadcast_shapes([a.sizes, b.sizes]), a.dtype, a.device)
        allow_alias = False
    plan = build_iter([
        OperandSpec(out, is_output=True, allow_inplace_alias=allow_alias),
        OperandSpec(a), OperandSpec(b),
    ])
    specs = _plan_specs(plan)

    def body():
        backend.binary(op, specs[0], specs[1], specs[2])

    run_on_device(out.device, body, reads=[a, b], writes=[out], label=f"vt::{op}")
    return out


def elementwise_unary(op: str, a: Tensor, out: Optional[Tensor] = None,
                      allow_alias: bool = False) -> Tensor:
    if out is None:
        out = make_tensor(a.sizes, a.dtype, a.device)
    plan = build_iter([
        OperandSpec(out, is_output=True, allow_inplace_alias=allow_alias),
        OperandSpec(a),
    ])
    specs = _plan_specs(plan)

    def body():
        backend.unary(op, specs[0], specs[1])

    run_on_device(out.device, body, reads=[a], writes=[out], label=f"vt::{op}")
    return out


def scalar_binary(op: str, a: Tensor, scalar: float,
                  out: Optional[Tensor] = None, allow_alias: bool = False) -> Tensor:
    """Elementwise ``out = a <op> scalar`` via a stride-0 immediate operand."""
    if out is None:
        out = make_tensor(a.sizes, a.dtype, a.device)
    plan = build_iter([
        OperandSpec(out, is_output=True, allow_inplace_alias=allow_alias),
        OperandSpec(a),
    ])
    specs = _plan_specs(plan)
    imm = np.full(1, scalar, dtype=a.dtype.np)
    imm_spec = _spec_for_backend(
        imm, 0, plan.coalesced_shape, tuple(0 for _ in plan.coalesced_shape),
        a.dtype)

    def body():
        backend.binary(op, specs[0], specs[1], imm_spec)

    run_on_device(out.device, body, reads=[a], writes=[out], label=f"vt::{op}s")
    return out


def fill_(t: Tensor, value) -> Tensor:
    spec = _spec_for_backend(t.storage.typed(t.dtype.np), t.offset_elems,
                             t.sizes, t.strides, t.dtype)
    v = t.dtype.np.type(value)

    def body():
        backend.fill(spec, v)

    run_on_device(t.device, body, writes=[t], label="vt::fill_")
    return t


def copy_into(dst: Tensor, src: Tensor, allow_alias: bool = True) -> Tensor:
    """dst <- src (same dtype, src broadcastable to dst shape)."""
    if dst.dtype != src.dtype:
        raise DTypeError(f"copy dtype mismatch {dst.dtype.tag} vs {src.dtype.tag}")
    plan = build_iter([
        OperandSpec(dst, is_output=True, allow_inplace_alias=allow_alias),
        OperandSpec(src),
    ])
    specs = _plan_specs(plan)

    def body():
        backend.copy(specs[0], specs[1])

    run_on_device(dst.device, body, reads=[src], writes=[dst], label="vt::copy_")
    return dst


def reduce_sum_keepdim(a: Tensor, dims: Sequence[int],
                       out: Optional[Tensor] = None) -> Tensor:
    """Sum over ``dims``; result keeps reduced dims with size 1."""
    dims = sorted(set(int(d) for d in dims))
    for d in dims:
        if not (0 <= d < a.ndim):
            raise ShapeError(f"reduction dim {d} out of range for {a.sizes}")
    out_sizes = tuple(1 if d in dims else s for d, s in enumerate(a.sizes))
    if out is None:
        out = make_tensor(out_sizes, a.dtype, a.device)
    elif out.sizes != out_sizes:
        raise ShapeError(f"reduction output shape {out.sizes} != {out_sizes}")
    plan = build_iter(
        [OperandSpec(out, is_output=True), OperandSpec(a)],
        reduction_dims=dims)
    out_spec = _spec_for_backend(out.storage.typed(out.dtype.np),
                                 out.offset_elems, plan.common_shape,
                                 plan.per_operand_strides[0], out.dtype)
    in_spec = _spec_for_backend(a.storage.typed(a.dtype.np), a.offset_elems,
                                plan.common_shape, plan.per_operand_strides[1],
                                a.dtype)

    def body():
        backend.reduce_sum(out_spec, in_spec, tuple(dims))

    run_on_device(out.device, body, reads=[a], writes=[out], label="vt::sum")
    return out


def custom(fn: Callable[..., None], *, reads: Sequence[Tensor] = (),
           writes: Sequence[Tensor] = (), label: str = "custom") -> None:
    """Run a composite numpy kernel over the operands' element views.

    ``fn`` receives the write views followed by the read views.
    """
    views = [t.ndview() for t in writes] + [t.ndview() for t in reads]
    device = writes[0].device if writes else reads[0].device

    def body():
        fn(*views)

    run_on_device(device, body, reads=reads, writes=writes, label=label)


def adam_update(p: Tensor, g: Tensor, m: Tensor, v: Tensor, *, lr: float,
                beta1: float, beta2: float, eps: float, step: int) -> None:
    if not (p.sizes == g.sizes == m.sizes == v.sizes):
        raise ShapeError("adam_step operands must share one shape")
    specs = [
        _spec_for_backend(t.storage.typed(t.dtype.np), t.offset_elems,
                          t.sizes, t.strides, t.dtype)
        for t in (p, g, m, v)
    ]
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step

    def body():
        backend.adam_step(specs[0], specs[1], specs[2], specs[3],
                          lr, beta1, beta2, eps, bias1, bias2)

    run_on_device(p.device, body, reads=[g], writes=[p, m, v],
                  label="vt::adam_step")


# -- host <-> numpy -----------------------------------------------------------------


def from_numpy(arr: np.ndarray, dtype: Optional[DType] = None,
               device: Device = HOST) -> Tensor:
    from .dtypes import dtype_from_numpy
    arr = np.asarray(arr)
    if dtype is None:
        dtype = dtype_from_numpy(arr.dtype)
    t = make_tensor(arr.shape, dtype, device)
    src = np.ascontiguousarray(arr.astype(dtype.np, copy=False))
    view = t.ndview()

    def body():
        view[...] = src

    run_on_device(device, body, writes=[t],
                  label="copy:H2D" if device.is_virt else "copy",
                  kind=CommandKind.COPY if device.is_virt else CommandKind.KERNEL,
                  copy_kind="H2D" if device.is_virt else "")
    return t


def to_numpy(t: Tensor) -> np.ndarray:
    """Materialize tensor contents on the host (synchronizes VIRT devices).

    The copy is enqueued on the tensor's last-use stream so it observes the
    producing kernel without needing a caller-provided event.
    """
    if t.device.is_host:
        return np.array(t.ndview(), copy=True)
    rt = get_runtime()
    dev = rt.device(t.device.index)
    stream = dev.stream(t.storage.last_stream or 0)
    out = np.empty(t.sizes, dtype=t.dtype.np)
    view = t.ndview()

    def body():
        out[...] = view

    run_on_device(t.device, body, reads=[t], label="copy:D2H",
                  kind=CommandKind.COPY, copy_kind="D2H", stream=stream)
    dev.synchronize(stream)
    return out


def to_device(t: Tensor, device: Device) -> Tensor:
    if t.device == device:
        return t
    if t.device.is_virt and device.is_virt:
        # Cross-device moves in the overlay stage through the host; direct
        # P2P copies are the fabric module's job.
        return from_numpy(to_numpy(t), t.dtype, device)
    if device.is_virt:
        return from_numpy(to_numpy(t), t.dtype, device)
    return from_numpy(to_numpy(t), t.dtype, HOST)


def item(t: Tensor) -> float:
    if t.numel() != 1:
        raise ShapeError(f"item() on tensor with {t.numel()} elements")
    return to_numpy(t).reshape(())[()]
