"""Shared iteration engine for elementwise and reduction kernels.

Computes the broadcast common shape, per-operand element strides (0 on
broadcast dims), and a dimension-coalesced traversal that kernels and the
plugin bridge drive. Outputs never broadcast; mixed dtypes are rejected
(the dispatcher carries no promotion rules).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .errors import DeviceError, DTypeError, OverlapError, ShapeError
from .storage import Tensor


class Overlap(Enum):
    DISJOINT = "disjoint"
    EXACT_ALIAS = "exact_alias"
    PARTIAL = "partial"


@dataclass
class OperandSpec:
    tensor: Tensor
    is_output: bool = False
    allow_inplace_alias: bool = False


@dataclass
class IterPlan:
    common_shape: tuple[int, ...]
    per_operand_strides: list[tuple[int, ...]]
    coalesced_shape: tuple[int, ...]
    coalesced_strides: list[tuple[int, ...]]
    reduction_dims: frozenset[int]
    operands: list[Tensor] = field(default_factory=list)

    def numel(self) -> int:
        return int(math.prod(self.common_shape))


def _abs_byte_interval(t: Tensor) -> tuple[int, int]:
    """Absolute [start, end) bytes of the view in process address space."""
    base = t.storage.buffer.__array_interface__["data"][0]
    lo, hi = t.byte_range()
    return (base + lo, base + hi)


def check_overlap(a: Tensor, b: Tensor) -> Overlap:
    """Conservative aliasing classification.

    Exact alias requires identical storage bytes and geometry; otherwise byte
    intervals decide (false "partial" positives allowed, false negatives not).
    """
    a_lo, a_hi = _abs_byte_interval(a)
    b_lo, b_hi = _abs_byte_interval(b)
    same_bytes = (a.storage.buffer.__array_interface__["data"][0]
                  == b.storage.buffer.__array_interface__["data"][0])
    if (same_bytes and a.offset_elems == b.offset_elems
            and a.sizes == b.sizes and a.strides == b.strides
            and a.dtype == b.dtype):
        return Overlap.EXACT_ALIAS
    if a_lo < b_hi and b_lo < a_hi:
        return Overlap.PARTIAL
    return Overlap.DISJOINT


def broadcast_shapes(shapes: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    """Trailing-aligned broadcast; size-1 and missing leading dims stretch."""
    ndim = max((len(s) for s in shapes), default=0)
    out = [1] * ndim
    for shape in shapes:
        pad = ndim - len(shape)
        for i, s in enumerate(shape):
            d = pad + i
            if out[d] == 1:
                out[d] = s
            elif s != 1 and s != out[d]:
                raise ShapeError(f"cannot broadcast {shapes}: dim {d} "
                                 f"has sizes {out[d]} and {s}")
    return tuple(out)


def _aligned_strides(t: Tensor, common: tuple[int, ...],
                     *, is_output: bool,
                     reduction_dims: frozenset[int]) -> tuple[int, ...]:
    ndim = len(common)
    pad = ndim - t.ndim
    if is_output and pad != 0:
        raise ShapeError(
            f"output shape {t.sizes} must exactly match common shape "
            f"{common} (outputs never broadcast)")
    out = [0] * ndim
    for d in range(ndim):
        if d < pad:
            size, stride = 1, 0
        else:
            size, stride = t.sizes[d - pad], t.strides[d - pad]
        if is_output:
            if d in reduction_dims:
                if size != 1:
                    raise ShapeError(
                        f"output size {size} at reduction dim {d} must be 1")
                out[d] = 0
                continue
            if size != common[d]:
                raise ShapeError(
                    f"output shape {t.sizes} must exactly match common shape "
                    f"{common} (outputs never broadcast)")
            out[d] = stride
        else:
            if size == common[d]:
                out[d] = stride if size != 1 else 0
            elif size == 1:
                out[d] = 0
            else:
                raise ShapeError(
                    f"operand shape {t.sizes} does not broadcast to {common}")
    return tuple(out)


def _coalesce(shape: tuple[int, ...],
              strides: list[tuple[int, ...]]) -> tuple[tuple[int, ...], list[tuple[int, ...]]]:
    nops = len(strides)
    dims = [(shape[d], [st[d] for st in strides])
            for d in range(len(shape)) if shape[d] != 1]
    if not dims:
        return (), [() for _ in range(nops)]
    merged = [dims[0]]
    for size, sts in dims[1:]:
        prev_size, prev_sts = merged[-1]
        if all(p == s * size for p, s in zip(prev_sts, sts)):
            merged[-1] = (prev_size * size, sts)
        else:
            merged.append((size, sts))
    out_shape = tuple(m[0] for m in merged)
    out_strides = [tuple(m[1][k] for m in merged) for k in range(nops)]
    return out_shape, out_strides


def build_iter(operands: Sequence[OperandSpec],
               reduction_dims: Sequence[int] = ()) -> IterPlan:
    if not operands:
        raise ShapeError("build_iter needs at least one operand")
    device = operands[0].tensor.device
    dtype = operands[0].tensor.dtype
    for spec in operands[1:]:
        if spec.tensor.device != device:
            raise DeviceError(
                f"iterator operands span devices {device!r} and "
                f"{spec.tensor.device!r}")
        if spec.tensor.dtype != dtype:
            raise DTypeError(
                f"iterator operands mix dtypes {dtype.tag} and "
                f"{spec.tensor.dtype.tag} (no implicit promotion)")

    outputs = [s for s in operands if s.is_output]
    # All operands participate in shape inference; outputs must then match
    # the result exactly (outputs never broadcast).
    common = broadcast_shapes([s.tensor.sizes for s in operands])
    reduction = frozenset(int(d) for d in reduction_dims)
    for d in reduction:
        if not (0 <= d < len(common)):
            raise ShapeError(f"reduction dim {d} out of range for {common}")

    strides = [
        _aligned_strides(s.tensor, common, is_output=s.is_output,
                         reduction_dims=reduction)
        for s in operands
    ]

    # Aliasing rules: partial overlap always rejected; exact aliasing only
    # when the output declares allow_inplace_alias.
    for out_spec in outputs:
        for in_spec in operands:
            if in_spec.is_output:
                continue
            ov = check_overlap(out_spec.tensor, in_spec.tensor)
            if ov is Overlap.PARTIAL:
                raise OverlapError(
                    "output partially overlaps an input; copy first")
            if ov is Overlap.EXACT_ALIAS and not out_spec.allow_inplace_alias:
                raise OverlapError(
                    "output aliases an input but allow_inplace_alias is false")

    if reduction:
        co_shape, co_strides = common, strides
    else:
        co_shape, co_strides = _coalesce(common, strides)
    return IterPlan(
        common_shape=common, per_operand_strides=strides,
        coalesced_shape=co_shape, coalesced_strides=co_strides,
        reduction_dims=reduction, operands=[s.tensor for s in operands])


def for_each(plan: IterPlan, body: Callable[[tuple[int, ...]], None]) -> None:
    """Invoke ``body(offsets)`` once per logical element, row-major.

    ``offsets[k]`` is the element index into operand k's flat typed storage
    (already including the tensor's storage offset).
    """
    shape = plan.coalesced_shape
    total = int(math.prod(shape))
    if total == 0:
        return
    nops = len(plan.operands)
    offsets = [t.offset_elems for t in plan.operands]
    if not shape:
        body(tuple(offsets))
        return
    ndim = len(shape)
    idx = [0] * ndim
    strides = plan.coalesced_strides
    for _ in range(total):
        body(tuple(offsets))
        for d in range(ndim - 1, -1, -1):
            idx[d] += 1
            for k in range(nops):
                offsets[k] += strides[k][d]
            if idx[d] < shape[d]:
                break
            idx[d] = 0
            for k in range(nops):
                offsets[k] -= strides[k][d] * shape[d]
