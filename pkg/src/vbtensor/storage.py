"""Reference-counted byte storage and strided tensor views.

A Tensor is a (sizes, strides, offset) view over a shared Storage; all views
of one storage family share a single VersionCounter that is bumped exactly
once per in-place mutation, which is what lets autograd detect stale saved
tensors. Host storage is a plain numpy byte buffer; virtual-device storage is
a block handed out by the stream-ordered caching allocator and returned to it
when the last view drops.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided as _np_as_strided

from .dtypes import Device, DType, HOST
from .errors import ShapeError
from .runtime import check_device, get_runtime
from .vdevice import BufferAccess, CommandKind, DeviceCommand


class VersionCounter:
    """Monotone counter shared by every view of one storage family."""

    __slots__ = ("_value", "_lock")

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    @property
    def value(self) -> int:
        return self._value

    def bump(self) -> int:
        with self._lock:
            self._value += 1
            return self._value

    def __repr__(self) -> str:
        return f"VersionCounter({self._value})"


class Storage:
    """Raw byte buffer plus ownership bookkeeping.

    The Python reference count of the Storage object is the storage refcount:
    every Tensor view holds one reference, and the free callback runs exactly
    once when the last one drops.
    """

    def __init__(self, buffer: np.ndarray, device: Device,
                 allocator_origin: str = "system",
                 free_cb: Optional[Callable[[], None]] = None,
                 block=None, segment_id: Optional[int] = None):
        assert buffer.dtype == np.uint8 and buffer.ndim == 1
        self.buffer = buffer
        self.size_bytes = int(buffer.size)
        self.device = device
        self.allocator_origin = allocator_origin
        self.block = block
        self.segment_id = segment_id
        self.last_stream: Optional[int] = None
        self._free_cb = free_cb
        self._freed = False
        self._typed_cache: dict = {}

    def typed(self, np_dtype) -> np.ndarray:
        """Flat view of the buffer as ``np_dtype`` (cached)."""
        key = np.dtype(np_dtype)
        arr = self._typed_cache.get(key)
        if arr is None:
            usable = (self.size_bytes // key.itemsize) * key.itemsize
            arr = self.buffer[:usable].view(key)
            self._typed_cache[key] = arr
        return arr

    def release(self) -> None:
        if self._freed:
            return
        self._freed = True
        if self._free_cb is not None:
            try:
                self._free_cb()
            except Exception:
                pass  # teardown must never raise from __del__

    def __del__(self):
        self.release()


def contiguous_strides(sizes: Sequence[int]) -> tuple[int, ...]:
    """Row-major strides: stride[i] = product of sizes[i+1:]."""
    strides = [0] * len(sizes)
    acc = 1
    for i in range(len(sizes) - 1, -1, -1):
        strides[i] = acc
        acc *= sizes[i]
    return tuple(strides)


def required_span_elems(sizes: Sequence[int], strides: Sequence[int], offset: int) -> int:
    """One past the highest element index reachable by the view (0 if empty)."""
    if any(s == 0 for s in sizes):
        return 0
    return offset + sum((s - 1) * st for s, st in zip(sizes, strides)) + 1


class Tensor:
    __slots__ = ("storage", "offset_elems", "sizes", "strides", "dtype",
                 "device", "version", "autograd_meta", "__weakref__")

    def __init__(self, storage: Storage, offset_elems: int,
                 sizes: Sequence[int], strides: Sequence[int],
                 dtype: DType, version: Optional[VersionCounter] = None):
        sizes = tuple(int(s) for s in sizes)
        strides = tuple(int(s) for s in strides)
        if len(sizes) != len(strides):
            raise ShapeError(f"sizes/strides rank mismatch: {sizes} vs {strides}")
        if any(s < 0 for s in sizes):
            raise ShapeError(f"negative size in {sizes}")
        if any(s < 0 for s in strides):
            raise ShapeError(f"negative stride in {strides} (not supported)")
        if offset_elems < 0:
            raise ShapeError("negative storage offset")
        capacity = storage.size_bytes // dtype.size_bytes
        if required_span_elems(sizes, strides, offset_elems) > capacity:
            raise ShapeError(
                f"view out of bounds: sizes={sizes} strides={strides} "
                f"offset={offset_elems} capacity={capacity} elems")
        self.storage = storage
        self.offset_elems = int(offset_elems)
        self.sizes = sizes
        self.strides = strides
        self.dtype = dtype
        self.device = storage.device
        self.version = version if version is not None else VersionCounter()
        self.autograd_meta = None

    # -- basic geometry -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sizes

    @property
    def ndim(self) -> int:
        return len(self.sizes)

    def numel(self) -> int:
        return int(math.prod(self.sizes))

    def nbytes(self) -> int:
        return self.numel() * self.dtype.size_bytes

    def ndview(self) -> np.ndarray:
        """Strided numpy view over this tensor's elements (zero copy)."""
        base = self.storage.typed(self.dtype.np)
        itemsize = self.dtype.np.itemsize
        return _np_as_strided(
            base[self.offset_elems:], shape=self.sizes,
            strides=tuple(s * itemsize for s in self.strides), writeable=True)

    def kernel_spec(self):
        """(base, offset, shape, strides) tuple for the kernel backends."""
        return (self.storage.typed(self.dtype.np), self.offset_elems,
                self.sizes, self.strides)

    def byte_range(self) -> tuple[int, int]:
        """Conservative [min, max) byte interval reachable by this view."""
        if self.numel() == 0:
            start = self.offset_elems * self.dtype.size_bytes
            return (start, start)
        lo = self.offset_elems
        hi = required_span_elems(self.sizes, self.strides, self.offset_elems)
        return (lo * self.dtype.size_bytes, hi * self.dtype.size_bytes)

    def accesses(self, mode: str) -> tuple[BufferAccess, ...]:
        """Hazard-tracking accesses for virtual-device commands."""
        if self.storage.segment_id is None:
            return ()
        lo, hi = self.byte_range()
        off = self.storage.block.offset if self.storage.block is not None else 0
        return (BufferAccess(self.storage.segment_id, off + lo, off + hi, mode),)

    # -- autograd surface (populated by the autograd module) ------------------

    @property
    def requires_grad(self) -> bool:
        meta = self.autograd_meta
        return bool(meta is not None and meta.requires_grad)

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        from .autograd import ensure_meta
        from .errors import DTypeError
        if value and not self.dtype.is_float:
            raise DTypeError(
                f"only float tensors can require gradients, got {self.dtype.tag}")
        ensure_meta(self).requires_grad = bool(value)

    @property
    def grad(self) -> Optional["Tensor"]:
        meta = self.autograd_meta
        return None if meta is None else meta.grad

    @grad.setter
    def grad(self, value: Optional["Tensor"]) -> None:
        from .autograd import ensure_meta
        ensure_meta(self).grad = value

    @property
    def grad_fn(self):
        meta = self.autograd_meta
        return None if meta is None else meta.grad_fn

    @property
    def is_leaf(self) -> bool:
        return self.grad_fn is None

    def __repr__(self) -> str:
        return (f"Tensor(sizes={list(self.sizes)}, dtype={self.dtype.tag}, "
                f"device={self.device!r}, version={self.version.value})")


def _host_storage(nbytes: int, free_cb=None) -> Storage:
    return Storage(np.zeros(nbytes, dtype=np.uint8), HOST, "system", free_cb=free_cb)


def _virt_storage(nbytes: int, device: Device, stream=None) -> Storage:
    rt = get_runtime()
    alloc = rt.allocator(device.index)
    if stream is None:
        stream = rt.current_stream(device.index)
    # Zero-size tensors get a 1-byte block so every storage has an address.
    block = alloc.allocate(max(nbytes, 1), stream.id)
    seg_buf = block.segment.buffer
    view = seg_buf[block.offset:block.offset + block.size]
    storage = Storage(view, device, "caching",
                      free_cb=None, block=block, segment_id=block.segment.handle)
    storage.last_stream = stream.id

    def _free():
        try:
            alloc.free(block, storage.last_stream)
        except Exception:
            pass

    storage._free_cb = _free
    return storage


def make_tensor(sizes: Sequence[int], dtype: DType, device: Device = HOST,
                *, _host_free_cb=None) -> Tensor:
    """Fresh contiguous zero-initialized tensor."""
    sizes = tuple(int(s) for s in sizes)
    if any(s < 0 for s in sizes):
        raise ShapeError(f"negative size in {sizes}")
    check_device(device)
    numel = math.prod(sizes)
    nbytes = numel * dtype.size_bytes
    if device.is_host:
        storage = _host_storage(nbytes, free_cb=_host_free_cb)
        return Tensor(storage, 0, sizes, contiguous_strides(sizes), dtype)
    storage = _virt_storage(nbytes, device)
    t = Tensor(storage, 0, sizes, contiguous_strides(sizes), dtype)
    if numel:
        _enqueue_zero_fill(t)
    return t


def _enqueue_zero_fill(t: Tensor) -> None:
    rt = get_runtime()
    dev = rt.device(t.device.index)
    stream = rt.current_stream(t.device.index)
    view = t.ndview()
    dev.launch(stream, DeviceCommand(
        CommandKind.KERNEL, run=lambda: view.fill(0),
        accesses=t.accesses("w"), label="zero_fill"))
    t.storage.last_stream = stream.id


def as_strided(t: Tensor, sizes: Sequence[int], strides: Sequence[int],
               offset_elems: int = 0) -> Tensor:
    """New view sharing storage and version counter; no data copy."""
    return Tensor(t.storage, offset_elems, sizes, strides, t.dtype,
                  version=t.version)


def is_contiguous(t: Tensor) -> bool:
    """True iff strides are canonical row-major, ignoring size-1 dims."""
    if t.numel() == 0:
        return True
    expected = 1
    for size, stride in zip(reversed(t.sizes), reversed(t.strides)):
        if size == 1:
            continue
        if stride != expected:
            return False
        expected *= size
    return True


def bump_version(t: Tensor) -> int:
    """Record one in-place mutation; all views of the family observe it."""
    return t.version.bump()
