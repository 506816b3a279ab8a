"""Process-wide runtime state: virtual devices, their allocators, streams.

Configured by environment variables:
  VBT_VIRT_DEVICES   number of virtual devices (default 4)
  VBT_VIRT_SEED      scheduler seed (default 0, the canonical order)
  VBT_VIRT_CAPACITY  per-device capacity in bytes (default 64 MiB)
"""

from __future__ import annotations

import os
import threading
from typing import Optional

from .allocator import CachingAllocator, EventSource, MemorySource
from .dtypes import Device
from .errors import DeviceError
from .vdevice import (BufferAccess, CommandKind, DeviceCommand, HazardDetector,
                      StreamState, VirtDevice)

DEFAULT_CAPACITY = 64 << 20


class _DeviceMemory(MemorySource):
    def __init__(self, device: VirtDevice):
        self.device = device

    def reserve(self, size_bytes: int):
        return self.device.reserve_segment(size_bytes)

    def release(self, handle) -> None:
        self.device.release_segment(handle)

    def available_bytes(self) -> int:
        return self.device.capacity_bytes - self.device.reserved_bytes

    def live_graphs(self, pool_id: int) -> list:
        return self.device.live_graphs_for_pool(pool_id)


class _DeviceEvents(EventSource):
    def __init__(self, device: VirtDevice):
        self.device = device

    def record(self, stream_id: int):
        e = self.device.create_event()
        self.device.event_record(e, self.device.stream(stream_id))
        return e

    def is_complete(self, handle) -> bool:
        return self.device.event_query(handle)

    def synchronize(self) -> None:
        self.device.synchronize()


class Runtime:
    def __init__(self, num_devices: Optional[int] = None, seed: Optional[int] = None,
                 capacity_bytes: Optional[int] = None):
        if num_devices is None:
            num_devices = int(os.environ.get("VBT_VIRT_DEVICES", "4"))
        if seed is None:
            seed = int(os.environ.get("VBT_VIRT_SEED", "0"))
        if capacity_bytes is None:
            capacity_bytes = int(os.environ.get("VBT_VIRT_CAPACITY", str(DEFAULT_CAPACITY)))
        self.num_devices = num_devices
        self.seed = seed
        # One detector shared by all devices so cross-device accesses
        # (fabric P2P) are checked against a single happens-before history.
        self.hazard = HazardDetector()
        self.devices = [VirtDevice(i, capacity_bytes, seed, hazard=self.hazard)
                        for i in range(num_devices)]
        self.allocators = [self._make_allocator(d) for d in self.devices]
        self._tls = threading.local()

    def _make_allocator(self, device: VirtDevice) -> CachingAllocator:
        def on_alloc(block, stream_id):
            device.launch(device.stream(stream_id), DeviceCommand(
                CommandKind.ALLOC_MARKER,
                accesses=(BufferAccess(block.segment.handle, block.offset,
                                       block.offset + block.size, "w"),),
                label=f"alloc[{block.offset}:{block.offset + block.size}]",
            ))

        def on_free(block, stream_id):
            device.launch(device.stream(stream_id), DeviceCommand(
                CommandKind.FREE_MARKER,
                accesses=(BufferAccess(block.segment.handle, block.offset,
                                       block.offset + block.size, "w"),),
                label=f"free[{block.offset}:{block.offset + block.size}]",
            ))

        return CachingAllocator(
            device.index, device.capacity_bytes,
            memory=_DeviceMemory(device), events=_DeviceEvents(device),
            on_alloc=on_alloc, on_free=on_free,
            capture_pool_fn=lambda sid: device.capture_pool_of(device.stream(sid)),
        )

    # -- stream context --------------------------------------------------------

    def _current_map(self) -> dict:
        m = getattr(self._tls, "streams", None)
        if m is None:
            m = {}
            self._tls.streams = m
        return m

    def current_stream(self, device_index: int) -> StreamState:
        sid = self._current_map().get(device_index, 0)
        return self.devices[device_index].stream(sid)

    def set_current_stream(self, device_index: int, stream: StreamState) -> None:
        self._current_map()[device_index] = stream.id

    def device(self, index: int) -> VirtDevice:
        try:
            return self.devices[index]
        except IndexError:
            raise DeviceError(
                f"virt device index {index} out of range "
                f"(configured {self.num_devices})") from None

    def allocator(self, index: int) -> CachingAllocator:
        self.device(index)
        return self.allocators[index]


_runtime: Optional[Runtime] = None
_runtime_lock = threading.Lock()


def get_runtime() -> Runtime:
    global _runtime
    if _runtime is None:
        with _runtime_lock:
            if _runtime is None:
                _runtime = Runtime()
    return _runtime


def reset_runtime(**kwargs) -> Runtime:
    """Replace the global runtime (tests use this for isolation)."""
    global _runtime
    with _runtime_lock:
        _runtime = Runtime(**kwargs)
    return _runtime


def check_device(device: Device) -> Device:
    if device.is_virt:
        get_runtime().device(device.index)
    return device


class stream_scope:
    """Context manager making ``stream`` current for its device."""

    def __init__(self, stream: StreamState):
        self.stream = stream
        self._prev: Optional[int] = None

    def __enter__(self):
        rt = get_runtime()
        dev = self.stream.device.index
        self._prev = rt._current_map().get(dev, 0)
        rt._current_map()[dev] = self.stream.id
        return self.stream

    def __exit__(self, *exc):
        rt = get_runtime()
        rt._current_map()[self.stream.device.index] = self._prev
        return False
