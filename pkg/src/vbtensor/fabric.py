"""Experimental multi-device fabric: peer access, P2P copies, ring allreduce.

The allreduce runs the classic two-phase ring over the virtual devices: N-1
reduce-scatter steps then N-1 allgather steps, each step a P2P chunk copy
executed on the receiver's default stream, ordered by events recorded on the
sender. Chunk boundaries give the first (E mod N) chunks one extra element.
Reduction order per element is fixed by the schedule, so float results are
bitwise reproducible.
"""

from __future__ import annotations

import threading
from typing import Optional

from . import _exec
from .dtypes import virt
from .errors import DeviceError, ShapeError, VbtError
from .runtime import get_runtime, stream_scope
from .storage import Tensor, as_strided, make_tensor
from .vdevice import drain_devices


def chunk_bounds(numel: int, world: int) -> list[tuple[int, int]]:
    """N contiguous ranges; the first (numel mod N) get one extra element."""
    base, extra = divmod(numel, world)
    bounds = []
    start = 0
    for r in range(world):
        size = base + (1 if r < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


class Fabric:
    def __init__(self):
        rt = get_runtime()
        self.world_size = rt.num_devices
        n = self.world_size
        self.peer_matrix = [[i == j for j in range(n)] for i in range(n)]
        self.link_stats: dict[tuple[int, int], dict] = {}
        self.completed_collectives = 0
        self._events: list = []
        self._lock = threading.Lock()

    # -- peer management ------------------------------------------------------

    def enable_peer(self, a: int, b: int) -> None:
        if a == b:
            raise DeviceError(f"cannot peer device {a} with itself")
        rt = get_runtime()
        rt.device(a), rt.device(b)  # validate indices
        self.peer_matrix[a][b] = True
        self.peer_matrix[b][a] = True

    def _check_peer(self, src: int, dst: int) -> None:
        if not self.peer_matrix[src][dst]:
            raise DeviceError(f"p2p access {src}->{dst} is not enabled")

    def _count_link(self, src: int, dst: int, nbytes: int) -> None:
        st = self.link_stats.setdefault((src, dst),
                                        {"bytes_sent": 0, "transfers": 0})
        st["bytes_sent"] += nbytes
        st["transfers"] += 1

    def p2p_copy(self, src: Tensor, dst: Tensor) -> None:
        """Copy src into dst across devices (synchronous).

        The copy runs on dst's current stream, ordered after src's last-use
        stream via an event; both endpoint devices are drained before return
        (the fabric keeps one transfer in flight at a time).
        """
        if not (src.device.is_virt and dst.device.is_virt):
            raise DeviceError("p2p_copy takes VIRT tensors")
        if src.device.index == dst.device.index:
            raise DeviceError("p2p_copy endpoints must be distinct devices")
        self._check_peer(src.device.index, dst.device.index)
        if src.sizes != dst.sizes or src.dtype != dst.dtype:
            raise ShapeError("p2p_copy shape/dtype mismatch")
        rt = get_runtime()
        src_dev = rt.device(src.device.index)
        dst_dev = rt.device(dst.device.index)
        producer = src_dev.stream(src.storage.last_stream or 0)
        consumer = rt.current_stream(dst.device.index)
        e = src_dev.create_event()
        src_dev.event_record(e, producer)
        dst_dev.event_wait(e, consumer)
        self._events.append(e)
        self._p2p_chunk(src, dst, src.device.index, dst.device.index)
        drain_devices([src_dev, dst_dev])

    # -- ring allreduce ----------------------------------------------------------

    def ring_allreduce(self, buffers: list[Tensor], op: str = "sum") -> None:
        with self._lock:
            self._ring_allreduce(buffers, op)
            self.completed_collectives += 1

    def _flat(self, t: Tensor) -> Tensor:
        from .storage import is_contiguous
        if not is_contiguous(t):
            raise ShapeError("ring_allreduce buffers must be contiguous")
        return as_strided(t, (t.numel(),), (1,), t.offset_elems)

    def _ring_allreduce(self, buffers: list[Tensor], op: str) -> None:
        if op != "sum":
            raise VbtError(f"unsupported reduction {op!r} (only 'sum')")
        n = len(buffers)
        if n < 2:
            raise VbtError("ring_allreduce needs at least 2 ranks")
        shape, dtype = buffers[0].sizes, buffers[0].dtype
        for i, t in enumerate(buffers):
            if not t.device.is_virt:
                raise DeviceError(f"rank {i} buffer is not on a VIRT device")
            if t.sizes != shape or t.dtype != dtype:
                raise ShapeError(
                    f"rank {i} buffer mismatch: {t.sizes}/{t.dtype.tag} vs "
                    f"{shape}/{dtype.tag}")
        ranks = [t.device.index for t in buffers]
        if len(set(ranks)) != n:
            raise DeviceError("ring_allreduce needs one buffer per device")
        for r in range(n):
            self._check_peer(ranks[r], ranks[(r + 1) % n])

        rt = get_runtime()
        numel = buffers[0].numel()
        bounds = chunk_bounds(numel, n)
        flats = [self._flat(t) for t in buffers]
        devices = [rt.device(ranks[r]) for r in range(n)]
        streams = [devices[r].default_stream for r in range(n)]
        max_chunk = max(e - b for b, e in bounds) if numel else 0
        recv = [make_tensor((max_chunk,), dtype, virt(ranks[r])) for r in range(n)]

        # ev[r] holds the event recorded after rank r's latest write to its
        # buffer. Initially that is whatever produced the buffer (H2D copies,
        # kernels) on its last-use stream; without this, the first ring step
        # could read a peer buffer before its initialization ran.
        ev: list = []
        for r in range(n):
            dev = devices[r]
            producer = dev.stream(flats[r].storage.last_stream or 0)
            e0 = dev.create_event()
            dev.event_record(e0, producer)
            if producer.id != streams[r].id:
                dev.event_wait(e0, streams[r])
            ev.append(e0)
            self._events.append(e0)

        def chunk_view(r: int, c: int) -> Tensor:
            b, e = bounds[c]
            return as_strided(flats[r], (e - b,), (1,),
                              flats[r].offset_elems + b)

        def recv_view(r: int, size: int) -> Tensor:
            return as_strided(recv[r], (size,), (1,), recv[r].offset_elems)

        steps = 2 * (n - 1)
        for t_step in range(steps):
            reduce_phase = t_step < n - 1
            new_ev = [None] * n
            for r in range(n):
                left = (r - 1) % n
                if reduce_phase:
                    c = (left - t_step) % n
                else:
                    c = (r - (t_step - (n - 1))) % n
                b, e = bounds[c]
                size = e - b
                if size == 0:
                    new_ev[r] = ev[r]
                    continue
                dev, stream = devices[r], streams[r]
                if ev[left] is not None:
                    dev.event_wait(ev[left], stream)
                src_view = chunk_view(left, c)
                with stream_scope(stream):
                    if reduce_phase:
                        dst = recv_view(r, size)
                        self._p2p_chunk(src_view, dst, ranks[left], ranks[r])
                        _exec.elementwise_binary("add", chunk_view(r, c), dst,
                                                 out=chunk_view(r, c),
                                                 allow_alias=True)
                    else:
                        self._p2p_chunk(src_view, chunk_view(r, c),
                                        ranks[left], ranks[r])
                e2 = dev.create_event()
                dev.event_record(e2, stream)
                new_ev[r] = e2
                self._events.append(e2)
            ev = new_ev
        drain_devices(devices)

    def _p2p_chunk(self, src_view: Tensor, dst: Tensor, src_rank: int,
                   dst_rank: int) -> None:
        sview, dview = src_view.ndview(), dst.ndview()

        def body():
            dview[...] = sview

        from .vdevice import CommandKind
        _exec.run_on_device(dst.device, body, reads=[src_view], writes=[dst],
                            label=f"copy:P2P[{src_rank}->{dst_rank}]",
                            kind=CommandKind.COPY, copy_kind="P2P")
        self._count_link(src_rank, dst_rank, src_view.nbytes())

    # -- observability -------------------------------------------------------------

    def snapshot(self) -> dict:
        rt = get_runtime()
        in_flight = 0
        for e in self._events:
            try:
                if not rt.device(e.device.index).event_query(e):
                    in_flight += 1
            except Exception:
                pass
        return {
            "world_size": self.world_size,
            "peer_matrix": [list(row) for row in self.peer_matrix],
            "links": {
                f"{src}->{dst}": dict(stats)
                for (src, dst), stats in sorted(self.link_stats.items())
            },
            "in_flight_events": in_flight,
            "completed_collectives": self.completed_collectives,
        }


_fabric: Optional[Fabric] = None
_fabric_lock = threading.Lock()


def get_fabric(fresh: bool = False) -> Fabric:
    global _fabric
    with _fabric_lock:
        if _fabric is None or fresh \
                or _fabric.world_size != get_runtime().num_devices:
            _fabric = Fabric()
    return _fabric


def _register_fabric_ops() -> None:
    """Dispatcher-visible P2P copy under the multi-device policy."""
    from .dispatch import DevicePolicy, DispatchKey, OpSchemaLite, registry
    if registry.has_op("fabric::p2p_copy_"):
        return
    schema = OpSchemaLite("fabric::p2p_copy_", 2, 1, inplace_alias={0: 0},
                          device_policy=DevicePolicy.FABRIC_MULTI_DEVICE)
    registry.register_op(schema)

    def kernel(args):
        dst, src = args[0], args[1]
        get_fabric().p2p_copy(src, dst)
        return [dst]

    registry.register_kernel("fabric::p2p_copy_", DispatchKey.VIRT_KERNEL,
                             kernel)


_register_fabric_ops()
