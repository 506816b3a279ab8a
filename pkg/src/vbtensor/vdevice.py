"""Deterministic virtual asynchronous device.

Stands in for a GPU runtime at desk scale: per-device FIFO streams, events,
graph capture/replay, and a hazard detector. Commands are enqueued
asynchronously and executed lazily at progress points (synchronize, event
sync, drain) by a seedable scheduler that interleaves runnable streams.
Seed 0 always picks the lowest runnable stream id (the canonical order);
other seeds use a xorshift generator so tests can exercise legal reorderings.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CaptureError, OOMError, StreamError

_MASK64 = (1 << 64) - 1


class _XorShift:
    """Tiny deterministic RNG so scheduler orders are stable across platforms."""

    def __init__(self, seed: int):
        self._s = ((seed ^ 0x9E3779B97F4A7C15) & _MASK64) or 0x243F6A8885A308D3

    def next(self) -> int:
        s = self._s
        s ^= (s << 13) & _MASK64
        s ^= s >> 7
        s ^= (s << 17) & _MASK64
        self._s = s
        return s

    def choice(self, n: int) -> int:
        return self.next() % n


class CommandKind(Enum):
    KERNEL = "kernel"
    COPY = "copy"
    EVENT_RECORD = "event_record"
    EVENT_WAIT = "event_wait"
    ALLOC_MARKER = "alloc_marker"
    FREE_MARKER = "free_marker"


@dataclass(frozen=True)
class BufferAccess:
    """Byte range touched by a command, for hazard tracking."""

    segment_id: int
    start: int
    end: int
    mode: str  # 'r' or 'w'


@dataclass
class DeviceCommand:
    kind: CommandKind
    run: Optional[Callable[[], None]] = None
    accesses: tuple[BufferAccess, ...] = ()
    label: str = ""
    event: Optional["DeviceEvent"] = None
    needed_gen: int = 0  # for EVENT_WAIT
    record_gen: int = 0  # for EVENT_RECORD
    host_sync: bool = False
    copy_kind: str = ""  # 'H2D' | 'D2H' | 'P2P' for COPY commands
    executed_seq: int = -1
    enqueue_clock: Optional[dict] = None  # host-observed progress at enqueue

    def clone(self) -> "DeviceCommand":
        return DeviceCommand(
            kind=self.kind, run=self.run, accesses=self.accesses,
            label=self.label, event=self.event, needed_gen=self.needed_gen,
            record_gen=self.record_gen, host_sync=self.host_sync,
            copy_kind=self.copy_kind,
        )


class DeviceEvent:
    """Event whose completion marks a recorded point on a stream."""

    _next_id = 0

    def __init__(self, device: "VirtDevice"):
        self.id = DeviceEvent._next_id
        DeviceEvent._next_id += 1
        self.device = device
        self.record_gen = 0       # bumped when a record is enqueued
        self.completed_gen = 0    # highest record generation executed
        self.recorded_at: Optional[tuple[int, int]] = None
        self.clock: dict[int, int] = {}

    @property
    def ever_recorded(self) -> bool:
        return self.record_gen > 0

    @property
    def completed(self) -> bool:
        return self.ever_recorded and self.completed_gen >= self.record_gen


class StreamState:
    def __init__(self, device: "VirtDevice", sid: int):
        self.device = device
        self.id = sid
        self.queue: list[DeviceCommand] = []
        self.capture_graph: Optional["CapturedGraph"] = None
        # Vector clock keyed by global (device, stream) keys so event
        # ordering composes across devices (the fabric relies on this).
        self.clock: dict[tuple[int, int], int] = {}
        self.exec_count = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.device.index, self.id)

    def __repr__(self) -> str:
        return f"<stream {self.device.index}:{self.id} depth={len(self.queue)}>"


class CapturedGraph:
    _next_id = 0

    def __init__(self, device: "VirtDevice", pool_id: int):
        self.id = CapturedGraph._next_id
        CapturedGraph._next_id += 1
        self.device = device
        self.pool_id = pool_id
        self.nodes: list[DeviceCommand] = []
        self.destroyed = False
        self.pool_released = False

    def destroy(self) -> None:
        self.destroyed = True
        self.device._graphs.pop(self.id, None)


class HazardDetector:
    """Vector-clock race detector over buffer byte ranges.

    Tracks (a) kernel/copy access to regions freed and not yet reallocated and
    (b) cross-stream conflicting accesses with no event-ordering path. Reports
    are collected, never thrown. A (segment, stream-pair) that already produced
    a report is suppressed afterwards so constructed traces count one hazard
    per missing ordering edge.
    """

    def __init__(self):
        self.enabled = False
        # Entries: (access, global stream key, position in that stream).
        self._history: list[tuple[BufferAccess, tuple[int, int], int]] = []
        self._freed: list[tuple[int, int, int]] = []  # seg, start, end
        self._suppressed: set = set()
        self.reports: list[dict] = []
        # Host-observed progress: completion the host has seen (event query,
        # synchronize) orders everything it enqueues afterwards.
        self.host_clock: dict[tuple[int, int], int] = {}

    def reset(self) -> None:
        self._history.clear()
        self._freed.clear()
        self._suppressed.clear()
        self.reports.clear()
        self.host_clock.clear()

    def host_observes(self, clock: dict) -> None:
        if not self.enabled:
            return
        for key, c in clock.items():
            if self.host_clock.get(key, 0) < c:
                self.host_clock[key] = c

    @staticmethod
    def _overlaps(a_start, a_end, b_start, b_end) -> bool:
        return a_start < b_end and b_start < a_end

    def observe(self, cmd: DeviceCommand, stream: StreamState) -> None:
        if not self.enabled:
            return
        pos = stream.exec_count
        clock = stream.clock
        skey = stream.key
        for acc in cmd.accesses:
            if cmd.kind in (CommandKind.KERNEL, CommandKind.COPY):
                for seg, start, end in self._freed:
                    if seg == acc.segment_id and self._overlaps(start, end, acc.start, acc.end):
                        self.reports.append({
                            "type": "use_after_free",
                            "segment": acc.segment_id,
                            "range": [acc.start, acc.end],
                            "stream": list(skey),
                            "label": cmd.label,
                        })
                        break
            for prev, prev_skey, prev_pos in self._history:
                if prev_skey == skey:
                    continue
                if prev.segment_id != acc.segment_id:
                    continue
                if not self._overlaps(prev.start, prev.end, acc.start, acc.end):
                    continue
                if prev.mode != "w" and acc.mode != "w":
                    continue
                if clock.get(prev_skey, 0) >= prev_pos:
                    continue  # ordered via events
                key = (acc.segment_id, min(prev_skey, skey), max(prev_skey, skey))
                if key in self._suppressed:
                    continue
                self._suppressed.add(key)
                self.reports.append({
                    "type": "unordered_access",
                    "segment": acc.segment_id,
                    "range": [acc.start, acc.end],
                    "streams": [list(prev_skey), list(skey)],
                    "label": cmd.label,
                })
            self._history.append((acc, skey, pos))
        if cmd.kind is CommandKind.FREE_MARKER:
            for acc in cmd.accesses:
                self._freed.append((acc.segment_id, acc.start, acc.end))
        elif cmd.kind is CommandKind.ALLOC_MARKER:
            for acc in cmd.accesses:
                self._freed = [
                    (seg, start, end) for seg, start, end in self._freed
                    if seg != acc.segment_id
                    or not self._overlaps(start, end, acc.start, acc.end)
                ]

    def snapshot(self) -> list[dict]:
        return [dict(r) for r in self.reports]


class VirtDevice:
    """One virtual device: streams, segment memory, scheduler, graphs."""

    _seg_counter = itertools.count()  # segment ids are globally unique

    def __init__(self, index: int, capacity_bytes: int, seed: int,
                 hazard: Optional[HazardDetector] = None):
        self.index = index
        self.capacity_bytes = capacity_bytes
        self.reserved_bytes = 0
        self._lock = threading.RLock()
        self._streams: dict[int, StreamState] = {}
        self._next_stream_id = 0
        self._segments: dict[int, np.ndarray] = {}
        self._graphs: dict[int, CapturedGraph] = {}
        self._rng = _XorShift(seed * 0x10001 + index + 1)
        self._canonical = seed == 0
        self._seq = 0
        self.hazard = hazard if hazard is not None else HazardDetector()
        self.trace: list[tuple[int, int, str]] = []
        self.trace_enabled = False
        self.create_stream()  # stream 0, the default stream

    # -- streams, events ---------------------------------------------------

    @property
    def default_stream(self) -> StreamState:
        return self._streams[0]

    def create_stream(self) -> StreamState:
        with self._lock:
            s = StreamState(self, self._next_stream_id)
            self._next_stream_id += 1
            self._streams[s.id] = s
            return s

    def stream(self, sid: int) -> StreamState:
        try:
            return self._streams[sid]
        except KeyError:
            raise StreamError(f"unknown stream {sid} on virt:{self.index}") from None

    def create_event(self) -> DeviceEvent:
        return DeviceEvent(self)

    # -- memory ------------------------------------------------------------

    def reserve_segment(self, size_bytes: int) -> tuple[int, np.ndarray]:
        """Reserve raw device memory; zero-initialized."""
        with self._lock:
            if self.reserved_bytes + size_bytes > self.capacity_bytes:
                raise OOMError(
                    f"virt:{self.index} capacity exhausted "
                    f"({self.reserved_bytes} + {size_bytes} > {self.capacity_bytes})",
                    requested_bytes=size_bytes,
                )
            seg_id = next(VirtDevice._seg_counter)
            buf = np.zeros(size_bytes, dtype=np.uint8)
            self._segments[seg_id] = buf
            self.reserved_bytes += size_bytes
            return seg_id, buf

    def release_segment(self, seg_id: int) -> None:
        with self._lock:
            buf = self._segments.pop(seg_id)
            self.reserved_bytes -= buf.size

    # -- enqueue -----------------------------------------------------------

    def launch(self, stream: StreamState, cmd: DeviceCommand) -> None:
        with self._lock:
            if stream.capture_graph is not None:
                if cmd.host_sync:
                    raise CaptureError(
                        f"host-sync command {cmd.label!r} during capture on "
                        f"stream {stream.id}"
                    )
                stream.capture_graph.nodes.append(cmd)
                return
            if self.hazard.enabled:
                # Completion the host already observed orders this command.
                cmd.enqueue_clock = dict(self.hazard.host_clock)
            stream.queue.append(cmd)

    def event_record(self, event: DeviceEvent, stream: StreamState) -> None:
        with self._lock:
            event.record_gen += 1
            event.recorded_at = (stream.id, len(stream.queue))
            self.launch(stream, DeviceCommand(
                CommandKind.EVENT_RECORD, event=event,
                record_gen=event.record_gen, label=f"record(e{event.id})",
            ))

    def event_wait(self, event: DeviceEvent, stream: StreamState) -> None:
        with self._lock:
            if not event.ever_recorded:
                raise StreamError(f"wait before record on event {event.id}")
            self.launch(stream, DeviceCommand(
                CommandKind.EVENT_WAIT, event=event,
                needed_gen=event.record_gen, label=f"wait(e{event.id})",
            ))

    def event_query(self, event: DeviceEvent) -> bool:
        if not event.ever_recorded:
            raise StreamError(f"query before record on event {event.id}")
        done = event.completed_gen >= event.record_gen
        if done:
            self.hazard.host_observes(event.clock)
        return done

    # -- scheduler ---------------------------------------------------------

    def _head_runnable(self, s: StreamState) -> bool:
        if not s.queue:
            return False
        head = s.queue[0]
        if head.kind is CommandKind.EVENT_WAIT:
            return head.event.completed_gen >= head.needed_gen
        return True

    def _runnable(self) -> list[StreamState]:
        return [s for s in self._streams.values() if self._head_runnable(s)]

    def _pending(self) -> bool:
        return any(s.queue for s in self._streams.values())

    def _execute(self, stream: StreamState, cmd: DeviceCommand) -> None:
        stream.exec_count += 1
        stream.clock[stream.key] = stream.exec_count
        if cmd.enqueue_clock:
            for key, c in cmd.enqueue_clock.items():
                if stream.clock.get(key, 0) < c:
                    stream.clock[key] = c
        if cmd.kind is CommandKind.EVENT_RECORD:
            cmd.event.completed_gen = max(cmd.event.completed_gen, cmd.record_gen)
            cmd.event.clock = dict(stream.clock)
        elif cmd.kind is CommandKind.EVENT_WAIT:
            for skey, c in cmd.event.clock.items():
                if stream.clock.get(skey, 0) < c:
                    stream.clock[skey] = c
        else:
            self.hazard.observe(cmd, stream)
            if cmd.run is not None:
                cmd.run()
        self._seq += 1
        cmd.executed_seq = self._seq
        if self.trace_enabled:
            self.trace.append((self._seq, stream.id, cmd.label or cmd.kind.value))

    def _try_step(self) -> bool:
        """Execute one runnable command; False when nothing is runnable."""
        runnable = self._runnable()
        if not runnable:
            return False
        runnable.sort(key=lambda s: s.id)
        pick = runnable[0] if (self._canonical or len(runnable) == 1) \
            else runnable[self._rng.choice(len(runnable))]
        self._execute(pick, pick.queue.pop(0))
        return True

    def _step(self) -> None:
        if not self._try_step():
            depths = {s.id: len(s.queue) for s in self._streams.values() if s.queue}
            raise StreamError(
                f"virt:{self.index} deadlock: no runnable stream, pending={depths} "
                f"(cross-device waits need drain_devices)"
            )

    def synchronize(self, stream: Optional[StreamState] = None) -> None:
        with self._lock:
            if stream is not None and stream.capture_graph is not None:
                raise CaptureError("synchronize on a capturing stream")
            if stream is None and any(
                s.capture_graph is not None for s in self._streams.values()
            ):
                raise CaptureError("device synchronize during capture")
            if stream is None:
                while self._pending():
                    self._step()
                for s in self._streams.values():
                    self.hazard.host_observes(s.clock)
            else:
                while stream.queue:
                    self._step()
                self.hazard.host_observes(stream.clock)

    def event_synchronize(self, event: DeviceEvent) -> None:
        if not event.ever_recorded:
            raise StreamError(f"sync before record on event {event.id}")
        with self._lock:
            while not (event.completed_gen >= event.record_gen):
                self._step()
            self.hazard.host_observes(event.clock)

    # -- capture / replay ----------------------------------------------------

    def begin_capture(self, stream: StreamState, pool_id: int) -> CapturedGraph:
        with self._lock:
            if stream.capture_graph is not None:
                raise CaptureError(f"stream {stream.id} is already capturing")
            g = CapturedGraph(self, pool_id)
            stream.capture_graph = g
            self._graphs[g.id] = g
            return g

    def end_capture(self, stream: StreamState) -> CapturedGraph:
        with self._lock:
            g = stream.capture_graph
            if g is None:
                raise CaptureError(f"stream {stream.id} is not capturing")
            stream.capture_graph = None
            return g

    def capture_pool_of(self, stream: StreamState) -> Optional[int]:
        g = stream.capture_graph
        return None if g is None else g.pool_id

    def replay(self, graph: CapturedGraph, stream: StreamState) -> None:
        with self._lock:
            if graph.destroyed:
                raise CaptureError(f"replay of destroyed graph {graph.id}")
            if graph.pool_released:
                raise CaptureError(
                    f"replay of graph {graph.id} whose pool {graph.pool_id} was released"
                )
            for node in graph.nodes:
                self.launch(stream, node.clone())

    def live_graphs_for_pool(self, pool_id: int) -> list[int]:
        return [g.id for g in self._graphs.values() if g.pool_id == pool_id]

    def mark_pool_released(self, pool_id: int) -> None:
        for g in list(self._graphs.values()):
            if g.pool_id == pool_id:
                g.pool_released = True

    # -- diagnostics ---------------------------------------------------------

    def hazard_check_mode(self, enabled: bool) -> None:
        if enabled and not self.hazard.enabled:
            self.hazard.reset()
        self.hazard.enabled = enabled

    def hazard_reports(self) -> list[dict]:
        return self.hazard.snapshot()

    def executed_seq(self) -> int:
        return self._seq


def drain_devices(devices: Sequence["VirtDevice"]) -> None:
    """Drain several devices together, honoring cross-device event waits."""
    while True:
        progressed = False
        pending = False
        for dev in sorted(devices, key=lambda d: d.index):
            with dev._lock:
                while dev._try_step():
                    progressed = True
                if dev._pending():
                    pending = True
        if not pending:
            for dev in devices:
                with dev._lock:
                    for s in dev._streams.values():
                        dev.hazard.host_observes(s.clock)
            return
        if not progressed:
            depths = {d.index: {s.id: len(s.queue)
                                for s in d._streams.values() if s.queue}
                      for d in devices if d._pending()}
            raise StreamError(f"cross-device deadlock, pending={depths}")
