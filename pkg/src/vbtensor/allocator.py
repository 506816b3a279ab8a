"""Stream-ordered caching allocator with diagnostics.

Blocks are carved out of reserved segments (small pool: 2 MiB segments for
requests <= 1 MiB after rounding; large pool: segments rounded up to 20 MiB
multiples; graph pools: segments tagged to a capture pool). A freed block is
immediately reusable on its free stream; reuse on any other stream is gated on
completion of the event recorded at free time. Reclamation escalates through a
three-rung GC ladder before OOM.

The allocator is written against two small adapters (memory + events) so the
same decision rules run identically over the real virtual device and over the
scripted harness the reference-simulator tests use.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

from .errors import AllocatorError, OOMError

ROUND_BYTES = 512
SMALL_LIMIT = 1 << 20        # requests <= 1 MiB go to the small pool
SMALL_SEGMENT = 2 << 20      # small-pool segments are exactly 2 MiB
LARGE_CHUNK = 20 << 20       # large-pool segments round up to 20 MiB multiples


def round_size(size: int) -> int:
    return max(ROUND_BYTES, ((size + ROUND_BYTES - 1) // ROUND_BYTES) * ROUND_BYTES)


def segment_size_for(rounded: int) -> int:
    if rounded <= SMALL_LIMIT:
        return SMALL_SEGMENT
    return ((rounded + LARGE_CHUNK - 1) // LARGE_CHUNK) * LARGE_CHUNK


class MemorySource:
    """Raw device memory: reserve/release whole segments."""

    def reserve(self, size_bytes: int):  # -> (handle, buffer-or-None)
        raise NotImplementedError

    def release(self, handle) -> None:
        raise NotImplementedError

    def available_bytes(self) -> int:
        raise NotImplementedError

    def live_graphs(self, pool_id: int) -> list:
        return []


class EventSource:
    """Completion events guarding cross-stream reuse of freed blocks."""

    def record(self, stream_id: int):
        raise NotImplementedError

    def is_complete(self, handle) -> bool:
        raise NotImplementedError

    def synchronize(self) -> None:
        raise NotImplementedError


class Block:
    __slots__ = ("segment", "offset", "size", "state", "alloc_stream",
                 "free_stream", "pending_events", "prev", "next")

    def __init__(self, segment: "Segment", offset: int, size: int):
        self.segment = segment
        self.offset = offset
        self.size = size
        self.state = "free"
        self.alloc_stream: int = -1
        self.free_stream: int = -1
        self.pending_events: list = []
        self.prev: Optional[Block] = None
        self.next: Optional[Block] = None

    def spans_segment(self) -> bool:
        return self.prev is None and self.next is None

    def __repr__(self) -> str:
        return (f"<block seg={self.segment.seq} off={self.offset} "
                f"size={self.size} {self.state}>")


class Segment:
    __slots__ = ("seq", "handle", "buffer", "size", "pool_key", "first")

    def __init__(self, seq: int, handle, buffer, size: int, pool_key):
        self.seq = seq            # allocator-local id: creation order
        self.handle = handle      # memory-source handle
        self.buffer = buffer      # numpy uint8 view or None (scripted)
        self.size = size
        self.pool_key = pool_key  # 'small' | 'large' | ('graph', pool_id)
        self.first = Block(self, 0, size)

    def blocks(self):
        b = self.first
        while b is not None:
            yield b
            b = b.next

    def pool_tag(self) -> str:
        if isinstance(self.pool_key, tuple):
            return f"graph:{self.pool_key[1]}"
        return self.pool_key


class CachingAllocator:
    def __init__(self, device_index: int, capacity_bytes: int,
                 memory: MemorySource, events: EventSource,
                 on_alloc: Optional[Callable] = None,
                 on_free: Optional[Callable] = None,
                 capture_pool_fn: Optional[Callable[[int], Optional[int]]] = None):
        self.device_index = device_index
        self.capacity_bytes = capacity_bytes
        self.memory = memory
        self.events = events
        self.on_alloc = on_alloc
        self.on_free = on_free
        self.capture_pool_fn = capture_pool_fn
        self._lock = threading.RLock()
        self._segments: list[Segment] = []
        self._next_seq = 0
        self._graph_pools: dict[int, dict] = {}
        self._next_pool_id = 0
        self.cap_bytes = capacity_bytes
        self._fraction = 1.0
        self._s_alloc_current = 0
        self._s_alloc_peak = 0
        self._s_alloc_total = 0
        self._s_freed_total = 0
        self._s_reserved_current = 0
        self._s_reserved_peak = 0
        self._s_active_blocks = 0
        self._s_num_retries = 0
        self._s_num_ooms = 0
        self._s_num_gc = 0

    # -- event helpers -------------------------------------------------------

    def _purge_events(self, block: Block) -> None:
        if block.pending_events:
            block.pending_events = [
                h for h in block.pending_events if not self.events.is_complete(h)
            ]

    def _event_free(self, block: Block) -> bool:
        self._purge_events(block)
        return not block.pending_events

    # -- block search ----------------------------------------------------------

    def _pool_key_for(self, rounded: int, stream_id: int):
        if self.capture_pool_fn is not None:
            pool = self.capture_pool_fn(stream_id)
            if pool is not None:
                return ("graph", pool)
        return "small" if rounded <= SMALL_LIMIT else "large"

    def _find_best_fit(self, pool_key, rounded: int, stream_id: int) -> Optional[Block]:
        best: Optional[Block] = None
        for seg in self._segments:
            if seg.pool_key != pool_key:
                continue
            for b in seg.blocks():
                if b.state != "free" or b.size < rounded:
                    continue
                if not self._event_free(b) and b.free_stream != stream_id:
                    continue
                if (best is None or b.size < best.size
                        or (b.size == best.size
                            and (b.segment.seq, b.offset) < (best.segment.seq, best.offset))):
                    best = b
        return best

    def _split(self, block: Block, rounded: int) -> Block:
        if block.size == rounded:
            return block
        rest = Block(block.segment, block.offset + rounded, block.size - rounded)
        rest.state = "free"
        rest.free_stream = block.free_stream
        rest.pending_events = list(block.pending_events)
        rest.prev = block
        rest.next = block.next
        if block.next is not None:
            block.next.prev = rest
        block.next = rest
        block.size = rounded
        return block

    def _can_merge(self, a: Block, b: Block) -> bool:
        """Neighbors merge when guarded by one stream's FIFO, or event-free."""
        if a.free_stream == b.free_stream and a.free_stream != -1:
            return True
        return self._event_free(a) and self._event_free(b)

    def _try_merge(self, block: Block) -> Block:
        while block.prev is not None and block.prev.state == "free" \
                and self._can_merge(block.prev, block):
            prev = block.prev
            same = prev.free_stream == block.free_stream
            prev.size += block.size
            prev.pending_events = prev.pending_events + block.pending_events
            prev.next = block.next
            if block.next is not None:
                block.next.prev = prev
            if not same:
                prev.free_stream = -1
            block = prev
        while block.next is not None and block.next.state == "free" \
                and self._can_merge(block, block.next):
            nxt = block.next
            same = nxt.free_stream == block.free_stream
            block.size += nxt.size
            block.pending_events = block.pending_events + nxt.pending_events
            block.next = nxt.next
            if nxt.next is not None:
                nxt.next.prev = block
            if not same:
                block.free_stream = -1
        return block

    # -- segment lifecycle -------------------------------------------------------

    def _reserve_segment(self, pool_key, rounded: int) -> Optional[Segment]:
        seg_size = segment_size_for(rounded)
        if self._s_reserved_current + seg_size > self.cap_bytes:
            return None
        try:
            handle, buffer = self.memory.reserve(seg_size)
        except OOMError:
            return None
        seg = Segment(self._next_seq, handle, buffer, seg_size, pool_key)
        self._next_seq += 1
        self._segments.append(seg)
        self._s_reserved_current += seg_size
        self._s_reserved_peak = max(self._s_reserved_peak, self._s_reserved_current)
        return seg

    def _segment_releasable(self, seg: Segment) -> bool:
        return all(b.state == "free" and self._event_free(b) for b in seg.blocks())

    def _release_segment(self, seg: Segment) -> None:
        self._segments.remove(seg)
        self._s_reserved_current -= seg.size
        self.memory.release(seg.handle)

    def _pool_live(self, pool_key) -> bool:
        if not isinstance(pool_key, tuple):
            return False
        info = self._graph_pools.get(pool_key[1])
        return info is not None and not info["released"]

    def _release_empty(self, scope) -> int:
        """Release releasable segments; scope is a pool key or 'all'."""
        freed = 0
        for seg in list(self._segments):
            if scope != "all" and seg.pool_key != scope:
                continue
            if self._pool_live(seg.pool_key):
                continue
            if self._segment_releasable(seg):
                freed += seg.size
                self._release_segment(seg)
        return freed

    # -- GC ladder ----------------------------------------------------------------

    def _satisfiable(self, pool_key, rounded: int, stream_id: int) -> bool:
        if self._find_best_fit(pool_key, rounded, stream_id) is not None:
            return True
        seg_size = segment_size_for(rounded)
        return (self._s_reserved_current + seg_size <= self.cap_bytes
                and seg_size <= self.memory.available_bytes())

    def gc_ladder(self, needed_bytes: int, pool_key=None, stream_id: int = 0) -> int:
        """Run reclamation rungs until ``needed_bytes`` becomes satisfiable.

        Returns total bytes released to the device. The caller decides OOM.
        """
        with self._lock:
            rounded = round_size(needed_bytes)
            if pool_key is None:
                pool_key = self._pool_key_for(rounded, stream_id)
            freed = 0
            scope = pool_key if not isinstance(pool_key, tuple) else pool_key

            # Rung 1: drop cached segments whose guards already completed.
            self._s_num_gc += 1
            freed += self._release_empty(scope)
            if self._satisfiable(pool_key, rounded, stream_id):
                return freed

            # Rung 2: synchronize outstanding free events, then release.
            self._s_num_gc += 1
            self.events.synchronize()
            freed += self._release_empty(scope)
            if self._satisfiable(pool_key, rounded, stream_id):
                return freed

            # Rung 3: release every empty segment in every pool.
            self._s_num_gc += 1
            freed += self._release_empty("all")
            return freed

    # -- public API -------------------------------------------------------------

    def allocate(self, size_bytes: int, stream_id: int = 0) -> Block:
        if size_bytes <= 0:
            raise AllocatorError(f"allocation size must be positive, got {size_bytes}")
        rounded = round_size(size_bytes)
        with self._lock:
            pool_key = self._pool_key_for(rounded, stream_id)
            block = self._take(pool_key, rounded, stream_id)
            if block is None:
                self._s_num_retries += 1
                self.gc_ladder(rounded, pool_key, stream_id)
                block = self._take(pool_key, rounded, stream_id)
            if block is None:
                self._s_num_ooms += 1
                raise OOMError(
                    f"virt:{self.device_index} out of memory allocating "
                    f"{rounded} bytes (cap {self.cap_bytes})",
                    stats=self.memory_stats(), cap_bytes=self.cap_bytes,
                    requested_bytes=rounded,
                )
            return block

    def _take(self, pool_key, rounded: int, stream_id: int) -> Optional[Block]:
        block = self._find_best_fit(pool_key, rounded, stream_id)
        if block is None:
            seg = self._reserve_segment(pool_key, rounded)
            if seg is None:
                return None
            block = seg.first
        block = self._split(block, rounded)
        block.state = "allocated"
        block.alloc_stream = stream_id
        block.free_stream = -1
        block.pending_events = []
        self._s_alloc_current += rounded
        self._s_alloc_peak = max(self._s_alloc_peak, self._s_alloc_current)
        self._s_alloc_total += rounded
        self._s_active_blocks += 1
        if self.on_alloc is not None:
            self.on_alloc(block, stream_id)
        return block

    def free(self, block: Block, stream_of_last_use: Optional[int] = None) -> None:
        with self._lock:
            if block.state != "allocated":
                raise AllocatorError("double free of allocator block")
            pool_info = None
            if isinstance(block.segment.pool_key, tuple):
                pool_info = self._graph_pools.get(block.segment.pool_key[1])
            if pool_info is not None and not pool_info["released"]:
                # Frees inside a live graph pool are deferred to pool scope so
                # replayed graphs keep stable addresses; the memory stays held
                # (and counted) until the pool is released.
                if block not in pool_info["deferred"]:
                    pool_info["deferred"].append(block)
                return
            slu = block.alloc_stream if stream_of_last_use is None else stream_of_last_use
            if self.on_free is not None:
                self.on_free(block, slu)
            self._do_free(block, slu)

    def _do_free(self, block: Block, slu: int) -> None:
        self._s_alloc_current -= block.size
        self._s_freed_total += block.size
        self._s_active_blocks -= 1
        block.state = "free"
        block.free_stream = slu
        # Every free records a completion event on the free stream: reuse on
        # the same stream is FIFO-safe immediately, reuse anywhere else (and
        # segment release) waits until the free point actually executed.
        block.pending_events.append(self.events.record(slu))
        self._try_merge(block)

    # -- diagnostics --------------------------------------------------------------

    def memory_stats(self) -> dict:
        with self._lock:
            inactive_split = 0
            for seg in self._segments:
                for b in seg.blocks():
                    if b.state == "free" and not b.spans_segment():
                        inactive_split += 1
            return {
                "allocated_bytes": {
                    "current": self._s_alloc_current,
                    "peak": self._s_alloc_peak,
                    "allocated_total": self._s_alloc_total,
                    "freed_total": self._s_freed_total,
                },
                "reserved_bytes": {
                    "current": self._s_reserved_current,
                    "peak": self._s_reserved_peak,
                },
                "active_blocks": self._s_active_blocks,
                "inactive_split_blocks": inactive_split,
                "num_alloc_retries": self._s_num_retries,
                "num_ooms": self._s_num_ooms,
                "num_gc_passes": self._s_num_gc,
            }

    def memory_snapshot(self) -> dict:
        with self._lock:
            segments = []
            for seg in sorted(self._segments, key=lambda s: s.seq):
                segments.append({
                    "pool": seg.pool_tag(),
                    "size": seg.size,
                    "blocks": [
                        {
                            "offset": b.offset,
                            "size": b.size,
                            "state": "allocated" if b.state == "allocated" else "free",
                            "stream": b.alloc_stream if b.state == "allocated"
                            else b.free_stream,
                        }
                        for b in seg.blocks()
                    ],
                })
            return {"device": self.device_index, "segments": segments}

    def set_per_process_memory_fraction(self, fraction: float) -> None:
        if not (0.0 < fraction <= 1.0):
            raise AllocatorError(
                f"memory fraction must be in (0, 1], got {fraction}")
        with self._lock:
            self._fraction = fraction
            self.cap_bytes = int(fraction * self.capacity_bytes)

    # -- graph pools -----------------------------------------------------------------

    def graph_pool_create(self) -> int:
        with self._lock:
            pid = self._next_pool_id
            self._next_pool_id += 1
            self._graph_pools[pid] = {"released": False, "deferred": []}
            return pid

    def graph_pool_release(self, pool_id: int) -> None:
        with self._lock:
            info = self._graph_pools.get(pool_id)
            if info is None or info["released"]:
                raise AllocatorError(f"unknown or already released graph pool {pool_id}")
            live = self.memory.live_graphs(pool_id)
            if live:
                raise AllocatorError(
                    f"graph pool {pool_id} released while graphs {live} are live")
            info["released"] = True
            for block in info["deferred"]:
                self._do_free(block, block.alloc_stream)
            info["deferred"] = []
