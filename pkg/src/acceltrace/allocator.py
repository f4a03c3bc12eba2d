"""Pool-based caching allocator used by the workload generator.

Device memory is requested in chunks (memory objects) and tensors are
carved out of them.  Chunks are never handed back to the device.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .errors import UnknownTensor
from .events import ObjectAction, ObjectEventInfo, TensorAction, TensorEventInfo

ROUND_BYTES = 512
CHUNK_BYTES = 2 * 1024 * 1024


def round_up(n: int, m: int) -> int:
    return (n + m - 1) // m * m


@dataclass(frozen=True)
class Chunk:
    object_id: int
    base: int
    size: int


@dataclass(frozen=True)
class Placement:
    tensor_id: int
    object_id: int
    offset: int
    size: int
    address: int


@dataclass
class AllocatorState:
    base_address: int = 0x7F00_0000_0000
    chunks: dict[int, Chunk] = field(default_factory=dict)
    # object_id -> sorted [offset, length] pairs, coalesced
    free_segments: dict[int, list[list[int]]] = field(default_factory=dict)
    live_tensors: dict[int, Placement] = field(default_factory=dict)
    next_object_id: int = 1
    next_tensor_id: int = 1
    next_base: int = -1

    def __post_init__(self) -> None:
        if self.next_base < 0:
            self.next_base = self.base_address

    # -- operations ----------------------------------------------------------

    def alloc_tensor(self, size: int) -> tuple[Placement, list[ObjectEventInfo]]:
        if size <= 0:
            raise ValueError("tensor size must be positive")
        size = round_up(size, ROUND_BYTES)
        events: list[ObjectEventInfo] = []
        best = None  # (length, address, object_id, index)
        for oid, segs in self.free_segments.items():
            base = self.chunks[oid].base
            for i, (off, length) in enumerate(segs):
                if length >= size:
                    key = (length, base + off)
                    if best is None or key < best[:2]:
                        best = (length, base + off, oid, i)
        if best is None:
            chunk_size = max(CHUNK_BYTES, round_up(size, CHUNK_BYTES))
            chunk = Chunk(self.next_object_id, self.next_base, chunk_size)
            self.next_object_id += 1
            self.next_base += chunk_size
            self.chunks[chunk.object_id] = chunk
            self.free_segments[chunk.object_id] = [[0, chunk_size]]
            events.append(ObjectEventInfo(chunk.object_id, chunk.base, chunk_size, ObjectAction.Malloc))
            best = (chunk_size, chunk.base, chunk.object_id, 0)

        _, _, oid, i = best
        segs = self.free_segments[oid]
        off, length = segs[i]
        if length == size:
            del segs[i]
        else:
            segs[i] = [off + size, length - size]
        p = Placement(self.next_tensor_id, oid, off, size, self.chunks[oid].base + off)
        self.next_tensor_id += 1
        self.live_tensors[p.tensor_id] = p
        return p, events

    def free_tensor(self, tensor_id: int) -> tuple[TensorEventInfo, list[list[int]]]:
        p = self.live_tensors.pop(tensor_id, None)
        if p is None:
            raise UnknownTensor(tensor_id)
        segs = self.free_segments[p.object_id]
        i = bisect.bisect_left(segs, [p.offset, 0])
        segs.insert(i, [p.offset, p.size])
        # coalesce with the right neighbour, then the left one
        if i + 1 < len(segs) and segs[i][0] + segs[i][1] == segs[i + 1][0]:
            segs[i][1] += segs[i + 1][1]
            del segs[i + 1]
        if i > 0 and segs[i - 1][0] + segs[i - 1][1] == segs[i][0]:
            segs[i - 1][1] += segs[i][1]
            del segs[i]
        ev = TensorEventInfo(p.tensor_id, p.object_id, p.address, p.size, TensorAction.Reclaim)
        return ev, segs

    # -- bookkeeping ---------------------------------------------------------

    def chunk_bytes(self) -> int:
        return sum(c.size for c in self.chunks.values())

    def live_bytes(self) -> int:
        return sum(p.size for p in self.live_tensors.values())

    def free_bytes(self) -> int:
        return sum(n for segs in self.free_segments.values() for _, n in segs)

    def check_invariants(self) -> None:
        """Raise AssertionError if the pool bookkeeping is inconsistent."""
        by_obj: dict[int, list[tuple[int, int, str]]] = {oid: [] for oid in self.chunks}
        for oid, segs in self.free_segments.items():
            for j, (off, n) in enumerate(segs):
                assert n > 0
                if j:
                    prev_off, prev_n = segs[j - 1]
                    assert prev_off + prev_n < off, "free segments must be sorted and coalesced"
                by_obj[oid].append((off, n, "free"))
        for p in self.live_tensors.values():
            by_obj[p.object_id].append((p.offset, p.size, "live"))
        for oid, items in by_obj.items():
            items.sort()
            pos = 0
            for off, n, _ in items:
                assert off == pos, f"gap or overlap in object {oid} at offset {off}"
                pos += n
            assert pos == self.chunks[oid].size, f"object {oid} not fully covered"


def alloc_tensor(state: AllocatorState, size: int) -> tuple[Placement, list[ObjectEventInfo]]:
    return state.alloc_tensor(size)


def free_tensor(state: AllocatorState, tensor_id: int) -> tuple[TensorEventInfo, list[list[int]]]:
    return state.free_tensor(tensor_id)
