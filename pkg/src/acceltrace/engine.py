"""Event preprocessing and the two dispatch engines.

``run_serial`` drains a bounded buffer with a single analyzer.
``run_parallel`` fans access records out to a worker pool in batches and
merges the per-batch partial states at every non-access event, which acts
as a serialization point.  Both engines produce the same report for any
mergeable tool.
"""

from __future__ import annotations

import bisect
import enum
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from typing import Any, Iterable, Optional

from .errors import EngineError, ScopeMismatch, ToolError
from .events import Event, EventKind, MemSpace, ObjectAction, TensorAction, is_access_kind
from .tools.api import RangeFilter, Tool, apply_range_filter

SLOWDOWN_QUANTUM_S = 0.0005


class EngineMode(enum.Enum):
    Serial = "serial"
    Parallel = "parallel"


@dataclass(frozen=True)
class EngineConfig:
    mode: EngineMode = EngineMode.Serial
    workers: int = 1
    buffer_capacity: int = 65_536
    batch_size: int = 4_096
    # artificial per-event analysis cost, for stall and throughput experiments
    slowdown_ns: int = 0

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("buffer and batch sizes must be positive")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.mode is EngineMode.Serial and self.workers != 1:
            raise ValueError("serial engine uses exactly one worker")


# -- live object table ------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class LiveObject:
    object_id: int
    device: int
    address: int
    size: int


@dataclass(frozen=True, slots=True)
class LiveTensor:
    tensor_id: int
    object_id: int
    device: int
    address: int
    size: int


class _IntervalIndex:
    __slots__ = ("bases", "items")

    def __init__(self) -> None:
        self.bases: list[int] = []
        self.items: dict[int, Any] = {}

    def add(self, base: int, item) -> None:
        bisect.insort(self.bases, base)
        self.items[base] = item

    def remove(self, base: int) -> None:
        i = bisect.bisect_left(self.bases, base)
        if i < len(self.bases) and self.bases[i] == base:
            del self.bases[i]
            del self.items[base]

    def find(self, addr: int):
        i = bisect.bisect_right(self.bases, addr) - 1
        if i < 0:
            return None
        item = self.items[self.bases[i]]
        return item if addr < item.address + item.size else None


class ObjectTable:
    """Per-device map of live objects and tensors, searchable by address."""

    def __init__(self) -> None:
        self._objects: dict[int, _IntervalIndex] = {}
        self._tensors: dict[int, _IntervalIndex] = {}

    def _idx(self, table: dict, device: int) -> _IntervalIndex:
        idx = table.get(device)
        if idx is None:
            idx = table[device] = _IntervalIndex()
        return idx

    def apply(self, ev: Event):
        """Update the table for a lifecycle event; returns the affected entry."""
        p = ev.payload
        if ev.kind is EventKind.DeviceMalloc or ev.kind is EventKind.DeviceFree:
            idx = self._idx(self._objects, ev.device)
            if p.action is ObjectAction.Malloc:
                obj = LiveObject(p.object_id, ev.device, p.address, p.size_bytes)
                idx.add(p.address, obj)
                return obj
            obj = idx.items.get(p.address) or LiveObject(p.object_id, ev.device, p.address, p.size_bytes)
            idx.remove(p.address)
            return obj
        idx = self._idx(self._tensors, ev.device)
        if p.action is TensorAction.Alloc:
            t = LiveTensor(p.tensor_id, p.object_id, ev.device, p.address, p.size_bytes)
            idx.add(p.address, t)
            return t
        t = idx.items.get(p.address) or LiveTensor(p.tensor_id, p.object_id, ev.device, p.address, p.size_bytes)
        idx.remove(p.address)
        return t

    def resolve(self, device: int, address: int) -> tuple[Optional[LiveObject], Optional[LiveTensor]]:
        objs = self._objects.get(device)
        obj = objs.find(address) if objs else None
        if obj is None:
            return None, None
        tens = self._tensors.get(device)
        t = tens.find(address) if tens else None
        return obj, t

    def live_objects(self, device: int) -> list[LiveObject]:
        idx = self._objects.get(device)
        return [idx.items[b] for b in idx.bases] if idx else []


@dataclass(frozen=True, slots=True)
class DispatchRecord:
    event: Event
    obj: Optional[LiveObject] = None
    tensor: Optional[LiveTensor] = None
    unattributed: bool = False


_LIFECYCLE = {EventKind.DeviceMalloc, EventKind.DeviceFree, EventKind.TensorAlloc, EventKind.TensorReclaim}


def preprocess(ev: Event, table: ObjectTable) -> DispatchRecord:
    """Resolve an event against (and, for lifecycle events, update) ``table``."""
    kind = ev.kind
    if is_access_kind(kind):
        p = ev.payload
        if p.space is not MemSpace.Global:
            return DispatchRecord(ev)
        obj, t = table.resolve(ev.device, p.address)
        return DispatchRecord(ev, obj, t, obj is None)
    if kind in _LIFECYCLE:
        entry = table.apply(ev)
        if isinstance(entry, LiveObject):
            return DispatchRecord(ev, entry)
        return DispatchRecord(ev, None, entry)
    return DispatchRecord(ev)


# -- count maps ----------------------------------------------------------------------

@dataclass(frozen=True)
class AccessCountMap:
    """Object id -> access count for one kernel execution ``(device, grid_id)``."""

    scope: Optional[tuple[int, int]] = None
    counts: dict = field(default_factory=dict)


def merge_count_maps(a: AccessCountMap, b: AccessCountMap) -> AccessCountMap:
    if a.scope is not None and b.scope is not None and a.scope != b.scope:
        raise ScopeMismatch(f"cannot merge count maps of {a.scope} and {b.scope}")
    out = dict(a.counts)
    for k, v in b.counts.items():
        out[k] = out.get(k, 0) + v
    return AccessCountMap(a.scope if a.scope is not None else b.scope, out)


# -- stats -------------------------------------------------------------------------------

PHASES = ("execution", "collection", "transfer", "analysis")


@dataclass
class EngineStats:
    mode: str = "serial"
    workers: int = 1
    phases: dict = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    wall_time: float = 0.0
    producer_stalls: int = 0
    events_processed: int = 0

    def to_dict(self, timings: bool = True) -> dict:
        ph = {k: (round(v, 6) if timings else 0.0) for k, v in self.phases.items()}
        return {
            "mode": self.mode,
            "workers": self.workers,
            "phases_s": ph,
            "wall_time_s": round(self.wall_time, 6) if timings else 0.0,
            "producer_stalls": self.producer_stalls,
            "events_processed": self.events_processed,
        }


class _Throttle:
    """Accumulates per-event debt and sleeps it off in coarse quanta.

    Sleeping releases the GIL, so throttled workers overlap in time.
    """

    __slots__ = ("per", "debt")

    def __init__(self, per_event_ns: int) -> None:
        self.per = per_event_ns / 1e9
        self.debt = 0.0

    def tick(self, n: int = 1) -> None:
        if not self.per:
            return
        self.debt += n * self.per
        if self.debt >= SLOWDOWN_QUANTUM_S:
            self.flush()

    def flush(self) -> None:
        if self.debt > 0:
            t0 = time.perf_counter()
            time.sleep(self.debt)
            self.debt -= time.perf_counter() - t0


# -- dispatch -------------------------------------------------------------------------

def _handler_table(tool: Tool) -> dict:
    table = {
        EventKind.KernelLaunch: tool.on_kernel_launch,
        EventKind.KernelComplete: tool.on_kernel_complete,
        EventKind.TensorAlloc: tool.on_tensor_event,
        EventKind.TensorReclaim: tool.on_tensor_event,
        EventKind.DeviceMalloc: tool.on_object_event,
        EventKind.DeviceFree: tool.on_object_event,
        EventKind.MemCopy: tool.on_mem_copy,
        EventKind.OperatorStart: tool.on_op_boundary,
        EventKind.OperatorEnd: tool.on_op_boundary,
        EventKind.RangeStart: tool.on_range,
        EventKind.RangeEnd: tool.on_range,
    }
    for kind in EventKind:
        if kind not in table:
            table[kind] = tool.on_device_op if 32 <= kind < 64 else tool.on_api_call
    return table


def _call(fn, rec: DispatchRecord, *args) -> None:
    try:
        fn(*args, rec)
    except ToolError:
        raise
    except Exception as exc:
        raise ToolError(rec.event.seq, exc) from exc


def _wanted(tool: Tool):
    if tool.needs_device_ops:
        return None
    return lambda ev: not (32 <= ev.kind < 64)


def _source(trace: Iterable[Event], range_filter: Optional[RangeFilter], tool: Tool):
    it = apply_range_filter(trace, range_filter)
    keep = _wanted(tool)
    return iter(filter(keep, it)) if keep else iter(it)


def run_serial(trace: Iterable[Event], tool: Tool, config: Optional[EngineConfig] = None,
               range_filter: Optional[RangeFilter] = None):
    """Fetch-and-flush: fill the buffer, stall the producer, analyze, repeat."""
    cfg = config or EngineConfig()
    stats = EngineStats("serial", 1)
    ph = stats.phases
    clock = time.perf_counter
    t_begin = clock()
    table = ObjectTable()
    handlers = _handler_table(tool)
    throttle = _Throttle(cfg.slowdown_ns)
    cap = cfg.buffer_capacity
    src = _source(trace, range_filter, tool)
    buffer: list[DispatchRecord] = []
    state = None
    have_state = False

    def analyze(batch: list[DispatchRecord]) -> None:
        nonlocal state, have_state
        for rec in batch:
            if is_access_kind(rec.event.kind):
                if not have_state:
                    state = tool.new_state()
                    have_state = True
                _call(tool.on_mem_access, rec, state)
            else:
                if have_state:
                    tool.absorb(state)
                    have_state = False
                _call(handlers[rec.event.kind], rec)
            throttle.tick()

    while True:
        t0 = clock()
        chunk = list(islice(src, cap - len(buffer)))
        t1 = clock()
        buffer.extend(preprocess(ev, table) for ev in chunk)
        t2 = clock()
        ph["execution"] += t1 - t0
        ph["collection"] += t2 - t1
        if not chunk and not buffer:
            break
        if len(buffer) >= cap or not chunk:
            if len(buffer) >= cap and chunk:
                stats.producer_stalls += 1
            batch = list(buffer)
            buffer.clear()
            t3 = clock()
            analyze(batch)
            throttle.flush()
            t4 = clock()
            ph["transfer"] += t3 - t2
            ph["analysis"] += t4 - t3
            stats.events_processed += len(batch)
            if not chunk:
                break
    t5 = clock()
    if have_state:
        tool.absorb(state)
    report = tool.on_finalize()
    t6 = clock()
    ph["analysis"] += t6 - t5
    stats.wall_time = t6 - t_begin
    return report, stats


def _work(tool: Tool, batch: list[DispatchRecord], slowdown_ns: int):
    state = tool.new_state()
    throttle = _Throttle(slowdown_ns)
    on_access = tool.on_mem_access
    for rec in batch:
        _call(on_access, rec, state)
        throttle.tick()
    throttle.flush()
    return state


def run_parallel(trace: Iterable[Event], tool: Tool, config: Optional[EngineConfig] = None,
                 range_filter: Optional[RangeFilter] = None):
    """Batched in-situ analysis with ``config.workers`` concurrent analyzers."""
    cfg = config or EngineConfig(EngineMode.Parallel, 4)
    if not tool.mergeable:
        raise EngineError(f"tool {tool.name!r} declares no merge; use the serial engine")
    stats = EngineStats("parallel", cfg.workers)
    ph = stats.phases
    clock = time.perf_counter
    t_begin = clock()
    table = ObjectTable()
    handlers = _handler_table(tool)
    throttle = _Throttle(cfg.slowdown_ns)
    max_inflight = max(cfg.workers, cfg.buffer_capacity // cfg.batch_size)
    src = _source(trace, range_filter, tool)
    inflight: list[Future] = []
    acc = None
    pending: list[DispatchRecord] = []

    with ThreadPoolExecutor(max_workers=cfg.workers, thread_name_prefix="analyzer") as pool:

        def reap_oldest() -> None:
            nonlocal acc
            part = inflight.pop(0).result()
            acc = part if acc is None else tool.merge(acc, part)

        def submit() -> None:
            # spread the pending run over all workers so one kernel's
            # accesses are analyzed concurrently
            nonlocal pending
            n = len(pending)
            if not n:
                return
            k = min(cfg.workers, n)
            for i in range(k):
                part = pending[i * n // k:(i + 1) * n // k]
                if len(inflight) >= max_inflight:
                    stats.producer_stalls += 1
                    t = clock()
                    reap_oldest()
                    ph["analysis"] += clock() - t
                t = clock()
                inflight.append(pool.submit(_work, tool, part, cfg.slowdown_ns))
                ph["transfer"] += clock() - t
            pending = []

        def serialize() -> None:
            nonlocal acc
            submit()
            t = clock()
            while inflight:
                reap_oldest()
            if acc is not None:
                tool.absorb(acc)
                acc = None
            ph["analysis"] += clock() - t

        try:
            while True:
                t0 = clock()
                chunk = list(islice(src, cfg.batch_size))
                t1 = clock()
                recs = [preprocess(ev, table) for ev in chunk]
                t2 = clock()
                ph["execution"] += t1 - t0
                ph["collection"] += t2 - t1
                if not recs:
                    break
                stats.events_processed += len(recs)
                # loop bookkeeping not covered by the inner timers counts as collection
                inner = ph["transfer"] + ph["analysis"]
                for rec in recs:
                    if is_access_kind(rec.event.kind):
                        pending.append(rec)
                        if len(pending) >= cfg.batch_size:
                            submit()
                    else:
                        serialize()
                        t = clock()
                        _call(handlers[rec.event.kind], rec)
                        throttle.tick()
                        ph["analysis"] += clock() - t
                walked = clock() - t2
                ph["collection"] += walked - (ph["transfer"] + ph["analysis"] - inner)
            serialize()
            t = clock()
            throttle.flush()
            report = tool.on_finalize()
            ph["analysis"] += clock() - t
        except BaseException:
            for f in inflight:
                f.cancel()
            raise
    stats.wall_time = clock() - t_begin
    return report, stats


def run(trace: Iterable[Event], tool: Tool, config: Optional[EngineConfig] = None,
        range_filter: Optional[RangeFilter] = None):
    cfg = config or EngineConfig()
    if cfg.mode is EngineMode.Parallel:
        return run_parallel(trace, tool, cfg, range_filter)
    return run_serial(trace, tool, cfg, range_filter)
