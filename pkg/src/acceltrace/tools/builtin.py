"""Built-in analysis tools."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import UnknownDevice
from ..events import CallStack, Event, EventKind, MemSpace, ObjectAction, TensorAction
from .api import KNOWN_KNOBS, Knobs, RangeFilter, Tool, register_tool

BLOCK_BYTES = 2 * 1024 * 1024
DEFAULT_WINDOW_NS = 1_000_000
OTHER_KERNELS = "Other kernels"


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(str(x) for x in r) + "\n")
    return buf.getvalue()


def _stack_to_list(st: Optional[CallStack]) -> list:
    if st is None:
        return []
    return [{"level": f.level.name, "function": f.function, "file": f.file, "line": f.line} for f in st.frames]


# -- kernel frequency ----------------------------------------------------------------

@dataclass
class KernelFreqReport:
    counts: dict
    total: int
    top_k: list
    k: int = 20
    launches: list = field(default_factory=list, repr=False)  # (device, grid_id, name)

    @classmethod
    def build(cls, launches: list, k: int) -> "KernelFreqReport":
        counts = Counter(name for _, _, name in launches)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        top = [list(kv) for kv in ranked[:k]]
        rest = sum(c for _, c in ranked[k:])
        if rest:
            top.append([OTHER_KERNELS, rest])
        return cls(dict(ranked), len(launches), top, k, launches)

    def restrict(self, keys) -> "KernelFreqReport":
        keys = set(keys)
        return KernelFreqReport.build([l for l in self.launches if (l[0], l[1]) in keys], self.k)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "total": self.total,
            "top_k": [{"kernel": n, "count": c} for n, c in self.top_k],
        }

    def to_csv(self) -> str:
        return _csv(("kernel", "count"), self.counts.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, KernelFreqReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@register_tool
class KernelFreqTool(Tool):
    name = "kernel-freq"
    needs_device_ops = False
    mergeable = True
    description = "kernel invocation counts with a top-K summary"

    def __init__(self, top_k: int = 20) -> None:
        self.top_k = top_k
        self.launches: list = []

    def new_state(self):
        return None

    def merge(self, a, b):
        return None

    def on_kernel_launch(self, rec) -> None:
        ev = rec.event
        self.launches.append((ev.device, ev.payload.grid_id, ev.payload.kernel_name))

    def on_finalize(self) -> KernelFreqReport:
        return KernelFreqReport.build(self.launches, self.top_k)


# -- memory characteristics ------------------------------------------------------------

def median(values: Sequence[int]) -> float:
    s = sorted(values)
    n = len(s)
    if n == 0:
        return 0
    mid = n // 2
    if n % 2:
        return s[mid]
    return (s[mid - 1] + s[mid]) / 2


def p90(values: Sequence[int]) -> int:
    """Nearest-rank 90th percentile."""
    s = sorted(values)
    if not s:
        return 0
    return s[math.ceil(0.9 * len(s)) - 1]


@dataclass
class MemoryCharacteristics:
    kernel_count: int
    footprint_bytes: int
    ws_bytes: int
    per_kernel: list  # [device, grid_id, kernel_name, footprint]
    min_ws: int
    avg_ws: float
    median_ws: float
    p90_ws: int
    per_device_footprint: dict
    tensor_footprint_bytes: int
    unattributed: int = 0

    @classmethod
    def build(cls, per_kernel: list, footprint: int, per_device: dict, tensor_fp: int,
              unattributed: int = 0) -> "MemoryCharacteristics":
        fps = [k[3] for k in per_kernel]
        return cls(
            kernel_count=len(fps),
            footprint_bytes=footprint,
            ws_bytes=max(fps, default=0),
            per_kernel=per_kernel,
            min_ws=min(fps, default=0),
            avg_ws=sum(fps) / len(fps) if fps else 0.0,
            median_ws=median(fps),
            p90_ws=p90(fps),
            per_device_footprint=dict(per_device),
            tensor_footprint_bytes=tensor_fp,
            unattributed=unattributed,
        )

    def restrict(self, keys) -> "MemoryCharacteristics":
        keys = set(keys)
        sub = [k for k in self.per_kernel if (k[0], k[1]) in keys]
        return MemoryCharacteristics.build(sub, self.footprint_bytes, self.per_device_footprint,
                                           self.tensor_footprint_bytes, self.unattributed)

    @property
    def ratio(self) -> float:
        return self.footprint_bytes / self.ws_bytes if self.ws_bytes else math.inf

    def to_dict(self) -> dict:
        return {
            "kernel_count": self.kernel_count,
            "footprint_bytes": self.footprint_bytes,
            "ws_bytes": self.ws_bytes,
            "min_ws": self.min_ws,
            "avg_ws": self.avg_ws,
            "median_ws": self.median_ws,
            "p90_ws": self.p90_ws,
            "per_device_footprint": {str(d): v for d, v in sorted(self.per_device_footprint.items())},
            "tensor_footprint_bytes": self.tensor_footprint_bytes,
            "unattributed": self.unattributed,
            "per_kernel": [{"device": d, "grid_id": g, "kernel": n, "footprint": f}
                           for d, g, n, f in self.per_kernel],
        }

    def to_csv(self) -> str:
        return _csv(("device", "grid_id", "kernel", "footprint"), self.per_kernel)


@register_tool
class MemcharTool(Tool):
    """Per-kernel footprints (objects actually accessed) and peak live bytes."""

    name = "memchar"
    mergeable = True
    description = "memory footprint and per-kernel working set"

    def __init__(self) -> None:
        self.kernels: list = []  # (device, grid_id, name) in launch order
        self.counts: dict = {}  # (device, grid_id) -> {object_id: [count, size]}
        self.obj_live: dict = {}
        self.live = 0
        self.peak = 0
        self.dev_live: Counter = Counter()
        self.dev_peak: Counter = Counter()
        self.tensor_live = 0
        self.tensor_peak = 0
        self.unattributed = 0

    def new_state(self) -> dict:
        return {}

    def on_mem_access(self, state: dict, rec) -> None:
        if rec.obj is None:
            if rec.unattributed:
                state["?"] = state.get("?", 0) + 1
            return
        ev = rec.event
        scope = (ev.device, ev.payload.grid_id)
        per = state.get(scope)
        if per is None:
            per = state[scope] = {}
        slot = per.get(rec.obj.object_id)
        if slot is None:
            per[rec.obj.object_id] = [1, rec.obj.size]
        else:
            slot[0] += 1

    def merge(self, a: dict, b: dict) -> dict:
        out = {k: ({o: list(v) for o, v in m.items()} if k != "?" else m) for k, m in a.items()}
        for k, m in b.items():
            if k == "?":
                out["?"] = out.get("?", 0) + m
                continue
            tgt = out.setdefault(k, {})
            for o, (c, sz) in m.items():
                if o in tgt:
                    tgt[o][0] += c
                else:
                    tgt[o] = [c, sz]
        return out

    def absorb(self, state: dict) -> None:
        self.unattributed += state.pop("?", 0)
        for scope, m in state.items():
            tgt = self.counts.setdefault(scope, {})
            for o, (c, sz) in m.items():
                if o in tgt:
                    tgt[o][0] += c
                else:
                    tgt[o] = [c, sz]

    def on_kernel_launch(self, rec) -> None:
        ev = rec.event
        self.kernels.append((ev.device, ev.payload.grid_id, ev.payload.kernel_name))

    def on_object_event(self, rec) -> None:
        ev = rec.event
        p = ev.payload
        key = (ev.device, p.object_id)
        if p.action is ObjectAction.Malloc:
            self.obj_live[key] = p.size_bytes
            self.live += p.size_bytes
            self.dev_live[ev.device] += p.size_bytes
        else:
            sz = self.obj_live.pop(key, p.size_bytes)
            self.live -= sz
            self.dev_live[ev.device] -= sz
        self.peak = max(self.peak, self.live)
        self.dev_peak[ev.device] = max(self.dev_peak[ev.device], self.dev_live[ev.device])

    def on_tensor_event(self, rec) -> None:
        p = rec.event.payload
        self.tensor_live += p.size_bytes if p.action is TensorAction.Alloc else -p.size_bytes
        self.tensor_peak = max(self.tensor_peak, self.tensor_live)

    def on_finalize(self) -> MemoryCharacteristics:
        per_kernel = []
        for dev, grid, name in self.kernels:
            m = self.counts.get((dev, grid), {})
            per_kernel.append([dev, grid, name, sum(sz for c, sz in m.values() if c > 0)])
        return MemoryCharacteristics.build(per_kernel, self.peak, self.dev_peak, self.tensor_peak,
                                           self.unattributed)


# -- hotness ---------------------------------------------------------------------------------

@dataclass
class HotnessMatrix:
    window_len_ns: int
    block_size_bytes: int
    origin_ns: int
    blocks: list  # block index per column
    counts: np.ndarray  # [window, column]

    def base_address(self, col: int) -> int:
        return self.blocks[col] * self.block_size_bytes

    def row_of_block(self, block: int) -> np.ndarray:
        return self.counts[:, self.blocks.index(block)]

    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {
            "window_len_ns": self.window_len_ns,
            "block_size_bytes": self.block_size_bytes,
            "origin_ns": self.origin_ns,
            "blocks": [{"block": b, "base_address": b * self.block_size_bytes} for b in self.blocks],
            "counts": self.counts.tolist(),
        }

    def to_csv(self) -> str:
        rows = ((w, b, b * self.block_size_bytes, int(self.counts[w, j]))
                for w in range(self.counts.shape[0]) for j, b in enumerate(self.blocks))
        return _csv(("window", "block", "base_address", "count"), rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HotnessMatrix):
            return NotImplemented
        return (self.window_len_ns, self.block_size_bytes, self.origin_ns, self.blocks) == \
            (other.window_len_ns, other.block_size_bytes, other.origin_ns, other.blocks) and \
            np.array_equal(self.counts, other.counts)


@register_tool
class HotnessTool(Tool):
    name = "hotness"
    mergeable = True
    description = "global access counts per 2 MiB block and time window"

    def __init__(self, window_len_ns: int = DEFAULT_WINDOW_NS, block_size: int = BLOCK_BYTES) -> None:
        if window_len_ns <= 0:
            raise ValueError("window_len_ns must be positive")
        self.window = int(window_len_ns)
        self.block = block_size
        self.origin: Optional[int] = None
        self.cells: Counter = Counter()

    def new_state(self) -> Counter:
        return Counter()

    def on_kernel_launch(self, rec) -> None:
        if self.origin is None:
            self.origin = rec.event.timestamp_ns

    def on_mem_access(self, state: Counter, rec) -> None:
        ev = rec.event
        if ev.kind is not EventKind.GlobalAccess or ev.payload.space is not MemSpace.Global:
            return
        origin = self.origin if self.origin is not None else ev.timestamp_ns
        state[((ev.timestamp_ns - origin) // self.window, ev.payload.address // self.block)] += 1

    def merge(self, a: Counter, b: Counter) -> Counter:
        out = Counter(a)
        out.update(b)
        return out

    def absorb(self, state: Counter) -> None:
        self.cells.update(state)

    def on_finalize(self) -> HotnessMatrix:
        blocks = sorted({b for _, b in self.cells})
        n_win = max((w for w, _ in self.cells), default=-1) + 1
        col = {b: j for j, b in enumerate(blocks)}
        mat = np.zeros((n_win, len(blocks)), dtype=np.int64)
        for (w, b), c in self.cells.items():
            mat[w, col[b]] += c
        return HotnessMatrix(self.window, self.block, self.origin or 0, blocks, mat)


# -- memory timeline -------------------------------------------------------------------------

def step_difference(a: list, b: list) -> list:
    """Pointwise a - b after aligning two step series on their union of timestamps."""
    times = sorted({t for t, _ in a} | {t for t, _ in b})
    out = []
    ia = ib = 0
    va = vb = 0
    for t in times:
        while ia < len(a) and a[ia][0] <= t:
            va = a[ia][1]
            ia += 1
        while ib < len(b) and b[ib][0] <= t:
            vb = b[ib][1]
            ib += 1
        out.append((t, va - vb))
    return out


@dataclass
class MemoryTimeline:
    series: dict  # device -> [(ts, live_bytes)]
    pair: Optional[tuple] = None
    difference: list = field(default_factory=list)

    def peak(self, device: int) -> int:
        return max((v for _, v in self.series.get(device, [])), default=0)

    def to_dict(self) -> dict:
        return {
            "series": {str(d): [list(p) for p in s] for d, s in sorted(self.series.items())},
            "peaks": {str(d): self.peak(d) for d in sorted(self.series)},
            "pair": list(self.pair) if self.pair else None,
            "difference": [list(p) for p in self.difference],
        }

    def to_csv(self) -> str:
        rows = [(d, t, v) for d, s in sorted(self.series.items()) for t, v in s]
        rows += [("diff", t, v) for t, v in self.difference]
        return _csv(("series", "timestamp_ns", "live_bytes"), rows)


@register_tool
class MemTimelineTool(Tool):
    name = "mem-timeline"
    needs_device_ops = False
    description = "per-device live tensor bytes over time"

    def __init__(self, device_pair: Optional[tuple] = None) -> None:
        self.pair = tuple(device_pair) if device_pair else None
        self.live: Counter = Counter()
        self.series: dict = {}
        self.devices: set = set()

    def _seen(self, rec) -> None:
        self.devices.add(rec.event.device)

    on_kernel_launch = on_api_call = on_mem_copy = on_op_boundary = on_range = on_object_event = _seen

    def on_tensor_event(self, rec) -> None:
        ev = rec.event
        p = ev.payload
        self.devices.add(ev.device)
        self.live[ev.device] += p.size_bytes if p.action is TensorAction.Alloc else -p.size_bytes
        s = self.series.setdefault(ev.device, [])
        if s and s[-1][0] == ev.timestamp_ns:
            s[-1] = (ev.timestamp_ns, self.live[ev.device])
        else:
            s.append((ev.timestamp_ns, self.live[ev.device]))

    def on_finalize(self) -> MemoryTimeline:
        for d in self.devices:
            self.series.setdefault(d, [])
        diff = []
        if self.pair:
            for d in self.pair:
                if d not in self.devices:
                    raise UnknownDevice(f"device {d} not present in trace (have {sorted(self.devices)})")
            diff = step_difference(self.series[self.pair[0]], self.series[self.pair[1]])
        return MemoryTimeline(self.series, self.pair, diff)


# -- attribution -----------------------------------------------------------------------------

@dataclass
class AttributionReport:
    winners: dict  # knob -> {"kernel", "value", "stack"}

    def to_dict(self) -> dict:
        return {k: {"kernel": w["kernel"], "value": w["value"], "stack": _stack_to_list(w["stack"])}
                for k, w in sorted(self.winners.items())}

    def to_csv(self) -> str:
        return _csv(("knob", "kernel", "value"),
                    ((k, w["kernel"], w["value"]) for k, w in sorted(self.winners.items())))


@register_tool
class AttributionTool(Tool):
    """Arg-max kernels per knob; only the current winner's call stack is kept."""

    name = "attribution"
    description = "kernel with the most invocations / memory references, with call stack"

    def __init__(self, knobs=None) -> None:
        if knobs is None:
            knobs = Knobs.parse(KNOWN_KNOBS)
        elif not isinstance(knobs, Knobs):
            knobs = Knobs.parse(knobs)
        self.knobs = knobs.active()
        self.metrics = [(k, KNOWN_KNOBS[k]) for k in self.knobs]
        self.stats: dict = {}
        self.active: dict = {}  # (device, grid) -> (name, stack) while running
        self.winners: dict = {}

    def _bump(self, name: str, stack, field_: str) -> None:
        st = self.stats.get(name)
        if st is None:
            st = self.stats[name] = {"launches": 0, "accesses": 0}
        st[field_] += 1
        for knob, metric in self.metrics:
            v = metric(st)
            w = self.winners.get(knob)
            if w is None or v > w["value"]:
                self.winners[knob] = {"kernel": name, "value": v, "stack": stack}

    def on_kernel_launch(self, rec) -> None:
        ev = rec.event
        name = ev.payload.kernel_name
        self.active[(ev.device, ev.payload.grid_id)] = (name, ev.stack)
        self._bump(name, ev.stack, "launches")

    def on_kernel_complete(self, rec) -> None:
        ev = rec.event
        self.active.pop((ev.device, ev.payload.grid_id), None)

    def on_mem_access(self, state, rec) -> None:
        ev = rec.event
        cur = self.active.get((ev.device, ev.payload.grid_id))
        if cur is not None:
            self._bump(cur[0], cur[1], "accesses")

    def on_finalize(self) -> AttributionReport:
        return AttributionReport(dict(self.winners))


# -- UVM profile -------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelProfile:
    device: int
    grid_id: int
    kernel_name: str
    objects: tuple  # ((address, size), ...) of accessed objects, address order
    tensors: tuple  # ((address, size), ...) of accessed tensors, address order


@dataclass
class UvmProfile:
    kernels: list

    def to_dict(self) -> dict:
        return {"kernels": [
            {"device": k.device, "grid_id": k.grid_id, "kernel": k.kernel_name,
             "objects": [list(o) for o in k.objects], "tensors": [list(t) for t in k.tensors]}
            for k in self.kernels]}

    def to_csv(self) -> str:
        return _csv(("device", "grid_id", "kernel", "object_bytes", "tensor_bytes"),
                    ((k.device, k.grid_id, k.kernel_name, sum(s for _, s in k.objects),
                      sum(s for _, s in k.tensors)) for k in self.kernels))


@register_tool
class UvmProfileTool(Tool):
    name = "uvm-profile"
    mergeable = True
    description = "objects and tensors accessed per kernel, for prefetch planning"

    def __init__(self) -> None:
        self.kernels: list = []
        self.touched: dict = {}

    def new_state(self) -> dict:
        return {}

    def on_mem_access(self, state: dict, rec) -> None:
        if rec.obj is None:
            return
        ev = rec.event
        scope = (ev.device, ev.payload.grid_id)
        objs, tens = state.get(scope) or state.setdefault(scope, ({}, {}))
        objs[rec.obj.address] = rec.obj.size
        if rec.tensor is not None:
            tens[rec.tensor.address] = rec.tensor.size

    def merge(self, a: dict, b: dict) -> dict:
        out = {k: (dict(o), dict(t)) for k, (o, t) in a.items()}
        for k, (o, t) in b.items():
            tgt = out.setdefault(k, ({}, {}))
            tgt[0].update(o)
            tgt[1].update(t)
        return out

    def absorb(self, state: dict) -> None:
        for k, (o, t) in state.items():
            tgt = self.touched.setdefault(k, ({}, {}))
            tgt[0].update(o)
            tgt[1].update(t)

    def on_kernel_launch(self, rec) -> None:
        ev = rec.event
        self.kernels.append((ev.device, ev.payload.grid_id, ev.payload.kernel_name))

    def on_finalize(self) -> UvmProfile:
        out = []
        for dev, grid, name in self.kernels:
            o, t = self.touched.get((dev, grid), ({}, {}))
            out.append(KernelProfile(dev, grid, name, tuple(sorted(o.items())), tuple(sorted(t.items()))))
        return UvmProfile(out)


# -- functional wrappers ---------------------------------------------------------------------

def _run(events, tool: Tool, range_filter: Optional[RangeFilter] = None):
    from ..engine import run_serial

    return run_serial(events, tool, range_filter=range_filter)[0]


def kernel_freq(events: Iterable[Event], top_k: int = 20, range_filter=None) -> KernelFreqReport:
    return _run(events, KernelFreqTool(top_k), range_filter)


def working_set(events: Iterable[Event], range_filter=None) -> MemoryCharacteristics:
    return _run(events, MemcharTool(), range_filter)


def hotness(events: Iterable[Event], window_len_ns: int = DEFAULT_WINDOW_NS, range_filter=None) -> HotnessMatrix:
    return _run(events, HotnessTool(window_len_ns), range_filter)


def memory_timeline(events: Iterable[Event], device_pair: Optional[tuple] = None) -> MemoryTimeline:
    return _run(events, MemTimelineTool(device_pair))


def attribution(events: Iterable[Event], knobs) -> AttributionReport:
    return _run(events, AttributionTool(knobs))


def uvm_profile(events: Iterable[Event]) -> UvmProfile:
    return _run(events, UvmProfileTool())
