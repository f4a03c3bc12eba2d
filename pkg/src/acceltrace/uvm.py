"""UVM demand-paging simulator with profile-driven prefetch plans."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .errors import CapacityTooSmall, EmptyProfile, PlanMismatch
from .events import Event, EventKind, MemSpace
from .tools.builtin import UvmProfile, uvm_profile

PAGE_BYTES = 2 * 1024 * 1024


class Granularity(enum.Enum):
    Object = "object"
    Tensor = "tensor"


class Policy(enum.Enum):
    None_ = "none"
    Object = "object"
    Tensor = "tensor"

    @classmethod
    def parse(cls, s: str) -> "Policy":
        for p in cls:
            if p.value == s.lower():
                return p
        raise ValueError(f"unknown policy {s!r}; choose none, object or tensor")


@dataclass(frozen=True)
class PrefetchPlan:
    granularity: Granularity
    entries: dict  # (device, grid_id) -> ((start, end), ...) half-open, sorted, disjoint

    def bytes_for(self, key) -> int:
        return sum(e - s for s, e in self.entries.get(key, ()))

    def total_bytes(self) -> int:
        return sum(self.bytes_for(k) for k in self.entries)


@dataclass(frozen=True)
class UvmConfig:
    device_capacity_bytes: int
    page_size_bytes: int = PAGE_BYTES
    fault_latency_ns: int = 20_000
    migration_bw_bytes_per_ns: float = 8.0
    prefetch_bw_bytes_per_ns: float = 16.0
    overlap: bool = True

    def __post_init__(self) -> None:
        if self.page_size_bytes <= 0:
            raise ValueError("page size must be positive")
        if self.migration_bw_bytes_per_ns <= 0 or self.prefetch_bw_bytes_per_ns <= 0:
            raise ValueError("bandwidths must be positive")
        if self.fault_latency_ns < 0:
            raise ValueError("fault latency must be non-negative")


@dataclass
class KernelTiming:
    device: int
    grid_id: int
    base_ns: int
    stage_ns: float
    residual_ns: float
    fault_ns: float
    faults: int
    evictions: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimResult:
    policy: str
    total_time_ns: float
    faults: int
    demand_migrated_bytes: int
    prefetched_bytes: int
    evictions: int
    capacity_bytes: int
    max_resident_bytes: int
    per_kernel: list = field(default_factory=list, repr=False)

    def base_time_ns(self) -> int:
        return sum(k.base_ns for k in self.per_kernel)

    def to_dict(self, per_kernel: bool = False) -> dict:
        d = {k: getattr(self, k) for k in ("policy", "total_time_ns", "faults", "demand_migrated_bytes",
                                             "prefetched_bytes", "evictions", "capacity_bytes",
                                             "max_resident_bytes")}
        if per_kernel:
            d["per_kernel"] = [k.to_dict() for k in self.per_kernel]
        return d


# -- plan construction ---------------------------------------------------------------

def _union(ranges: Iterable[tuple[int, int]]) -> tuple:
    out: list[list[int]] = []
    for s, e in sorted(ranges):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return tuple((s, e) for s, e in out)


def build_prefetch_plan(profile: Union[UvmProfile, Iterable[Event]], granularity: Granularity) -> PrefetchPlan:
    """Per kernel, the objects (or tensors) it accessed at least once."""
    if not isinstance(profile, UvmProfile):
        profile = uvm_profile(profile)
    if not profile.kernels or not any(k.objects for k in profile.kernels):
        raise EmptyProfile("profile has no kernels with memory accesses")
    entries = {}
    for k in profile.kernels:
        src = k.objects if granularity is Granularity.Object else k.tensors
        entries[(k.device, k.grid_id)] = _union((a, a + s) for a, s in src)
    return PrefetchPlan(granularity, entries)


def set_capacity(footprint_bytes: int, oversub_factor: float, page_size: int = PAGE_BYTES) -> int:
    if oversub_factor < 1:
        raise ValueError("oversubscription factor must be >= 1")
    return int(footprint_bytes / oversub_factor) // page_size * page_size


# -- replay ------------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelReplay:
    device: int
    grid_id: int
    base_ns: int
    pages: tuple  # page ids in first-touch-run order (consecutive repeats collapsed)


def replay_kernels(trace: Iterable[Event], page_size: int = PAGE_BYTES) -> list[KernelReplay]:
    """Extract per-kernel base time and page access sequence, in launch order."""
    order: list = []
    info: dict = {}
    for ev in trace:
        kind = ev.kind
        if kind is EventKind.GlobalAccess:
            if ev.payload.space is not MemSpace.Global:
                continue
            slot = info.get((ev.device, ev.payload.grid_id))
            if slot is None:
                continue
            page = (ev.device, ev.payload.address // page_size)
            pages = slot[2]
            if not pages or pages[-1] != page:
                pages.append(page)
        elif kind is EventKind.KernelLaunch:
            key = (ev.device, ev.payload.grid_id)
            order.append(key)
            info[key] = [ev.timestamp_ns, None, []]
        elif kind is EventKind.KernelComplete:
            slot = info.get((ev.device, ev.payload.grid_id))
            if slot is not None:
                slot[1] = ev.timestamp_ns
    out = []
    for key in order:
        start, end, pages = info[key]
        out.append(KernelReplay(key[0], key[1], (end - start) if end is not None else 0, tuple(pages)))
    return out


class Residency:
    """Page-granular LRU set bounded by capacity."""

    def __init__(self, capacity_pages: int) -> None:
        self.capacity = capacity_pages
        self.pages: OrderedDict = OrderedDict()
        self.evictions = 0
        self.high_water = 0

    def __contains__(self, page) -> bool:
        return page in self.pages

    def touch(self, page) -> None:
        self.pages.move_to_end(page)

    def insert(self, page) -> None:
        while len(self.pages) >= self.capacity:
            self.pages.popitem(last=False)
            self.evictions += 1
        self.pages[page] = None
        n = len(self.pages)
        if n > self.high_water:
            self.high_water = n
        assert n <= self.capacity


def _plan_pages(ranges: Sequence[tuple[int, int]], device: int, page_size: int) -> list:
    pages: list = []
    seen = set()
    for s, e in ranges:
        for p in range(s // page_size, (e - 1) // page_size + 1):
            if p not in seen:
                seen.add(p)
                pages.append((device, p))
    return pages


def simulate(trace: Union[Iterable[Event], Sequence[KernelReplay]], plan: Optional[PrefetchPlan],
             config: UvmConfig) -> SimResult:
    """Replay kernels in launch order against an LRU residency set.

    Before kernel k its planned pages are staged at prefetch bandwidth; with
    overlap on, only the part exceeding kernel k-1's time is added.  During
    the kernel each access to a non-resident page faults.
    """
    page = config.page_size_bytes
    if config.device_capacity_bytes < page:
        raise CapacityTooSmall(f"capacity {config.device_capacity_bytes} B is below one {page} B page")
    kernels = trace if _is_replay(trace) else replay_kernels(trace, page)
    if plan is not None:
        known = {(k.device, k.grid_id) for k in kernels}
        extra = [key for key in plan.entries if key not in known]
        if extra:
            raise PlanMismatch(f"plan names {len(extra)} kernels absent from the trace, e.g. {extra[0]}")
    res = Residency(config.device_capacity_bytes // page)
    fault_cost = config.fault_latency_ns + page / config.migration_bw_bytes_per_ns
    stage_cost = page / config.prefetch_bw_bytes_per_ns
    clock = 0.0
    prev_time = None
    faults = prefetched = demand = 0
    timings = []
    for k in kernels:
        ev0 = res.evictions
        staged = 0
        if plan is not None:
            # planned pages are visited in address order: resident ones become
            # most recent, missing ones are staged with plain LRU eviction
            for pg in _plan_pages(plan.entries.get((k.device, k.grid_id), ()), k.device, page):
                if pg in res:
                    res.touch(pg)
                else:
                    res.insert(pg)
                    staged += 1
        stage_ns = staged * stage_cost
        if config.overlap and prev_time is not None:
            residual = max(0.0, stage_ns - prev_time)
        else:
            residual = stage_ns
        kf = 0
        for pg in k.pages:
            if pg in res:
                res.touch(pg)
            else:
                res.insert(pg)
                kf += 1
        fault_ns = kf * fault_cost
        ktime = k.base_ns + fault_ns
        clock += residual + ktime
        prev_time = ktime
        faults += kf
        prefetched += staged * page
        demand += kf * page
        timings.append(KernelTiming(k.device, k.grid_id, k.base_ns, stage_ns, residual, fault_ns, kf,
                                    res.evictions - ev0))
    policy = "none" if plan is None else plan.granularity.value
    return SimResult(policy, clock, faults, demand, prefetched, res.evictions,
                     config.device_capacity_bytes, res.high_water * page, timings)


def _is_replay(trace) -> bool:
    return isinstance(trace, (list, tuple)) and (not trace or isinstance(trace[0], KernelReplay))


def compare_policies(trace: Iterable[Event], config: UvmConfig) -> dict:
    """Run none / object / tensor with otherwise identical config."""
    events = trace if isinstance(trace, list) else list(trace)
    profile = uvm_profile(events)
    kernels = replay_kernels(events, config.page_size_bytes)
    out = {"none": simulate(kernels, None, config)}
    for g in Granularity:
        out[g.value] = simulate(kernels, build_prefetch_plan(profile, g), config)
    return out


def normalized(results: dict) -> dict:
    base = results["none"].total_time_ns
    return {k: (r.total_time_ns / base if base else 1.0) for k, r in results.items()}
