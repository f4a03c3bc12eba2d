"""Unified event taxonomy and stream validation.

Every backend dialect is normalized into :class:`Event` records before any
tool sees it.  Events are immutable and safe to hand between threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union


class Category(enum.Enum):
    HostApi = "host_api"
    DeviceOp = "device_op"
    Framework = "framework"


class EventKind(enum.IntEnum):
    # host-called API events
    DriverCall = 1
    RuntimeCall = 2
    Sync = 3
    KernelLaunch = 4
    KernelComplete = 5
    MemCopy = 6
    MemSet = 7
    ResourceOp = 8
    BatchMemOp = 9
    DeviceMalloc = 10
    DeviceFree = 11
    # device-side operations
    BlockEnter = 32
    BlockExit = 33
    GlobalAccess = 34
    SharedAccess = 35
    Barrier = 36
    FuncCall = 37
    FuncReturn = 38
    DeviceSideMalloc = 39
    DeviceSideFree = 40
    GlobalToSharedCopy = 41
    PipelineCommit = 42
    PipelineWait = 43
    RemoteSharedAccess = 44
    ClusterBarrier = 45
    Instruction = 46
    # framework events
    OperatorStart = 64
    OperatorEnd = 65
    TensorAlloc = 66
    TensorReclaim = 67
    RangeStart = 68
    RangeEnd = 69

    @property
    def category(self) -> Category:
        return category_of(self)

    @property
    def snake(self) -> str:
        return _SNAKE[self]

    @classmethod
    def from_snake(cls, name: str) -> "EventKind":
        return _FROM_SNAKE[name]


def category_of(kind: EventKind) -> Category:
    if kind < 32:
        return Category.HostApi
    if kind < 64:
        return Category.DeviceOp
    return Category.Framework


def _to_snake(name: str) -> str:
    out = []
    for i, ch in enumerate(name):
        if ch.isupper() and i:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


_SNAKE = {k: _to_snake(k.name) for k in EventKind}
_FROM_SNAKE = {v: k for k, v in _SNAKE.items()}


class MemSpace(enum.IntEnum):
    Global = 0
    Shared = 1


class CopyDirection(enum.IntEnum):
    HostToDevice = 0
    DeviceToHost = 1
    DeviceToDevice = 2


class TensorAction(enum.IntEnum):
    Alloc = 0
    Reclaim = 1


class ObjectAction(enum.IntEnum):
    Malloc = 0
    Free = 1


class FrameLevel(enum.IntEnum):
    # ordering matters: outer frames carry the higher level
    Native = 0
    Framework = 1
    Python = 2


Dim3 = tuple[int, int, int]


@dataclass(frozen=True, slots=True)
class KernelLaunchInfo:
    kernel_name: str
    grid_id: int
    grid_dims: Dim3 = (1, 1, 1)
    block_dims: Dim3 = (1, 1, 1)
    stream: int = 0
    arg_objects: tuple[int, ...] = ()


@dataclass(frozen=True, slots=True)
class KernelCompleteInfo:
    grid_id: int


@dataclass(frozen=True, slots=True)
class MemAccessInfo:
    grid_id: int
    address: int
    size_bytes: int
    is_write: bool = False
    space: MemSpace = MemSpace.Global


@dataclass(frozen=True, slots=True)
class DeviceOpInfo:
    """Payload for device-side operations other than memory accesses."""

    grid_id: int
    address: int = 0
    size_bytes: int = 0
    detail: str = ""


@dataclass(frozen=True, slots=True)
class MemCopyInfo:
    src_addr: int
    dst_addr: int
    size_bytes: int
    direction: CopyDirection


@dataclass(frozen=True, slots=True)
class ApiCallInfo:
    """Generic host API call (driver/runtime calls, syncs, memset, ...)."""

    api_name: str
    stream: int = 0
    address: int = 0
    size_bytes: int = 0


@dataclass(frozen=True, slots=True)
class TensorEventInfo:
    tensor_id: int
    object_id: int
    address: int
    size_bytes: int
    action: TensorAction


@dataclass(frozen=True, slots=True)
class ObjectEventInfo:
    object_id: int
    address: int
    size_bytes: int
    action: ObjectAction


@dataclass(frozen=True, slots=True)
class OperatorInfo:
    op_id: int
    name: str


@dataclass(frozen=True, slots=True)
class RangeMarkerInfo:
    range_id: int
    label: str


@dataclass(frozen=True, slots=True)
class Frame:
    level: FrameLevel
    function: str
    file: str = ""
    line: int = 0


@dataclass(frozen=True, slots=True)
class CallStack:
    frames: tuple[Frame, ...] = ()


Payload = Union[
    KernelLaunchInfo,
    KernelCompleteInfo,
    MemAccessInfo,
    DeviceOpInfo,
    MemCopyInfo,
    ApiCallInfo,
    TensorEventInfo,
    ObjectEventInfo,
    OperatorInfo,
    RangeMarkerInfo,
]

_ACCESS_KINDS = (EventKind.GlobalAccess, EventKind.SharedAccess, EventKind.RemoteSharedAccess)

PAYLOAD_TYPE: dict[EventKind, type] = {}
for _k in EventKind:
    if _k is EventKind.KernelLaunch:
        PAYLOAD_TYPE[_k] = KernelLaunchInfo
    elif _k is EventKind.KernelComplete:
        PAYLOAD_TYPE[_k] = KernelCompleteInfo
    elif _k is EventKind.MemCopy:
        PAYLOAD_TYPE[_k] = MemCopyInfo
    elif _k in (EventKind.DeviceMalloc, EventKind.DeviceFree):
        PAYLOAD_TYPE[_k] = ObjectEventInfo
    elif _k in _ACCESS_KINDS:
        PAYLOAD_TYPE[_k] = MemAccessInfo
    elif _k in (EventKind.TensorAlloc, EventKind.TensorReclaim):
        PAYLOAD_TYPE[_k] = TensorEventInfo
    elif _k in (EventKind.OperatorStart, EventKind.OperatorEnd):
        PAYLOAD_TYPE[_k] = OperatorInfo
    elif _k in (EventKind.RangeStart, EventKind.RangeEnd):
        PAYLOAD_TYPE[_k] = RangeMarkerInfo
    elif category_of(_k) is Category.DeviceOp:
        PAYLOAD_TYPE[_k] = DeviceOpInfo
    else:
        PAYLOAD_TYPE[_k] = ApiCallInfo
del _k


@dataclass(frozen=True, slots=True)
class Event:
    seq: int
    device: int
    timestamp_ns: int
    kind: EventKind
    payload: Payload
    stack: Optional[CallStack] = None

    @property
    def category(self) -> Category:
        return category_of(self.kind)

    def is_access(self) -> bool:
        return self.kind in _ACCESS_KINDS

    def grid_id(self) -> Optional[int]:
        """Grid id of the kernel this event is scoped to, if any."""
        if self.kind is EventKind.KernelLaunch or self.kind is EventKind.KernelComplete:
            return self.payload.grid_id
        if self.kind >= 32 and self.kind < 64:
            return self.payload.grid_id
        return None


def is_access_kind(kind: EventKind) -> bool:
    return kind in _ACCESS_KINDS


def is_kernel_scoped(kind: EventKind) -> bool:
    return kind is EventKind.KernelLaunch or kind is EventKind.KernelComplete or 32 <= kind < 64


# -- validation ---------------------------------------------------------------

U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class Violation:
    seq: int
    rule: str
    message: str

    def __str__(self) -> str:
        return f"seq {self.seq}: [{self.rule}] {self.message}"


@dataclass
class _DeviceState:
    last_ts: int = -1
    next_grid: int = 0
    open_grids: set = field(default_factory=set)
    objects: dict = field(default_factory=dict)  # object_id -> (addr, size)
    tensors: dict = field(default_factory=dict)  # tensor_id -> (object_id, addr, size)
    ranges: list = field(default_factory=list)  # stack of open range ids


class StreamValidator:
    """Incremental checker; feed events one at a time with :meth:`check`."""

    def __init__(self) -> None:
        self._last_seq: Optional[int] = None
        self._devices: dict[int, _DeviceState] = {}

    def _dev(self, device: int) -> _DeviceState:
        st = self._devices.get(device)
        if st is None:
            st = self._devices[device] = _DeviceState()
        return st

    def check(self, ev: Event) -> list[Violation]:
        out: list[Violation] = []

        def bad(rule: str, msg: str) -> None:
            out.append(Violation(ev.seq, rule, msg))

        if self._last_seq is not None and ev.seq <= self._last_seq:
            bad("seq_order", f"seq {ev.seq} not greater than previous {self._last_seq}")
        self._last_seq = ev.seq

        st = self._dev(ev.device)
        if ev.timestamp_ns < st.last_ts:
            bad("timestamp_order", f"timestamp {ev.timestamp_ns} < {st.last_ts} on device {ev.device}")
        st.last_ts = max(st.last_ts, ev.timestamp_ns)

        expected = PAYLOAD_TYPE[ev.kind]
        if not isinstance(ev.payload, expected):
            bad("payload_kind", f"{ev.kind.name} carries {type(ev.payload).__name__}")
            return out

        if ev.stack is not None:
            levels = [f.level for f in ev.stack.frames]
            if any(a < b for a, b in zip(levels, levels[1:])):
                bad("stack_shape", "frame levels must be non-increasing Python >= Framework >= Native")

        p = ev.payload
        kind = ev.kind
        if kind is EventKind.KernelLaunch:
            if p.grid_id != st.next_grid:
                bad("grid_id_gap", f"expected grid_id {st.next_grid}, got {p.grid_id}")
            st.next_grid = max(st.next_grid, p.grid_id + 1)
            st.open_grids.add(p.grid_id)
            if min(p.grid_dims) < 1 or min(p.block_dims) < 1:
                bad("dims", "grid and block dims must be >= 1")
        elif kind is EventKind.KernelComplete:
            if p.grid_id not in st.open_grids:
                bad("unknown_grid", f"completion for grid {p.grid_id} without open launch")
            st.open_grids.discard(p.grid_id)
        elif category_of(kind) is Category.DeviceOp:
            if p.grid_id >= st.next_grid:
                bad("unknown_grid", f"device op references grid {p.grid_id} not yet launched")
            if isinstance(p, MemAccessInfo):
                if not 1 <= p.size_bytes <= 128:
                    bad("access_size", f"access size {p.size_bytes} outside 1..128")
                if p.address + p.size_bytes - 1 > U64_MAX or p.address < 0:
                    bad("address_overflow", "access range overflows 64-bit space")
                if (kind is EventKind.GlobalAccess) != (p.space is MemSpace.Global):
                    bad("payload_kind", f"{kind.name} with space {p.space.name}")
        elif kind is EventKind.MemCopy:
            if p.size_bytes <= 0:
                bad("copy_size", "memcopy size must be positive")
        elif kind in (EventKind.DeviceMalloc, EventKind.DeviceFree):
            self._check_object(ev, st, bad)
        elif kind in (EventKind.TensorAlloc, EventKind.TensorReclaim):
            self._check_tensor(ev, st, bad)
        elif kind is EventKind.RangeStart:
            if p.range_id in st.ranges:
                bad("range_nesting", f"range {p.range_id} already open")
            st.ranges.append(p.range_id)
        elif kind is EventKind.RangeEnd:
            if not st.ranges:
                bad("range_nesting", f"RangeEnd {p.range_id} without open range")
            elif st.ranges[-1] != p.range_id:
                if p.range_id in st.ranges:
                    bad("range_nesting", f"range {p.range_id} partially overlaps {st.ranges[-1]}")
                    st.ranges.remove(p.range_id)
                else:
                    bad("range_nesting", f"RangeEnd {p.range_id} without matching start")
            else:
                st.ranges.pop()
        return out

    @staticmethod
    def _check_object(ev: Event, st: _DeviceState, bad) -> None:
        p = ev.payload
        if (ev.kind is EventKind.DeviceMalloc) != (p.action is ObjectAction.Malloc):
            bad("payload_kind", f"{ev.kind.name} with action {p.action.name}")
        if p.size_bytes <= 0:
            bad("object_size", "object size must be positive")
            return
        if p.action is ObjectAction.Malloc:
            if p.object_id in st.objects:
                bad("object_lifecycle", f"object {p.object_id} already live")
            for oid, (addr, size) in st.objects.items():
                if p.address < addr + size and addr < p.address + p.size_bytes:
                    bad("object_overlap", f"object {p.object_id} overlaps live object {oid}")
                    break
            st.objects[p.object_id] = (p.address, p.size_bytes)
        else:
            if st.objects.pop(p.object_id, None) is None:
                bad("object_lifecycle", f"free of unknown object {p.object_id}")

    @staticmethod
    def _check_tensor(ev: Event, st: _DeviceState, bad) -> None:
        p = ev.payload
        if (ev.kind is EventKind.TensorAlloc) != (p.action is TensorAction.Alloc):
            bad("payload_kind", f"{ev.kind.name} with action {p.action.name}")
        if p.size_bytes <= 0:
            bad("tensor_size", "tensor size must be positive after normalization")
            return
        if p.action is TensorAction.Alloc:
            if p.tensor_id in st.tensors:
                bad("tensor_lifecycle", f"tensor {p.tensor_id} already live")
            obj = st.objects.get(p.object_id)
            if obj is None:
                bad("tensor_containment", f"tensor {p.tensor_id} in non-live object {p.object_id}")
            elif not (obj[0] <= p.address and p.address + p.size_bytes <= obj[0] + obj[1]):
                bad("tensor_containment", f"tensor {p.tensor_id} outside object {p.object_id}")
            st.tensors[p.tensor_id] = (p.object_id, p.address, p.size_bytes)
        else:
            if st.tensors.pop(p.tensor_id, None) is None:
                bad("tensor_lifecycle", f"reclaim of tensor {p.tensor_id} before its alloc")


def validate_stream(events: Iterable[Event]) -> list[Violation]:
    """Return every invariant violation in ``events``; an empty list means valid."""
    v = StreamValidator()
    report: list[Violation] = []
    for ev in events:
        report.extend(v.check(ev))
    return report
