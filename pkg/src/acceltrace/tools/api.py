"""Tool template, registry, range filtering and knobs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional

from ..errors import DuplicateName, NoKnobEnabled, NoToolSpecified, UnknownKnob, UnknownTool
from ..events import Event, EventKind, is_kernel_scoped


class Tool:
    """Base class for analysis tools.

    Subclasses override the handlers they care about.  Memory accesses go
    through a partial-state protocol so the parallel engine can fan them out:
    ``new_state`` makes an empty partial, ``on_mem_access`` folds one access
    into it, ``merge`` combines two partials and ``absorb`` commits a merged
    partial into the tool.  A tool that sets ``mergeable = True`` promises
    that ``merge`` is associative and commutative with ``new_state()`` as
    identity.  Non-mergeable tools may ignore ``state`` and update
    themselves; only the serial engine accepts them.

    Access handlers may run concurrently in parallel mode; every other
    handler is called from one thread in stream order.
    """

    name: str = ""
    needs_device_ops: bool = True
    mergeable: bool = False
    description: str = ""

    def new_state(self) -> Any:
        return None

    def on_mem_access(self, state: Any, rec) -> None:
        pass

    def merge(self, a: Any, b: Any) -> Any:
        raise NotImplementedError(f"{self.name} is not mergeable")

    def absorb(self, state: Any) -> None:
        pass

    def on_kernel_launch(self, rec) -> None:
        pass

    def on_kernel_complete(self, rec) -> None:
        pass

    def on_tensor_event(self, rec) -> None:
        pass

    def on_object_event(self, rec) -> None:
        pass

    def on_mem_copy(self, rec) -> None:
        pass

    def on_op_boundary(self, rec) -> None:
        pass

    def on_range(self, rec) -> None:
        pass

    def on_api_call(self, rec) -> None:
        pass

    def on_device_op(self, rec) -> None:
        pass

    def on_finalize(self):
        raise NotImplementedError


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    needs_device_ops: bool
    mergeable: bool
    factory: Callable[..., Tool] = field(compare=False)
    description: str = ""

    def create(self, **options) -> Tool:
        return self.factory(**options)


class Registry:
    def __init__(self) -> None:
        self._tools: dict[str, ToolDescriptor] = {}

    def register(self, desc: ToolDescriptor) -> "Registry":
        if desc.name in self._tools:
            raise DuplicateName(f"tool {desc.name!r} already registered")
        self._tools[desc.name] = desc
        return self

    def get(self, name: str) -> ToolDescriptor:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownTool(name, self._tools) from None

    def names(self) -> list[str]:
        return sorted(self._tools)

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)


REGISTRY = Registry()


def descriptor_for(cls: type[Tool]) -> ToolDescriptor:
    overrides_merge = cls.merge is not Tool.merge
    if cls.mergeable != overrides_merge:
        raise TypeError(f"{cls.__name__}: merge must be defined iff mergeable")
    if not cls.name:
        raise TypeError(f"{cls.__name__} has no name")
    return ToolDescriptor(cls.name, cls.needs_device_ops, cls.mergeable, cls, cls.description)


def register_tool(cls: type[Tool], registry: Optional[Registry] = None) -> type[Tool]:
    """Register a Tool subclass; usable as a class decorator."""
    (REGISTRY if registry is None else registry).register(descriptor_for(cls))
    return cls


def select_tool(flag: Optional[str], env: Optional[Mapping[str, str]] = None,
                registry: Optional[Registry] = None) -> ToolDescriptor:
    """Resolve the tool name: the CLI flag wins over ``PASTA_TOOL``."""
    reg = REGISTRY if registry is None else registry
    env = os.environ if env is None else env
    name = flag or env.get("PASTA_TOOL") or None
    if not name:
        raise NoToolSpecified(f"no tool given; registered tools: {', '.join(reg.names())}")
    return reg.get(name)


# -- range filtering -----------------------------------------------------------

@dataclass(frozen=True)
class RangeFilter:
    grid_window: Optional[tuple[int, int]] = None
    marker_labels: Optional[frozenset[str]] = None

    def __post_init__(self) -> None:
        if self.grid_window is not None:
            lo, hi = self.grid_window
            if lo < 0 or hi < lo:
                raise ValueError(f"bad grid window [{lo}, {hi}]")
        if self.marker_labels is not None and not isinstance(self.marker_labels, frozenset):
            object.__setattr__(self, "marker_labels", frozenset(self.marker_labels))

    @property
    def empty(self) -> bool:
        return self.grid_window is None and not self.marker_labels

    @classmethod
    def from_env(cls, env: Mapping[str, str], start: Optional[int] = None, end: Optional[int] = None,
                 labels: Optional[Iterable[str]] = None) -> "RangeFilter":
        """Build a filter from START_GRID_ID/END_GRID_ID with flag overrides."""
        if start is None and env.get("START_GRID_ID"):
            start = int(env["START_GRID_ID"])
        if end is None and env.get("END_GRID_ID"):
            end = int(env["END_GRID_ID"])
        window = None
        if start is not None or end is not None:
            window = (start or 0, end if end is not None else (1 << 63))
        return cls(window, frozenset(labels) if labels else None)

    def admits_grid(self, grid_id: int) -> bool:
        return self.grid_window is None or self.grid_window[0] <= grid_id <= self.grid_window[1]


_ALWAYS = {EventKind.DeviceMalloc, EventKind.DeviceFree}


def apply_range_filter(events: Iterable[Event], filt: Optional[RangeFilter]) -> Iterator[Event]:
    """Yield the events admitted by ``filt``.

    Kernel admission is decided at launch (grid window and enclosing marker
    labels, per device) and inherited by that kernel's device ops and
    completion.  Framework and object lifecycle events always pass.  Other
    host events pass when inside a matching marker (or no labels are set).
    """
    if filt is None or filt.empty:
        yield from events
        return
    labels = filt.marker_labels or None
    stacks: dict[int, list[str]] = {}
    depth: dict[int, int] = {}  # per device: number of open ranges carrying a wanted label
    admitted: dict[tuple[int, int], bool] = {}
    for ev in events:
        kind = ev.kind
        if kind >= 64:
            if kind is EventKind.RangeStart:
                st = stacks.setdefault(ev.device, [])
                st.append(ev.payload.label)
                if labels and ev.payload.label in labels:
                    depth[ev.device] = depth.get(ev.device, 0) + 1
            elif kind is EventKind.RangeEnd:
                st = stacks.get(ev.device)
                if st:
                    lab = st.pop()
                    if labels and lab in labels:
                        depth[ev.device] -= 1
            yield ev
            continue
        if kind in _ALWAYS:
            yield ev
            continue
        inside = labels is None or depth.get(ev.device, 0) > 0
        if kind is EventKind.KernelLaunch:
            ok = inside and filt.admits_grid(ev.payload.grid_id)
            admitted[(ev.device, ev.payload.grid_id)] = ok
            if ok:
                yield ev
        elif is_kernel_scoped(kind):
            key = (ev.device, ev.payload.grid_id)
            ok = admitted.get(key, False)
            if kind is EventKind.KernelComplete:
                admitted.pop(key, None)
            if ok:
                yield ev
        elif inside:
            yield ev


# -- knobs ---------------------------------------------------------------------

# metric(per-kernel stats) -> value; stats has "launches" and "accesses"
KnobMetric = Callable[[Mapping[str, int]], int]

KNOWN_KNOBS: dict[str, KnobMetric] = {
    "MAX_MEM_REFERENCED_KERNEL": lambda s: s["accesses"],
    "MAX_CALLED_KERNEL": lambda s: s["launches"],
}


def register_knob(name: str, metric: KnobMetric) -> None:
    if name in KNOWN_KNOBS:
        raise DuplicateName(f"knob {name!r} already registered")
    KNOWN_KNOBS[name] = metric


@dataclass(frozen=True)
class Knobs:
    enabled: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k in self.enabled:
            if k not in KNOWN_KNOBS:
                raise UnknownKnob(k, KNOWN_KNOBS)

    @classmethod
    def parse(cls, names: Iterable[str]) -> "Knobs":
        return cls({n.strip(): True for n in names if n.strip()})

    def active(self) -> list[str]:
        names = [k for k, on in self.enabled.items() if on]
        if not names:
            raise NoKnobEnabled(f"enable at least one of: {', '.join(sorted(KNOWN_KNOBS))}")
        return names
