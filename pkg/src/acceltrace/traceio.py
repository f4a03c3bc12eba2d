"""Binary and JSONL trace formats, plus the two vendor-style dialects.

Binary layout (little-endian)::

    header:  "PSTA" | u32 version | u8 dialect | u32 device_count
             | u64 epoch_ns | u64 event_count
    record:  u32 length | u16 tag | payload[length - 2]

Strings are u32-length-prefixed UTF-8.  Call stacks are interned: the first
time a stack appears a STACK_DEF record (tag 0xFFFF, not counted in
``event_count``) defines it, and events reference it by index.

Dialect differences handled here:

* NVX: nanosecond timestamps, common fields in order (ts, seq, device),
  tensor events share one tag and carry an explicit action flag.
* RMX: microsecond timestamps, common fields in order (device, seq, ts),
  tensor events share one tag and encode release as a negative size.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Union

from .errors import (
    BadMagic,
    CorruptRecord,
    DialectLoss,
    InvariantViolation,
    ParseError,
    TraceError,
    TruncatedRecord,
    UnsupportedVersion,
)
from .events import (
    PAYLOAD_TYPE,
    ApiCallInfo,
    CallStack,
    CopyDirection,
    DeviceOpInfo,
    Event,
    EventKind,
    Frame,
    FrameLevel,
    KernelCompleteInfo,
    KernelLaunchInfo,
    MemAccessInfo,
    MemCopyInfo,
    MemSpace,
    ObjectAction,
    ObjectEventInfo,
    OperatorInfo,
    RangeMarkerInfo,
    StreamValidator,
    TensorAction,
    TensorEventInfo,
)

MAGIC = b"PSTA"
VERSION = 1
TAG_TENSOR = 0x00F0
TAG_STACK_DEF = 0xFFFF

_HEADER = struct.Struct("<4sIBIQQ")
_LEN = struct.Struct("<I")
_TAG = struct.Struct("<H")


class Dialect(enum.IntEnum):
    Unified = 0
    NVX = 1
    RMX = 2


# (format, field order) of the per-event common fields
_COMMON = {
    Dialect.Unified: (struct.Struct("<QIQi"), ("seq", "device", "ts", "stack")),
    Dialect.NVX: (struct.Struct("<QQIi"), ("ts", "seq", "device", "stack")),
    Dialect.RMX: (struct.Struct("<IQQi"), ("device", "seq", "ts", "stack")),
}


@dataclass(frozen=True)
class TraceHeader:
    dialect: Dialect = Dialect.Unified
    device_count: int = 0
    epoch_ns: int = 0
    event_count: int = 0
    magic: bytes = MAGIC
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, int(self.dialect),
                            self.device_count, self.epoch_ns, self.event_count)


# -- payload codecs -------------------------------------------------------------

def _s(text: str) -> bytes:
    b = text.encode("utf-8")
    return _LEN.pack(len(b)) + b


class _Cursor:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, st: struct.Struct) -> tuple:
        vals = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return vals

    def string(self) -> str:
        (n,) = _LEN.unpack_from(self.buf, self.pos)
        self.pos += 4
        end = self.pos + n
        if end > len(self.buf):
            raise struct.error("string runs past record end")
        s = self.buf[self.pos:end].decode("utf-8")
        self.pos = end
        return s


_Q = struct.Struct("<Q")
_I = struct.Struct("<I")
_LAUNCH = struct.Struct("<Q3I3III")
_ACCESS = struct.Struct("<QQHBB")
_DEVOP = struct.Struct("<QQQ")
_COPY = struct.Struct("<QQQB")
_API = struct.Struct("<IQQ")
_TENSOR = struct.Struct("<QQQQB")
_TENSOR_RMX = struct.Struct("<QQQq")
_OBJECT = struct.Struct("<QQQB")
_FRAME = struct.Struct("<B")


def _enc_payload(p) -> bytes:
    t = type(p)
    if t is MemAccessInfo:
        return _ACCESS.pack(p.grid_id, p.address, p.size_bytes, int(p.is_write), int(p.space))
    if t is KernelLaunchInfo:
        return (_s(p.kernel_name)
                + _LAUNCH.pack(p.grid_id, *p.grid_dims, *p.block_dims, p.stream, len(p.arg_objects))
                + b"".join(_Q.pack(o) for o in p.arg_objects))
    if t is KernelCompleteInfo:
        return _Q.pack(p.grid_id)
    if t is DeviceOpInfo:
        return _DEVOP.pack(p.grid_id, p.address, p.size_bytes) + _s(p.detail)
    if t is MemCopyInfo:
        return _COPY.pack(p.src_addr, p.dst_addr, p.size_bytes, int(p.direction))
    if t is ApiCallInfo:
        return _s(p.api_name) + _API.pack(p.stream, p.address, p.size_bytes)
    if t is TensorEventInfo:
        return _TENSOR.pack(p.tensor_id, p.object_id, p.address, p.size_bytes, int(p.action))
    if t is ObjectEventInfo:
        return _OBJECT.pack(p.object_id, p.address, p.size_bytes, int(p.action))
    if t is OperatorInfo:
        return _Q.pack(p.op_id) + _s(p.name)
    if t is RangeMarkerInfo:
        return _Q.pack(p.range_id) + _s(p.label)
    raise TypeError(f"cannot encode payload {t.__name__}")


def _dec_payload(ptype: type, cur: _Cursor):
    if ptype is MemAccessInfo:
        g, a, n, w, sp = cur.take(_ACCESS)
        return MemAccessInfo(g, a, n, bool(w), MemSpace(sp))
    if ptype is KernelLaunchInfo:
        name = cur.string()
        g, gx, gy, gz, bx, by, bz, stream, nargs = cur.take(_LAUNCH)
        args = tuple(cur.take(_Q)[0] for _ in range(nargs))
        return KernelLaunchInfo(name, g, (gx, gy, gz), (bx, by, bz), stream, args)
    if ptype is KernelCompleteInfo:
        return KernelCompleteInfo(cur.take(_Q)[0])
    if ptype is DeviceOpInfo:
        g, a, n = cur.take(_DEVOP)
        return DeviceOpInfo(g, a, n, cur.string())
    if ptype is MemCopyInfo:
        s, d, n, direction = cur.take(_COPY)
        return MemCopyInfo(s, d, n, CopyDirection(direction))
    if ptype is ApiCallInfo:
        name = cur.string()
        return ApiCallInfo(name, *cur.take(_API))
    if ptype is TensorEventInfo:
        t, o, a, n, act = cur.take(_TENSOR)
        return TensorEventInfo(t, o, a, n, TensorAction(act))
    if ptype is ObjectEventInfo:
        o, a, n, act = cur.take(_OBJECT)
        return ObjectEventInfo(o, a, n, ObjectAction(act))
    if ptype is OperatorInfo:
        return OperatorInfo(cur.take(_Q)[0], cur.string())
    if ptype is RangeMarkerInfo:
        return RangeMarkerInfo(cur.take(_Q)[0], cur.string())
    raise TypeError(ptype)


def _enc_stack(stack: CallStack) -> bytes:
    parts = [_I.pack(len(stack.frames))]
    for f in stack.frames:
        parts.append(_FRAME.pack(int(f.level)) + _s(f.function) + _s(f.file) + _I.pack(f.line))
    return b"".join(parts)


def _dec_stack(cur: _Cursor) -> CallStack:
    (n,) = cur.take(_I)
    frames = []
    for _ in range(n):
        (level,) = cur.take(_FRAME)
        fn = cur.string()
        fl = cur.string()
        (line,) = cur.take(_I)
        frames.append(Frame(FrameLevel(level), fn, fl, line))
    return CallStack(tuple(frames))


# -- writing ----------------------------------------------------------------------

class TraceWriter:
    """Streams events into a ``.pasta`` file; the header is patched on close."""

    def __init__(self, path: Union[str, Path], dialect: Dialect = Dialect.Unified,
                 strict: bool = True, epoch_ns: int = 0) -> None:
        self.dialect = Dialect(dialect)
        self.strict = strict
        self.epoch_ns = epoch_ns
        self._fh = open(path, "wb")
        self._fh.write(TraceHeader(self.dialect, 0, epoch_ns, 0).pack())
        self._stacks: dict[CallStack, int] = {}
        self._common = _COMMON[self.dialect][0]
        self.count = 0
        self.devices = 0

    def _record(self, tag: int, body: bytes) -> None:
        self._fh.write(_LEN.pack(len(body) + 2) + _TAG.pack(tag) + body)

    def write(self, ev: Event) -> None:
        stack_idx = -1
        if ev.stack is not None:
            stack_idx = self._stacks.get(ev.stack, -1)
            if stack_idx < 0:
                stack_idx = len(self._stacks)
                self._stacks[ev.stack] = stack_idx
                self._record(TAG_STACK_DEF, _I.pack(stack_idx) + _enc_stack(ev.stack))

        ts = ev.timestamp_ns
        d = self.dialect
        if d is Dialect.RMX:
            if ts % 1000:
                if self.strict:
                    raise DialectLoss(f"seq {ev.seq}: timestamp {ts} ns is not a whole microsecond")
            ts //= 1000
        if d is Dialect.Unified:
            common = self._common.pack(ev.seq, ev.device, ts, stack_idx)
        elif d is Dialect.NVX:
            common = self._common.pack(ts, ev.seq, ev.device, stack_idx)
        else:
            common = self._common.pack(ev.device, ev.seq, ts, stack_idx)

        p = ev.payload
        if d is not Dialect.Unified and type(p) is TensorEventInfo:
            tag = TAG_TENSOR
            if d is Dialect.NVX:
                body = _TENSOR.pack(p.tensor_id, p.object_id, p.address, p.size_bytes, int(p.action))
            else:
                signed = -p.size_bytes if p.action is TensorAction.Reclaim else p.size_bytes
                body = _TENSOR_RMX.pack(p.object_id, p.tensor_id, p.address, signed)
        else:
            tag = int(ev.kind)
            body = _enc_payload(p)
        self._record(tag, common + body)
        self.count += 1
        self.devices = max(self.devices, ev.device + 1)

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(TraceHeader(self.dialect, self.devices, self.epoch_ns, self.count).pack())
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_trace(events: Iterable[Event], dialect: Dialect, path: Union[str, Path],
                strict: bool = True, epoch_ns: int = 0) -> None:
    with TraceWriter(path, dialect, strict=strict, epoch_ns=epoch_ns) as w:
        for ev in events:
            w.write(ev)


# -- reading ----------------------------------------------------------------------

def _read_header(fh: IO[bytes]) -> TraceHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedRecord(len(raw), "header")
    magic, version, dialect, ndev, epoch, count = _HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (supported: {VERSION})")
    try:
        dialect = Dialect(dialect)
    except ValueError:
        raise UnsupportedVersion(f"unknown dialect code {dialect}") from None
    return TraceHeader(dialect, ndev, epoch, count, magic, version)


def _decode(header: TraceHeader, tag: int, body: bytes, stacks: list) -> Event:
    st, order = _COMMON[header.dialect]
    cur = _Cursor(body)
    vals = dict(zip(order, cur.take(st)))
    ts = vals["ts"]
    if header.dialect is Dialect.RMX:
        ts *= 1000
    stack = None
    if vals["stack"] >= 0:
        try:
            stack = stacks[vals["stack"]]
        except IndexError:
            raise struct.error(f"undefined stack index {vals['stack']}") from None

    if tag == TAG_TENSOR and header.dialect is not Dialect.Unified:
        if header.dialect is Dialect.NVX:
            t, o, a, n, act = cur.take(_TENSOR)
            action = TensorAction(act)
        else:
            o, t, a, signed = cur.take(_TENSOR_RMX)
            if signed == 0:
                raise struct.error("zero tensor size")
            action = TensorAction.Reclaim if signed < 0 else TensorAction.Alloc
            n = abs(signed)
        kind = EventKind.TensorAlloc if action is TensorAction.Alloc else EventKind.TensorReclaim
        payload = TensorEventInfo(t, o, a, n, action)
    else:
        try:
            kind = EventKind(tag)
        except ValueError:
            raise struct.error(f"unknown kind tag {tag:#x}") from None
        payload = _dec_payload(PAYLOAD_TYPE[kind], cur)
    if cur.pos != len(body):
        raise struct.error(f"{len(body) - cur.pos} trailing bytes")
    return Event(vals["seq"], vals["device"], ts, kind, payload, stack)


def _iter_records(path: Path, header: TraceHeader, validate: bool) -> Iterator[Event]:
    validator = StreamValidator() if validate else None
    stacks: list[CallStack] = []
    seen = 0
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        offset = _HEADER.size
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) < 4:
                raise TruncatedRecord(offset, "length prefix")
            (length,) = _LEN.unpack(raw)
            if length < 2:
                raise CorruptRecord(offset, f"record length {length}")
            rec = fh.read(length)
            if len(rec) < length:
                raise TruncatedRecord(offset, f"need {length} bytes, have {len(rec)}")
            (tag,) = _TAG.unpack_from(rec)
            body = rec[2:]
            try:
                if tag == TAG_STACK_DEF:
                    cur = _Cursor(body)
                    (idx,) = cur.take(_I)
                    if idx != len(stacks):
                        raise struct.error(f"stack index {idx} out of order")
                    stacks.append(_dec_stack(cur))
                    offset += 4 + length
                    continue
                ev = _decode(header, tag, body, stacks)
            except (struct.error, ValueError, UnicodeDecodeError) as exc:
                raise CorruptRecord(offset, str(exc)) from None
            if validator is not None:
                bad = validator.check(ev)
                if bad:
                    raise InvariantViolation(bad)
            seen += 1
            if seen > header.event_count:
                raise CorruptRecord(offset, f"more records than header event_count {header.event_count}")
            offset += 4 + length
            yield ev
    if seen != header.event_count:
        raise TruncatedRecord(offset, f"header promises {header.event_count} events, found {seen}")


def read_trace(path: Union[str, Path], validate: bool = True) -> tuple[TraceHeader, Iterator[Event]]:
    """Read the header eagerly and return a lazy iterator over normalized events.

    The iterator opens its own file handle, so several readers may walk the
    same file independently.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh)
    return header, _iter_records(path, header, validate)


# -- JSONL mirror -------------------------------------------------------------------

def _payload_to_json(p) -> dict:
    t = type(p)
    d = {name: getattr(p, name) for name in t.__dataclass_fields__}
    for k, v in d.items():
        if isinstance(v, enum.Enum):
            d[k] = v.name
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def event_to_json(ev: Event) -> dict:
    d = {
        "seq": ev.seq,
        "device": ev.device,
        "ts": ev.timestamp_ns,
        "kind": ev.kind.snake,
        "payload": _payload_to_json(ev.payload),
    }
    if ev.stack is not None:
        d["stack"] = [[f.level.name, f.function, f.file, f.line] for f in ev.stack.frames]
    return d


_ENUM_FIELDS = {
    "space": MemSpace,
    "direction": CopyDirection,
}


def _payload_from_json(kind: EventKind, d: dict):
    ptype = PAYLOAD_TYPE[kind]
    kw = dict(d)
    for k, v in kw.items():
        if k in _ENUM_FIELDS:
            kw[k] = _ENUM_FIELDS[k][v]
        elif k == "action":
            kw[k] = (TensorAction if ptype is TensorEventInfo else ObjectAction)[v]
        elif isinstance(v, list):
            kw[k] = tuple(v)
    return ptype(**kw)


def event_from_json(d: dict) -> Event:
    kind = EventKind.from_snake(d["kind"])
    stack = None
    if "stack" in d:
        stack = CallStack(tuple(Frame(FrameLevel[lv], fn, fl, ln) for lv, fn, fl, ln in d["stack"]))
    return Event(d["seq"], d["device"], d["ts"], kind, _payload_from_json(kind, d["payload"]), stack)


def to_jsonl(events: Iterable[Event], out: Optional[IO[str]] = None) -> Optional[str]:
    """Write one JSON object per line to ``out``; return the text if ``out`` is None."""
    buf = io.StringIO() if out is None else out
    for ev in events:
        buf.write(json.dumps(event_to_json(ev), separators=(",", ":")))
        buf.write("\n")
    return buf.getvalue() if out is None else None


def from_jsonl(text: Union[str, Iterable[str]]) -> Iterator[Event]:
    lines = text.splitlines() if isinstance(text, str) else text
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield event_from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(lineno, f"{type(exc).__name__}: {exc}") from None


# -- convenience ----------------------------------------------------------------------

def load_events(path: Union[str, Path], validate: bool = True) -> Iterator[Event]:
    """Iterate events from a ``.pasta`` or ``.jsonl`` file, chosen by extension."""
    path = Path(path)
    if path.suffix == ".jsonl":
        def gen():
            validator = StreamValidator() if validate else None
            with open(path, encoding="utf-8") as fh:
                for ev in from_jsonl(fh):
                    if validator is not None:
                        bad = validator.check(ev)
                        if bad:
                            raise InvariantViolation(bad)
                    yield ev
        return gen()
    return read_trace(path, validate=validate)[1]


def save_events(events: Iterable[Event], path: Union[str, Path],
                dialect: Dialect = Dialect.Unified, strict: bool = True) -> None:
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            to_jsonl(events, fh)
    else:
        write_trace(events, dialect, path, strict=strict)


__all__ = [
    "Dialect", "TraceHeader", "TraceWriter", "TraceError", "read_trace", "write_trace",
    "to_jsonl", "from_jsonl", "event_to_json", "event_from_json", "load_events", "save_events",
]
