import io
import struct

import pytest
from hypothesis import given, strategies as st

from acceltrace.errors import (
    BadMagic, CorruptRecord, DialectLoss, InvariantViolation, ParseError, TruncatedRecord, UnsupportedVersion,
)
from acceltrace.events import Event, EventKind, TensorAction, TensorEventInfo
from acceltrace.traceio import (
    TAG_TENSOR, Dialect, TraceHeader, event_to_json, from_jsonl, load_events, read_trace, save_events, to_jsonl,
    write_trace,
)
from acceltrace.workload import WorkloadSpec, Model, Mode, generate_trace, preset

from builders import MiB, StreamBuilder

HEADER = struct.Struct("<4sIBIQQ")


@pytest.fixture(scope="module")
def trace():
    return generate_trace(preset("bert-toy", layers=1, mode=Mode.Train))


def small():
    b = StreamBuilder()
    b.malloc(1, 0x7F00_0000_0000, 2 * MiB)
    b.talloc(1, 1, 0x7F00_0000_0000, 4096)
    g = b.kernel("gemm", [0x7F00_0000_0000])
    b.treclaim(1, 1, 0x7F00_0000_0000, 4096)
    return b.events


def test_three_events_identity(tmp_path):
    ev = small()[:3]
    p = tmp_path / "t.pasta"
    write_trace(ev, Dialect.Unified, p)
    header, it = read_trace(p)
    assert header.event_count == 3 and header.dialect is Dialect.Unified
    assert list(it) == ev


def test_empty_trace(tmp_path):
    p = tmp_path / "e.pasta"
    write_trace([], Dialect.Unified, p)
    raw = p.read_bytes()
    assert len(raw) == HEADER.size
    magic, version, dialect, devices, epoch, count = HEADER.unpack(raw)
    assert (magic, version, count) == (b"PSTA", 1, 0)
    assert list(read_trace(p)[1]) == []


@pytest.mark.parametrize("dialect", list(Dialect))
def test_round_trip_every_dialect(tmp_path, trace, dialect):
    p = tmp_path / f"t.{dialect.name}.pasta"
    write_trace(trace, dialect, p)
    header, it = read_trace(p)
    assert header.dialect is dialect
    assert header.event_count == len(trace)
    assert header.device_count == 1
    assert list(it) == trace


def test_nvx_and_rmx_normalize_identically(tmp_path, trace):
    write_trace(trace, Dialect.NVX, tmp_path / "a.pasta")
    write_trace(trace, Dialect.RMX, tmp_path / "b.pasta")
    a = list(read_trace(tmp_path / "a.pasta")[1])
    b = list(read_trace(tmp_path / "b.pasta")[1])
    assert a == b == trace


def _records(raw):
    """(offset, tag, body) of every record after the header."""
    off = HEADER.size
    out = []
    while off < len(raw):
        (n,) = struct.unpack_from("<I", raw, off)
        (tag,) = struct.unpack_from("<H", raw, off + 4)
        out.append((off, tag, raw[off + 6: off + 4 + n]))
        off += 4 + n
    return out


def test_rmx_tensor_record_has_negative_size_and_microseconds(tmp_path):
    b = StreamBuilder()
    b.malloc(1, 0x10000, 2 * MiB)
    b.talloc(1, 1, 0x10000, 4096, ts=2000)
    b.treclaim(1, 1, 0x10000, 4096, ts=5000)
    p = tmp_path / "r.pasta"
    write_trace(b.events, Dialect.RMX, p)
    recs = [r for r in _records(p.read_bytes()) if r[1] == TAG_TENSOR]
    assert len(recs) == 2
    device, seq, ts_us, stack = struct.unpack_from("<IQQi", recs[1][2])
    obj, tensor, addr, size = struct.unpack_from("<QQQq", recs[1][2], 24)
    assert (ts_us, size) == (5, -4096)
    assert struct.unpack_from("<QQQq", recs[0][2], 24)[3] == 4096

    ev = list(read_trace(p)[1])[2]
    assert ev.kind is EventKind.TensorReclaim
    assert ev.timestamp_ns == 5000
    assert ev.payload.size_bytes == 4096 and ev.payload.action is TensorAction.Reclaim


def test_rmx_strict_rejects_sub_microsecond(tmp_path):
    b = StreamBuilder()
    b.add(EventKind.RuntimeCall, StreamBuilder().api("x").events[0].payload, ts=1500)
    with pytest.raises(DialectLoss):
        write_trace(b.events, Dialect.RMX, tmp_path / "x.pasta")
    write_trace(b.events, Dialect.RMX, tmp_path / "y.pasta", strict=False)
    assert next(read_trace(tmp_path / "y.pasta")[1]).timestamp_ns == 1000


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "m.pasta"
    p.write_bytes(HEADER.pack(b"NOPE", 1, 0, 0, 0, 0))
    with pytest.raises(BadMagic):
        read_trace(p)
    p.write_bytes(HEADER.pack(b"PSTA", 9, 0, 0, 0, 0))
    with pytest.raises(UnsupportedVersion):
        read_trace(p)


def test_truncation_reports_byte_offset(tmp_path):
    ev = small()
    p = tmp_path / "t.pasta"
    write_trace(ev, Dialect.Unified, p)
    raw = p.read_bytes()
    recs = _records(raw)
    cut = recs[3][0] + 5  # inside the fourth record's prefix
    p.write_bytes(raw[:cut])
    with pytest.raises(TruncatedRecord) as ei:
        list(read_trace(p)[1])
    assert ei.value.offset == recs[3][0]


def test_missing_records_detected_by_count(tmp_path):
    ev = small()
    p = tmp_path / "t.pasta"
    write_trace(ev, Dialect.Unified, p)
    raw = p.read_bytes()
    last = _records(raw)[-1][0]
    p.write_bytes(raw[:last])
    with pytest.raises(TruncatedRecord):
        list(read_trace(p)[1])


def test_unknown_tag_is_corrupt(tmp_path):
    ev = small()
    p = tmp_path / "t.pasta"
    write_trace(ev, Dialect.Unified, p)
    raw = bytearray(p.read_bytes())
    off = _records(bytes(raw))[0][0]
    struct.pack_into("<H", raw, off + 4, 0x7777)
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptRecord) as ei:
        list(read_trace(p)[1])
    assert ei.value.offset == off


def test_reader_validates_stream(tmp_path):
    b = StreamBuilder()
    b.launch("a")
    b.grids[0] = 3
    b.launch("b")
    p = tmp_path / "g.pasta"
    write_trace(b.events, Dialect.Unified, p)
    with pytest.raises(InvariantViolation) as ei:
        list(read_trace(p)[1])
    assert ei.value.violations[0].rule == "grid_id_gap"
    assert len(list(read_trace(p, validate=False)[1])) == 2


def test_stacks_are_interned(tmp_path):
    b = StreamBuilder()
    for _ in range(50):
        b.kernel("same")
    p = tmp_path / "s.pasta"
    write_trace(b.events, Dialect.Unified, p)
    defs = [r for r in _records(p.read_bytes()) if r[1] == 0xFFFF]
    assert len(defs) == 1
    assert list(read_trace(p)[1]) == b.events


def test_independent_readers(tmp_path, trace):
    p = tmp_path / "t.pasta"
    write_trace(trace, Dialect.Unified, p)
    _, a = read_trace(p)
    _, b = read_trace(p)
    assert next(a) == next(b)
    assert next(a).seq == 1


def test_jsonl_launch_line():
    b = StreamBuilder()
    b.launch("gemm")
    text = to_jsonl(b.events)
    assert text.count("\n") == 1
    assert "kernel_launch" in text and "grid_dims" in text


def test_jsonl_parse_error_has_line():
    good = to_jsonl(small())
    lines = good.splitlines()
    lines[2] = "{not json"
    with pytest.raises(ParseError) as ei:
        list(from_jsonl("\n".join(lines)))
    assert ei.value.line == 3


def test_jsonl_round_trip(trace):
    assert list(from_jsonl(to_jsonl(trace))) == trace


def test_save_and_load_by_extension(tmp_path, trace):
    for name in ("t.jsonl", "t.pasta"):
        save_events(trace, tmp_path / name)
        assert list(load_events(tmp_path / name)) == trace


@given(st.lists(st.tuples(st.integers(1, 64), st.booleans()), min_size=1, max_size=30),
       st.sampled_from([Dialect.NVX, Dialect.RMX]))
def test_dialect_sign_and_flag_agree(tmp_path_factory, sizes, dialect):
    b = StreamBuilder()
    b.malloc(1, 0x100000, 64 * MiB)
    live = []
    for i, (kb, reclaim) in enumerate(sizes):
        addr = 0x100000 + i * MiB
        b.talloc(i + 1, 1, addr, kb * 512)
        live.append((i + 1, addr, kb * 512))
        if reclaim:
            tid, a, sz = live.pop(0)
            b.treclaim(tid, 1, a, sz)
    p = tmp_path_factory.mktemp("d") / "x.pasta"
    write_trace(b.events, dialect, p)
    back = list(read_trace(p)[1])
    assert back == b.events
    assert all(e.payload.size_bytes > 0 for e in back if e.kind in (EventKind.TensorAlloc, EventKind.TensorReclaim))
