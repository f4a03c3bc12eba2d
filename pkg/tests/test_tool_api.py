import itertools

import pytest
from hypothesis import given, strategies as st

from acceltrace.errors import DuplicateName, NoKnobEnabled, NoToolSpecified, UnknownKnob, UnknownTool
from acceltrace.events import EventKind
from acceltrace.tools import REGISTRY, Knobs, RangeFilter, Registry, Tool, apply_range_filter
from acceltrace.tools.api import descriptor_for, register_tool, select_tool
from acceltrace.workload import generate_trace, preset

from builders import MiB, StreamBuilder


@pytest.fixture(scope="module")
def bert():
    return generate_trace(preset("bert-toy", layers=2))


def test_builtin_registry_has_six_tools():
    assert len(REGISTRY) == 6
    assert set(REGISTRY.names()) == {"kernel-freq", "memchar", "hotness", "mem-timeline", "attribution",
                                     "uvm-profile"}


def test_register_and_duplicate():
    reg = Registry()

    class T(Tool):
        name = "kernel-freq"

    register_tool(T, reg)
    assert "kernel-freq" in reg.names()
    with pytest.raises(DuplicateName):
        register_tool(T, reg)


def test_merge_declared_iff_mergeable():
    class Bad(Tool):
        name = "bad"
        mergeable = True

    with pytest.raises(TypeError):
        descriptor_for(Bad)


@pytest.mark.parametrize("flag,env,expect", [
    ("memchar", {"PASTA_TOOL": "kernel-freq"}, "memchar"),
    (None, {"PASTA_TOOL": "kernel-freq"}, "kernel-freq"),
    ("hotness", {}, "hotness"),
    (None, {}, NoToolSpecified),
    ("", {"PASTA_TOOL": ""}, NoToolSpecified),
    ("nope", {"PASTA_TOOL": "memchar"}, UnknownTool),
    (None, {"PASTA_TOOL": "nope"}, UnknownTool),
])
def test_select_tool_precedence(flag, env, expect):
    if isinstance(expect, str):
        assert select_tool(flag, env).name == expect
    else:
        with pytest.raises(expect):
            select_tool(flag, env)


def test_unknown_tool_lists_names():
    with pytest.raises(UnknownTool) as ei:
        REGISTRY.get("nope")
    assert "memchar" in str(ei.value)


def three_kernels():
    b = StreamBuilder()
    b.malloc(1, 0x10000, 2 * MiB)
    for name in ("a", "b", "c"):
        b.kernel(name, [0x10000, 0x10020])
    return b.events


def test_window_zero_keeps_kernel_zero():
    ev = three_kernels()
    out = list(apply_range_filter(ev, RangeFilter((0, 0))))
    scoped = [e for e in out if e.kind is not EventKind.DeviceMalloc]
    assert [e.kind for e in scoped] == [EventKind.KernelLaunch, EventKind.GlobalAccess, EventKind.GlobalAccess,
                                        EventKind.KernelComplete]
    assert all(e.payload.grid_id == 0 for e in scoped)
    assert out[0].kind is EventKind.DeviceMalloc


def test_empty_filter_is_identity(bert):
    assert list(apply_range_filter(bert, RangeFilter())) == bert
    assert list(apply_range_filter(bert, None)) == bert


def _grids_under_label(events, label):
    """Marker oracle: grids launched while some enclosing range has ``label``."""
    open_ = []
    out = set()
    for e in events:
        if e.kind is EventKind.RangeStart:
            open_.append(e.payload.label)
        elif e.kind is EventKind.RangeEnd:
            open_.pop()
        elif e.kind is EventKind.KernelLaunch and label in open_:
            out.add(e.payload.grid_id)
    return out


def test_label_filter_matches_markers(bert):
    want = _grids_under_label(bert, "transformer_layer")
    assert want and len(want) < sum(e.kind is EventKind.KernelLaunch for e in bert)
    out = list(apply_range_filter(bert, RangeFilter(marker_labels={"transformer_layer"})))
    got = {e.payload.grid_id for e in out if e.kind is EventKind.KernelLaunch}
    assert got == want
    acc = {e.payload.grid_id for e in out if e.kind is EventKind.GlobalAccess}
    assert acc <= want


def test_label_and_window_intersect(bert):
    want = {g for g in _grids_under_label(bert, "transformer_layer") if 10 <= g <= 40}
    out = apply_range_filter(bert, RangeFilter((10, 40), {"transformer_layer"}))
    assert {e.payload.grid_id for e in out if e.kind is EventKind.KernelLaunch} == want


def test_lifecycle_always_passes(bert):
    out = list(apply_range_filter(bert, RangeFilter((10**6, 10**6))))
    keep = {EventKind.DeviceMalloc, EventKind.TensorAlloc, EventKind.TensorReclaim, EventKind.OperatorStart}
    for k in keep:
        assert sum(e.kind is k for e in out) == sum(e.kind is k for e in bert)
    assert not any(e.kind is EventKind.KernelLaunch for e in out)


def test_from_env_and_validation():
    f = RangeFilter.from_env({"START_GRID_ID": "5", "END_GRID_ID": "9"})
    assert f.grid_window == (5, 9)
    assert RangeFilter.from_env({"START_GRID_ID": "5"}, end=7).grid_window == (5, 7)
    assert RangeFilter.from_env({"START_GRID_ID": "5"}).admits_grid(10**9)
    assert RangeFilter.from_env({}).empty
    with pytest.raises(ValueError):
        RangeFilter((4, 2))


@given(st.integers(0, 80), st.integers(0, 80), st.integers(0, 10), st.integers(0, 10))
def test_wider_window_admits_superset(lo, span, grow_lo, grow_hi):
    ev = _BERT
    inner = set(apply_range_filter(ev, RangeFilter((lo, lo + span))))
    outer = set(apply_range_filter(ev, RangeFilter((max(0, lo - grow_lo), lo + span + grow_hi))))
    assert inner <= outer


_BERT = generate_trace(preset("bert-toy", layers=1))


def test_knobs():
    assert Knobs.parse(["MAX_CALLED_KERNEL", " "]).active() == ["MAX_CALLED_KERNEL"]
    with pytest.raises(UnknownKnob):
        Knobs.parse(["MAX_FOO"])
    with pytest.raises(NoKnobEnabled):
        Knobs({}).active()
    with pytest.raises(NoKnobEnabled):
        Knobs({"MAX_CALLED_KERNEL": False}).active()
