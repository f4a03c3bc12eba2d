from collections import defaultdict

import pytest
from hypothesis import given, strategies as st

from acceltrace.allocator import Placement
from acceltrace.errors import SpecError
from acceltrace.events import EventKind, validate_stream
from acceltrace.traceio import Dialect, write_trace
from acceltrace.workload import (
    Mode, Model, Parallelism, WorkloadSpec, emit_kernel_accesses, generate_trace, iter_trace, load_spec_file,
    preset, spec_from_mapping,
)


def test_same_seed_same_bytes(tmp_path):
    spec = WorkloadSpec(model=Model.CnnToy, layers=2, seed=7)
    write_trace(generate_trace(spec), Dialect.Unified, tmp_path / "a")
    write_trace(generate_trace(spec), Dialect.Unified, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_iter_matches_list():
    spec = preset("bert-toy", layers=1)
    assert list(iter_trace(spec)) == generate_trace(spec)


def _accessed_objects(events):
    """Per (device, grid): objects named in args, objects actually touched."""
    objs = []
    args, touched = {}, defaultdict(set)
    for e in events:
        if e.kind is EventKind.DeviceMalloc:
            p = e.payload
            objs.append((p.address, p.address + p.size_bytes, p.object_id))
        elif e.kind is EventKind.KernelLaunch:
            args[(e.device, e.payload.grid_id)] = set(e.payload.arg_objects)
        elif e.kind is EventKind.GlobalAccess:
            a = e.payload.address
            for lo, hi, oid in objs:
                if lo <= a < hi:
                    touched[(e.device, e.payload.grid_id)].add(oid)
    return args, touched


def test_untouched_args_appear():
    ev = generate_trace(WorkloadSpec(model=Model.CnnToy, layers=2, untouched_arg_rate=0.5))
    args, touched = _accessed_objects(ev)
    assert any(touched[k] < a for k, a in args.items())
    assert all(touched[k] <= a for k, a in args.items())


def test_no_untouched_args_by_default():
    ev = generate_trace(WorkloadSpec(model=Model.CnnToy, layers=2))
    args, touched = _accessed_objects(ev)
    assert all(touched[k] == a for k, a in args.items() if touched[k])


def _canonical(events, device):
    sub = [e for e in events if e.device == device]
    base = min(e.payload.address for e in sub if e.kind is EventKind.DeviceMalloc)
    out = []
    for e in sub:
        p = e.payload
        d = {k: getattr(p, k) for k in p.__dataclass_fields__}
        for k in ("address", "src_addr", "dst_addr"):
            if k in d and d[k] >= base:
                d[k] -= base
        out.append((e.kind, e.timestamp_ns, tuple(sorted(d.items(), key=lambda kv: kv[0]))))
    return out


def test_dp_devices_identical_up_to_base():
    ev = generate_trace(preset("bert-toy", layers=2, mode=Mode.Train, devices=2, parallelism=Parallelism.DP))
    assert validate_stream(ev) == []
    assert _canonical(ev, 0) == _canonical(ev, 1)


@pytest.mark.parametrize("par", [Parallelism.TP, Parallelism.PP])
def test_multi_device_modes_valid(par):
    ev = generate_trace(preset("gpt2-toy", layers=2, mode=Mode.Train, devices=2, parallelism=par))
    assert validate_stream(ev) == []
    assert {e.device for e in ev} == {0, 1}


def test_operators_wrap_one_to_four_kernels():
    ev = generate_trace(preset("gpt2-toy", layers=2, mode=Mode.Train))
    inside = None
    for e in ev:
        if e.kind is EventKind.OperatorStart:
            inside = 0
        elif e.kind is EventKind.KernelLaunch and inside is not None:
            inside += 1
        elif e.kind is EventKind.OperatorEnd:
            assert 1 <= inside <= 4
            inside = None


def test_timestamps_whole_microseconds():
    ev = generate_trace(preset("cnn-toy", layers=2))
    assert all(e.timestamp_ns % 1000 == 0 for e in ev)


def test_training_adds_backward_and_frees():
    inf = generate_trace(preset("bert-toy", layers=1))
    tr = generate_trace(preset("bert-toy", layers=1, mode=Mode.Train))
    names = {e.payload.name for e in tr if e.kind is EventKind.OperatorStart}
    assert len(tr) > len(inf)
    assert any(n.endswith("Backward") for n in names)
    assert sum(e.kind is EventKind.TensorReclaim for e in tr) > 0


def _placement(tid, addr, size):
    return Placement(tid, 1, addr - 0x1000, size, addr)


def test_full_rate_tiles_tensor():
    acc = emit_kernel_accesses(0, [_placement(1, 0x1000, 1024)], 1.0)
    assert [a.address for a in acc] == [0x1000 + 32 * i for i in range(32)]
    assert all(a.size_bytes == 32 for a in acc)


@given(st.floats(0.01, 1.0), st.integers(1, 4096), st.integers(0, 10**6))
def test_sampled_accesses_cover_rate_inside_tensor(rate, granules, seed):
    import random

    t = _placement(1, 0x10000, granules * 32)
    acc = emit_kernel_accesses(0, [t], rate, random.Random(seed))
    hit = {a.address for a in acc}
    assert len(hit) == len(acc)
    assert len(hit) >= rate * granules - 1e-6
    assert all(t.address <= a and a + 32 <= t.address + t.size for a in hit)


def test_half_rate_example():
    t = _placement(1, 0x1000, 1024)
    acc = emit_kernel_accesses(0, [t], 0.5)
    assert len({a.address for a in acc}) >= 16


def test_one_of_two_tensors_touched():
    a, b = _placement(1, 0x1000, 1024), _placement(2, 0x1400, 1024)
    acc = emit_kernel_accesses(0, [a], 1.0)
    assert all(a.address <= x.address < a.address + 1024 for x in acc)


@pytest.mark.parametrize("kw", [
    dict(devices=2),
    dict(parallelism=Parallelism.DP, devices=1),
    dict(layers=0),
    dict(access_sample_rate=0.0),
    dict(untouched_arg_rate=1.5),
])
def test_bad_specs(kw):
    with pytest.raises(SpecError):
        generate_trace(WorkloadSpec(**kw))


def test_unknown_preset():
    with pytest.raises(SpecError):
        preset("resnet")


def test_spec_file(tmp_path):
    p = tmp_path / "w.conf"
    p.write_text("# demo\npreset = gpt2-toy\nmode = TRAIN\naccess_sample_rate = 1/32\nlayers=3\n")
    s = load_spec_file(p)
    assert s.model is Model.TransformerDecoderToy and s.mode is Mode.Train
    assert (s.access_sample_rate, s.layers, s.batch) == (1 / 32, 3, 2)
    assert spec_from_mapping({"parallelism": "dp", "devices": "2"}).parallelism is Parallelism.DP
    with pytest.raises(SpecError):
        spec_from_mapping({"colour": "red"})
