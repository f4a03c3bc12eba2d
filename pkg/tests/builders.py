"""Hand-built event streams for tests."""

from acceltrace.events import (
    ApiCallInfo, CallStack, CopyDirection, Event, EventKind, Frame, FrameLevel, KernelCompleteInfo,
    KernelLaunchInfo, MemAccessInfo, MemCopyInfo, ObjectAction, ObjectEventInfo, OperatorInfo,
    RangeMarkerInfo, TensorAction, TensorEventInfo,
)

MiB = 1 << 20


def stack_for(name):
    return CallStack((
        Frame(FrameLevel.Python, "main", "run.py", 3),
        Frame(FrameLevel.Framework, "aten::op", "", 0),
        Frame(FrameLevel.Native, name, "lib.so", 0),
    ))


class StreamBuilder:
    def __init__(self, tick=1000):
        self.events = []
        self.tick = tick
        self.clock = {}
        self.grids = {}
        self.ranges = 0

    def add(self, kind, payload, device=0, ts=None, stack=None):
        if ts is None:
            ts = self.clock.get(device, 0)
            self.clock[device] = ts + self.tick
        else:
            self.clock[device] = max(self.clock.get(device, 0), ts)
        self.events.append(Event(len(self.events), device, ts, kind, payload, stack))
        return self

    def malloc(self, oid, addr, size, device=0):
        return self.add(EventKind.DeviceMalloc, ObjectEventInfo(oid, addr, size, ObjectAction.Malloc), device)

    def free(self, oid, addr, size, device=0):
        return self.add(EventKind.DeviceFree, ObjectEventInfo(oid, addr, size, ObjectAction.Free), device)

    def talloc(self, tid, oid, addr, size, device=0, ts=None):
        return self.add(EventKind.TensorAlloc, TensorEventInfo(tid, oid, addr, size, TensorAction.Alloc), device, ts)

    def treclaim(self, tid, oid, addr, size, device=0, ts=None):
        return self.add(EventKind.TensorReclaim, TensorEventInfo(tid, oid, addr, size, TensorAction.Reclaim),
                        device, ts)

    def launch(self, name, device=0, args=(), ts=None, stack=True):
        g = self.grids.get(device, 0)
        self.grids[device] = g + 1
        self.add(EventKind.KernelLaunch, KernelLaunchInfo(name, g, (1, 1, 1), (32, 1, 1), 0, tuple(args)),
                 device, ts, stack_for(name) if stack else None)
        return g

    def access(self, grid, addr, device=0, size=32, write=False, ts=None):
        return self.add(EventKind.GlobalAccess, MemAccessInfo(grid, addr, size, write), device, ts)

    def complete(self, grid, device=0, ts=None):
        return self.add(EventKind.KernelComplete, KernelCompleteInfo(grid), device, ts)

    def kernel(self, name, addrs=(), device=0, args=()):
        g = self.launch(name, device, args)
        for a in addrs:
            self.access(g, a, device)
        self.complete(g, device)
        return g

    def range_start(self, label, device=0):
        self.ranges += 1
        self.add(EventKind.RangeStart, RangeMarkerInfo(self.ranges, label), device)
        return self.ranges

    def range_end(self, rid, label, device=0):
        return self.add(EventKind.RangeEnd, RangeMarkerInfo(rid, label), device)

    def op(self, oid, name, start=True, device=0):
        kind = EventKind.OperatorStart if start else EventKind.OperatorEnd
        return self.add(kind, OperatorInfo(oid, name), device)

    def copy(self, src, dst, size, direction=CopyDirection.HostToDevice, device=0):
        return self.add(EventKind.MemCopy, MemCopyInfo(src, dst, size, direction), device)

    def api(self, name, device=0):
        return self.add(EventKind.RuntimeCall, ApiCallInfo(name), device)


def random_spec(rng, **fixed):
    """A small random workload for equivalence and oracle sweeps."""
    from acceltrace.workload import Mode, Model, Parallelism, WorkloadSpec

    model = rng.choice(list(Model))
    par = rng.choice([Parallelism.None_] * 3 + [Parallelism.DP, Parallelism.TP, Parallelism.PP])
    kw = dict(
        model=model,
        layers=rng.randint(1, 3),
        batch=rng.choice([1, 2, 4]),
        mode=rng.choice(list(Mode)),
        devices=1 if par is Parallelism.None_ else 2,
        parallelism=par,
        seed=rng.randrange(1 << 30),
        access_sample_rate=rng.choice([1 / 256, 1 / 128, 1 / 64]),
        untouched_arg_rate=rng.choice([0.0, 0.0, 0.3, 0.7]),
        hidden=rng.choice([64, 128]),
        seq_len=rng.choice([16, 32]),
        vocab=256,
        image=rng.choice([16, 32]),
        fc_hidden=64,
    )
    if par is Parallelism.PP and kw["layers"] < 2:
        kw["layers"] = 2
    kw.update(fixed)
    return WorkloadSpec(**kw)
