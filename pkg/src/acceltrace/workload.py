"""Synthetic DL-workload trace generator.

Traces model toy CNN and transformer networks running on a pooled caching
allocator.  Every trace satisfies :func:`acceltrace.events.validate_stream`,
all timestamps are whole microseconds, and output is deterministic for a
fixed seed.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import math
import random
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from .allocator import AllocatorState, Placement
from .errors import SpecError
from .events import (
    ApiCallInfo,
    CallStack,
    CopyDirection,
    Event,
    EventKind,
    Frame,
    FrameLevel,
    KernelCompleteInfo,
    KernelLaunchInfo,
    MemAccessInfo,
    MemCopyInfo,
    ObjectEventInfo,
    OperatorInfo,
    RangeMarkerInfo,
    TensorAction,
    TensorEventInfo,
)

ELEM_BYTES = 4
GRANULE = 32
TICK_NS = 1000
BASE_ADDRESS = 0x7F00_0000_0000
DEVICE_ADDRESS_STRIDE = 1 << 40


class Model(enum.Enum):
    CnnToy = "cnn-toy"
    TransformerEncoderToy = "bert-toy"
    TransformerDecoderToy = "gpt2-toy"


class Mode(enum.Enum):
    Inference = "inference"
    Train = "train"


class Parallelism(enum.Enum):
    None_ = "none"
    DP = "dp"
    TP = "tp"
    PP = "pp"


@dataclass(frozen=True)
class WorkloadSpec:
    model: Model = Model.TransformerEncoderToy
    layers: int = 4
    batch: int = 4
    mode: Mode = Mode.Inference
    devices: int = 1
    parallelism: Parallelism = Parallelism.None_
    seed: int = 0
    access_sample_rate: float = 1 / 64
    untouched_arg_rate: float = 0.0
    # shape knobs
    hidden: int = 256
    seq_len: int = 64
    vocab: int = 1024
    image: int = 64
    fc_hidden: int = 512
    steps: int = 1
    # synthetic kernel timing: duration = overhead + touched bytes / throughput
    launch_overhead_ns: int = 5000
    kernel_bytes_per_ns: float = 4.0
    plant_hot_kernel: bool = False

    def validate(self) -> None:
        if self.devices < 1:
            raise SpecError("devices must be >= 1")
        if self.parallelism is Parallelism.None_ and self.devices != 1:
            raise SpecError("parallelism=none requires devices=1")
        if self.parallelism is not Parallelism.None_ and self.devices < 2:
            raise SpecError(f"parallelism={self.parallelism.value} requires devices >= 2")
        if self.parallelism is Parallelism.PP and self.layers < self.devices:
            raise SpecError("pipeline parallelism needs at least one layer per device")
        if not 0 < self.access_sample_rate <= 1:
            raise SpecError("access_sample_rate must be in (0, 1]")
        if not 0 <= self.untouched_arg_rate < 1:
            raise SpecError("untouched_arg_rate must be in [0, 1)")
        for name in ("layers", "batch", "hidden", "seq_len", "vocab", "image", "fc_hidden", "steps"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.kernel_bytes_per_ns <= 0 or self.launch_overhead_ns < 0:
            raise SpecError("kernel timing parameters must be positive")


PRESETS: dict[str, WorkloadSpec] = {
    "bert-toy": WorkloadSpec(model=Model.TransformerEncoderToy, layers=4, batch=4, hidden=256, seq_len=64),
    "gpt2-toy": WorkloadSpec(model=Model.TransformerDecoderToy, layers=8, batch=2, hidden=256, seq_len=64),
    "cnn-toy": WorkloadSpec(model=Model.CnnToy, layers=5, batch=8, image=64),
    # training CNN with a narrow classifier and short kernels: many multi-page
    # chunks get reused by smaller tensors, so whole-object prefetch overfetches
    "high-ws": WorkloadSpec(model=Model.CnnToy, layers=5, batch=8, image=64, mode=Mode.Train,
                            fc_hidden=64, kernel_bytes_per_ns=32.0),
}


def preset(name: str, **overrides) -> WorkloadSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
    return dataclasses.replace(base, **overrides)


def _coerce(ftype, raw: str):
    raw = raw.strip()
    if ftype in ("Model", Model):
        return _enum_lookup(Model, raw)
    if ftype in ("Mode", Mode):
        return _enum_lookup(Mode, raw)
    if ftype in ("Parallelism", Parallelism):
        return _enum_lookup(Parallelism, raw)
    if ftype in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if ftype in ("float", float):
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
        return float(raw)
    return int(raw, 0)


def _enum_lookup(cls, raw: str):
    key = raw.strip()
    for member in cls:
        if key.lower() in (member.name.lower(), member.value, member.name.lower().rstrip("_")):
            return member
    raise SpecError(f"bad {cls.__name__} value {raw!r}")


def spec_from_mapping(values: dict[str, str], base: Optional[WorkloadSpec] = None) -> WorkloadSpec:
    values = dict(values)
    if "preset" in values:
        base = preset(values.pop("preset").strip())
    base = base or WorkloadSpec()
    fields = {f.name: f.type for f in dataclasses.fields(WorkloadSpec)}
    kw = {}
    for key, raw in values.items():
        name = key.strip().replace("-", "_")
        if name not in fields:
            raise SpecError(f"unknown workload key {key!r}")
        try:
            kw[name] = _coerce(fields[name], str(raw))
        except ValueError as exc:
            raise SpecError(f"bad value for {key}: {exc}") from None
    return dataclasses.replace(base, **kw)


def load_spec_file(path: Union[str, Path], base: Optional[WorkloadSpec] = None) -> WorkloadSpec:
    """Parse a ``key = value`` config file (``#`` starts a comment)."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return spec_from_mapping(values, base)


# -- access emission -------------------------------------------------------------------

def emit_kernel_accesses(grid_id: int, tensors: Sequence[Placement], rate: float,
                         rng: Optional[random.Random] = None,
                         written: frozenset = frozenset(), repeat: int = 1) -> list[MemAccessInfo]:
    """Sample 32 B accesses covering at least ``rate`` of each tensor's bytes.

    Granules are spread evenly over the tensor with a random phase, so the
    touched set is always inside ``[address, address + size)``.
    """
    out: list[MemAccessInfo] = []
    for t in tensors:
        n = t.size // GRANULE
        if n == 0:
            continue
        k = min(n, max(1, math.ceil(rate * n - 1e-9)))
        step = n / k
        phase = rng.random() * step if rng is not None else 0.0
        is_write = t.tensor_id in written
        base = t.address
        picks = [base + int(i * step + phase) * GRANULE for i in range(k)]
        for _ in range(repeat):
            out.extend(MemAccessInfo(grid_id, a, GRANULE, is_write) for a in picks)
    return out


# -- builder -----------------------------------------------------------------------------

@dataclass(eq=False)
class Tensor:
    placement: Placement
    name: str
    param: bool = False

    @property
    def size(self) -> int:
        return self.placement.size


@dataclass
class _TapeEntry:
    op: str
    reads: list
    writes: list


@dataclass
class _Clock:
    now: int = 0


# backward kernels for each forward op: (grad-of-activation kernel, grad-of-param kernel)
_BACKWARD_KERNELS = {
    "aten::linear": ("ampere_sgemm_128x64_nt", "ampere_sgemm_64x64_tn"),
    "aten::bmm": ("ampere_sgemm_128x64_nt", "ampere_sgemm_128x64_nt"),
    "aten::_softmax": ("softmax_warp_backward", "softmax_warp_backward"),
    "aten::add": ("vectorized_elementwise_kernel<add_backward>", "vectorized_elementwise_kernel<add_backward>"),
    "aten::layer_norm": ("layer_norm_grad_input_kernel", "GammaBetaBackwardCUDAKernel"),
    "aten::gelu": ("vectorized_elementwise_kernel<gelu_backward>", "vectorized_elementwise_kernel<gelu_backward>"),
    "aten::embedding": ("embedding_backward_feature_kernel", "embedding_backward_feature_kernel"),
    "aten::conv2d": ("at::native::col2im_kernel", "ampere_sgemm_64x64_tn"),
    "aten::max_pool2d": ("max_pool_backward_nchw", "max_pool_backward_nchw"),
    "aten::relu": ("vectorized_elementwise_kernel<threshold_backward>", "vectorized_elementwise_kernel<threshold_backward>"),
    "aten::cross_entropy": ("nll_loss_backward_reduce_cuda_kernel", "nll_loss_backward_reduce_cuda_kernel"),
    "nccl:all_reduce": ("ncclDevKernel_AllReduce_Sum_f32_RING_LL", "ncclDevKernel_AllReduce_Sum_f32_RING_LL"),
}


class _Device:
    """Per-device event builder sharing a clock with its program."""

    def __init__(self, spec: WorkloadSpec, device: int, clock: _Clock, sink: list,
                 rng: random.Random, scale: float = 1.0) -> None:
        self.spec = spec
        self.device = device
        self.clock = clock
        self.sink = sink
        self.rng = rng
        self.scale = scale
        self.train = spec.mode is Mode.Train
        self.alloc = AllocatorState(base_address=BASE_ADDRESS + device * DEVICE_ADDRESS_STRIDE)
        self.objects: dict[int, int] = {}  # live object id -> size
        self.next_grid = 0
        self.next_op = 1
        self.next_range = 1
        self.open_ranges: list[int] = []
        self.access_counts: Counter = Counter()
        self.tape: list[_TapeEntry] = []
        self.grads: dict[Tensor, Tensor] = {}
        self.produced_by: dict[Tensor, int] = {}
        self._stacks: dict[tuple, CallStack] = {}
        self.cur_op = ""

    # -- emission primitives --------------------------------------------------

    def emit(self, kind: EventKind, payload, stack=None, ts=None) -> None:
        self.sink.append((self.clock.now if ts is None else ts, self.device, kind, payload, stack))
        if ts is None:
            self.clock.now += TICK_NS

    def api(self, name: str, kind: EventKind = EventKind.RuntimeCall) -> None:
        self.emit(kind, ApiCallInfo(name))

    # -- memory -----------------------------------------------------------------

    def tensor(self, nbytes: int, name: str, param: bool = False) -> Tensor:
        nbytes = max(1, int(nbytes * self.scale))
        p, mallocs = self.alloc.alloc_tensor(nbytes)
        for m in mallocs:
            self.objects[m.object_id] = m.size_bytes
            self.emit(EventKind.DeviceMalloc, m)
        self.emit(EventKind.TensorAlloc,
                  TensorEventInfo(p.tensor_id, p.object_id, p.address, p.size, TensorAction.Alloc))
        return Tensor(p, name, param)

    def free(self, t: Tensor) -> None:
        info, _ = self.alloc.free_tensor(t.placement.tensor_id)
        self.emit(EventKind.TensorReclaim, info)

    def release(self, *ts: Tensor) -> None:
        """Drop a forward activation; in training it lives until backward."""
        if self.train:
            return
        for t in ts:
            self.free(t)

    # -- ranges / operators ------------------------------------------------------

    @contextmanager
    def range(self, label: str):
        rid = self.next_range
        self.next_range += 1
        self.emit(EventKind.RangeStart, RangeMarkerInfo(rid, label))
        try:
            yield rid
        finally:
            self.emit(EventKind.RangeEnd, RangeMarkerInfo(rid, label))

    def _stack(self, op: str, kernel: str) -> CallStack:
        key = (op, kernel)
        st = self._stacks.get(key)
        if st is None:
            model = self.spec.model.name
            st = CallStack((
                Frame(FrameLevel.Python, "main", "run.py", 12),
                Frame(FrameLevel.Python, f"{model}.forward", "model.py", 40 + len(self._stacks)),
                Frame(FrameLevel.Framework, op, "aten/native_functions.cpp", 0),
                Frame(FrameLevel.Native, kernel, "libkernels.so", 0),
            ))
            self._stacks[key] = st
        return st

    def op(self, name: str, kernels: Sequence[tuple], tape: bool = True) -> None:
        """Run one operator made of ``(kernel_name, reads, writes)`` kernels."""
        oid = self.next_op
        self.next_op += 1
        self.cur_op = name
        self.emit(EventKind.OperatorStart, OperatorInfo(oid, name))
        for kname, reads, writes in kernels:
            self.kernel(kname, reads, writes)
        self.emit(EventKind.OperatorEnd, OperatorInfo(oid, name))
        if tape and self.train:
            reads = list(dict.fromkeys(t for _, r, _ in kernels for t in r))
            writes = list(dict.fromkeys(t for _, _, w in kernels for t in w))
            idx = len(self.tape)
            self.tape.append(_TapeEntry(name, reads, writes))
            for t in writes:
                if not t.param:
                    self.produced_by.setdefault(t, idx)

    def kernel(self, name: str, reads: Sequence[Tensor], writes: Sequence[Tensor], repeat: int = 1) -> None:
        spec = self.spec
        grid = self.next_grid
        self.next_grid += 1
        touched: list[Placement] = []
        seen = set()
        for t in list(reads) + list(writes):
            if t.placement.tensor_id not in seen:
                seen.add(t.placement.tensor_id)
                touched.append(t.placement)
        touched_objs = []
        for p in touched:
            if p.object_id not in touched_objs:
                touched_objs.append(p.object_id)
        args = list(touched_objs)
        if spec.untouched_arg_rate > 0:
            r = spec.untouched_arg_rate
            want = round(r * len(touched_objs) / (1 - r))
            spare = sorted(o for o in self.objects if o not in touched_objs)
            if want and spare:
                args.extend(self.rng.sample(spare, min(want, len(spare))))

        nbytes = sum(p.size for p in touched)
        dur = spec.launch_overhead_ns + nbytes / spec.kernel_bytes_per_ns
        dur = max(TICK_NS, math.ceil(dur / TICK_NS) * TICK_NS)
        threads = max(1, nbytes // 16)
        grid_dims = (max(1, min(65535, threads // 256)), 1, 1)
        launch_ts = self.clock.now
        self.emit(EventKind.KernelLaunch,
                  KernelLaunchInfo(name, grid, grid_dims, (256, 1, 1), 0, tuple(args)),
                  stack=self._stack(self.cur_op, name), ts=launch_ts)
        written = frozenset(t.placement.tensor_id for t in writes)
        accesses = emit_kernel_accesses(grid, touched, spec.access_sample_rate, self.rng, written, repeat)
        n = len(accesses)
        for j, acc in enumerate(accesses):
            ts = launch_ts + (j * dur // n) // TICK_NS * TICK_NS
            self.sink.append((ts, self.device, EventKind.GlobalAccess, acc, None))
        self.access_counts[name] += n
        end = launch_ts + dur
        self.emit(EventKind.KernelComplete, KernelCompleteInfo(grid), ts=end)
        self.clock.now = end + TICK_NS

    def copy(self, src: int, dst: int, nbytes: int, direction: CopyDirection) -> None:
        self.emit(EventKind.MemCopy, MemCopyInfo(src, dst, nbytes, direction))

    # -- training -----------------------------------------------------------------

    def grad_for(self, t: Tensor) -> Tensor:
        g = self.grads.get(t)
        if g is None:
            g = self.tensor(t.size / self.scale, f"grad({t.name})")
            self.grads[t] = g
        return g

    def backward(self, seed_grads: dict) -> Iterator[None]:
        """Replay the tape in reverse, freeing activations as their producers finish."""
        self.grads.update(seed_grads)
        for idx in range(len(self.tape) - 1, -1, -1):
            entry = self.tape[idx]
            outs = [self.grads[w] for w in entry.writes if w in self.grads]
            if not outs:
                continue
            act_k, param_k = _BACKWARD_KERNELS.get(entry.op, ("autograd_backward_kernel",) * 2)
            kernels = []
            done = set()
            for t in entry.reads:
                if t in done or not (t.param or t in self.produced_by):
                    continue
                done.add(t)
                g = self.grad_for(t)
                saved = [r for r in entry.reads if r is not t][:2]
                kernels.append((param_k if t.param else act_k, outs + saved, [g]))
            if kernels:
                for i in range(0, len(kernels), 4):
                    self.op(entry.op.replace("aten::", "autograd::") + "Backward", kernels[i:i + 4], tape=False)
            # outputs of this entry are now fully consumed
            for w in entry.writes:
                if w.param:
                    continue
                g = self.grads.pop(w, None)
                if g is not None:
                    self.free(g)
                if self.produced_by.get(w) == idx:
                    self.free(w)
            yield
        self.tape.clear()
        self.produced_by.clear()

    def optimizer_step(self, params: Sequence[Tensor]) -> Iterator[None]:
        with self.range("optimizer"):
            for p in params:
                g = self.grads.pop(p, None)
                if g is None:
                    continue
                self.op("aten::_foreach_add_", [("multi_tensor_apply_kernel<adam>", [g, p], [p])], tape=False)
                self.free(g)
                yield


# -- model programs ------------------------------------------------------------------

@dataclass
class _Layer:
    params: dict


def _transformer_params(d: _Device, li: int, h: int) -> dict:
    E = ELEM_BYTES
    names = [("wqkv", h * 3 * h), ("bqkv", 3 * h), ("wo", h * h), ("bo", h), ("ln1", 2 * h),
             ("w1", h * 4 * h), ("b1", 4 * h), ("w2", 4 * h * h), ("b2", h), ("ln2", 2 * h)]
    return {n: d.tensor(sz * E, f"layer{li}.{n}", param=True) for n, sz in names}


def _transformer_layer(d: _Device, x: Tensor, P: dict, decoder: bool, tp: bool) -> Iterator[Tensor]:
    spec = d.spec
    b, s, h = spec.batch, spec.seq_len, spec.hidden
    heads = max(1, h // 64)
    act = b * s * h * ELEM_BYTES
    gemm = "at::cuda::blas::gemm_and_bias"

    def linear(inp, w, bias, out):
        if decoder:
            return [("ampere_sgemm_128x64_tn", [inp, w], [out]),
                    ("vectorized_elementwise_kernel<add>", [bias, out], [out])]
        return [(gemm, [inp, w, bias], [out])]

    qkv = d.tensor(3 * act, "qkv")
    d.op("aten::linear", linear(x, P["wqkv"], P["bqkv"], qkv))
    yield
    scores = d.tensor(b * heads * s * s * ELEM_BYTES, "scores")
    d.op("aten::bmm", [("ampere_sgemm_64x64_tn", [qkv], [scores])])
    yield
    probs = d.tensor(scores.size / d.scale, "probs")
    softmax = "fused_causal_softmax_warp_forward" if decoder else "softmax_warp_forward"
    d.op("aten::_softmax", [(softmax, [scores], [probs])])
    d.release(scores)
    yield
    ctx = d.tensor(act, "ctx")
    d.op("aten::bmm", [("ampere_sgemm_128x64_nn", [probs, qkv], [ctx])])
    d.release(probs, qkv)
    yield
    attn = d.tensor(act, "attn")
    d.op("aten::linear", linear(ctx, P["wo"], P["bo"], attn))
    d.release(ctx)
    if tp:
        d.op("nccl:all_reduce", [("ncclDevKernel_AllReduce_Sum_f32_RING_LL", [attn], [attn])])
    yield
    r1 = d.tensor(act, "resid1")
    d.op("aten::add", [("vectorized_elementwise_kernel<add>", [attn, x], [r1])])
    d.release(attn)
    yield
    y = d.tensor(act, "ln1_out")
    d.op("aten::layer_norm", [("vectorized_layer_norm_kernel", [r1, P["ln1"]], [y])])
    d.release(r1)
    yield
    h1 = d.tensor(4 * act, "ffn1")
    d.op("aten::linear", linear(y, P["w1"], P["b1"], h1))
    yield
    h2 = d.tensor(4 * act, "gelu")
    d.op("aten::gelu", [("vectorized_elementwise_kernel<gelu>", [h1], [h2])])
    d.release(h1)
    yield
    f = d.tensor(act, "ffn2")
    d.op("aten::linear", linear(h2, P["w2"], P["b2"], f))
    d.release(h2)
    if tp:
        d.op("nccl:all_reduce", [("ncclDevKernel_AllReduce_Sum_f32_RING_LL", [f], [f])])
    yield
    r2 = d.tensor(act, "resid2")
    d.op("aten::add", [("vectorized_elementwise_kernel<add>", [f, y], [r2])])
    d.release(f, y)
    yield
    out = d.tensor(act, "layer_out")
    d.op("aten::layer_norm", [("vectorized_layer_norm_kernel", [r2, P["ln2"]], [out])])
    d.release(r2)
    yield
    return out


def _conv_plan(spec: WorkloadSpec) -> list[tuple[int, int, int, bool]]:
    """(c_in, c_out, spatial, pool_after) per conv layer."""
    widths = [32, 64, 128, 128, 256, 256, 384, 384]
    plan = []
    c_in, size = 3, spec.image
    for i in range(spec.layers):
        c_out = widths[min(i, len(widths) - 1)]
        pool = i < 3 and size >= 4
        plan.append((c_in, c_out, size, pool))
        c_in = c_out
        if pool:
            size //= 2
    return plan


class _Program:
    """Drives one model across the devices of a workload."""

    def __init__(self, spec: WorkloadSpec, devices: list[_Device]) -> None:
        self.spec = spec
        self.devs = devices
        self.tp = spec.parallelism is Parallelism.TP

    def stages(self) -> list[list[int]]:
        n = len(self.devs)
        L = self.spec.layers
        bounds = [round(i * L / n) for i in range(n + 1)]
        return [list(range(bounds[i], bounds[i + 1])) for i in range(n)]

    def run(self) -> Iterator[None]:
        spec = self.spec
        stages = self.stages()
        for d in self.devs:
            d.api("cudaSetDevice")
        params = [self.build_params(d, i, stages[i], i == len(self.devs) - 1) for i, d in enumerate(self.devs)]
        for step in range(spec.steps):
            yield from self.step(step, stages, params)
        if spec.plant_hot_kernel:
            for d, ps in zip(self.devs, params):
                target = max(ps["all"], key=lambda t: t.size)
                per = len(emit_kernel_accesses(0, [target.placement], spec.access_sample_rate))
                top = max(d.access_counts.values(), default=0)
                d.cur_op = "custom::hot_spot"
                oid = d.next_op
                d.next_op += 1
                d.emit(EventKind.OperatorStart, OperatorInfo(oid, d.cur_op))
                d.kernel("planted_hot_kernel", [target], [], repeat=top // max(per, 1) + 1)
                d.emit(EventKind.OperatorEnd, OperatorInfo(oid, d.cur_op))
                yield
        for d in self.devs:
            d.api("cudaDeviceSynchronize", EventKind.Sync)

    # -- parameters -------------------------------------------------------------

    def build_params(self, d: _Device, stage: int, layers: list[int], last: bool) -> dict:
        spec = self.spec
        E = ELEM_BYTES
        ps: dict = {"layers": {}, "all": []}
        first = stage == 0
        if spec.model is Model.CnnToy:
            plan = _conv_plan(spec)
            for li in layers:
                c_in, c_out, _, _ = plan[li]
                ps["layers"][li] = {
                    "w": d.tensor(c_out * c_in * 9 * E, f"conv{li}.weight", param=True),
                    "b": d.tensor(c_out * E, f"conv{li}.bias", param=True),
                }
            if last:
                c_last, size = plan[-1][1], plan[-1][2] // (2 if plan[-1][3] else 1)
                feat = c_last * size * size
                ps["fc1"] = d.tensor(feat * spec.fc_hidden * E, "fc1.weight", param=True)
                ps["fc2"] = d.tensor(spec.fc_hidden * 10 * E, "fc2.weight", param=True)
        else:
            h = spec.hidden
            if first:
                ps["emb"] = d.tensor(spec.vocab * h * E, "wte", param=True)
                ps["pos"] = d.tensor(spec.seq_len * h * E, "wpe", param=True)
            for li in layers:
                ps["layers"][li] = _transformer_params(d, li, h)
            if last:
                ps["lnf"] = d.tensor(2 * h * E, "ln_f", param=True)
                if spec.model is Model.TransformerDecoderToy:
                    ps["head"] = d.tensor(spec.vocab * h * E, "lm_head", param=True)
                else:
                    ps["head"] = d.tensor(h * h * E, "pooler", param=True)
        for v in ps.values():
            if isinstance(v, Tensor):
                ps["all"].append(v)
        for lp in ps["layers"].values():
            ps["all"].extend(lp.values())
        return ps

    # -- one iteration -------------------------------------------------------------

    def step(self, step: int, stages, params) -> Iterator[None]:
        spec = self.spec
        devs = self.devs
        train = spec.mode is Mode.Train
        x = None
        outs = []
        for si, d in enumerate(devs):
            with d.range("forward"):
                if si == 0:
                    x = yield from self.stem(d, params[si])
                else:
                    prev = devs[si - 1]
                    x = yield from self.pipe_send(prev, d, x)
                for li in stages[si]:
                    label = "conv_layer" if spec.model is Model.CnnToy else "transformer_layer"
                    with d.range(label):
                        x = yield from self.layer(d, x, li, params[si])
                if si == len(devs) - 1:
                    x = yield from self.head(d, x, params[si])
            outs.append(x)
        last = devs[-1]
        if not train:
            last.copy(x.placement.address, 0, x.size, CopyDirection.DeviceToHost)
            last.free(x)
            return
        # backward: loss gradient on the last stage, then walk stages in reverse
        seed = {x: last.tensor(x.size / last.scale, "grad(logits)")}
        for si in range(len(devs) - 1, -1, -1):
            d = devs[si]
            with d.range("backward"):
                yield from d.backward(seed)
                if si > 0:
                    seed = yield from self.pipe_grad(d, devs[si - 1], outs[si - 1])
        if spec.parallelism is Parallelism.DP:
            for d, ps in zip(devs, params):
                grads = [d.grads[p] for p in ps["all"] if p in d.grads]
                d.op("nccl:all_reduce", [("ncclDevKernel_AllReduce_Sum_f32_RING_LL", grads, grads)], tape=False)
                yield
        for d, ps in zip(devs, params):
            yield from d.optimizer_step(ps["all"])

    def stem(self, d: _Device, ps: dict) -> Iterator[Tensor]:
        spec = self.spec
        if spec.model is Model.CnnToy:
            img = d.tensor(spec.batch * 3 * spec.image * spec.image * ELEM_BYTES, "input")
            d.copy(0, img.placement.address, img.size, CopyDirection.HostToDevice)
            return img
        ids = d.tensor(spec.batch * spec.seq_len * 8, "input_ids")
        d.copy(0, ids.placement.address, ids.size, CopyDirection.HostToDevice)
        x = d.tensor(spec.batch * spec.seq_len * spec.hidden * ELEM_BYTES, "embeddings")
        d.op("aten::embedding", [("at::native::indexSelectLargeIndex", [ids, ps["emb"], ps["pos"]], [x])])
        yield
        d.release(ids)
        return x

    def layer(self, d: _Device, x: Tensor, li: int, ps: dict) -> Iterator[Tensor]:
        spec = self.spec
        P = ps["layers"][li]
        if spec.model is Model.CnnToy:
            c_in, c_out, size, pool = _conv_plan(spec)[li]
            b = spec.batch
            col = d.tensor(b * c_in * 9 * size * size * ELEM_BYTES, "im2col")
            y = d.tensor(b * c_out * size * size * ELEM_BYTES, f"conv{li}")
            d.op("aten::conv2d", [
                ("at::native::im2col_kernel", [x], [col]),
                ("ampere_sgemm_128x64_nn", [col, P["w"]], [y]),
                ("vectorized_elementwise_kernel<add>", [P["b"]], [y]),
            ], tape=False)
            if d.train:
                # backward treats the conv as reading x and the weights, writing y
                d.tape.append(_TapeEntry("aten::conv2d", [x, P["w"], P["b"]], [y]))
                d.produced_by.setdefault(y, len(d.tape) - 1)
            d.free(col)  # workspace, freed immediately in both modes
            d.release(x)
            yield
            r = d.tensor(y.size / d.scale, f"relu{li}")
            d.op("aten::relu", [("vectorized_elementwise_kernel<threshold>", [y], [r])])
            d.release(y)
            yield
            if pool:
                z = d.tensor(r.size / d.scale / 4, f"pool{li}")
                d.op("aten::max_pool2d", [("max_pool_forward_nchw", [r], [z])])
                d.release(r)
                yield
                return z
            return r
        out = yield from _transformer_layer(d, x, P, spec.model is Model.TransformerDecoderToy, self.tp)
        d.release(x)
        return out

    def head(self, d: _Device, x: Tensor, ps: dict) -> Iterator[Tensor]:
        spec = self.spec
        b = spec.batch
        if spec.model is Model.CnnToy:
            h1 = d.tensor(b * spec.fc_hidden * ELEM_BYTES, "fc1_out")
            d.op("aten::linear", [("ampere_sgemm_128x64_tn", [x, ps["fc1"]], [h1])])
            d.release(x)
            yield
            logits = d.tensor(b * 10 * ELEM_BYTES, "logits")
            d.op("aten::linear", [("ampere_sgemm_64x64_tn", [h1, ps["fc2"]], [logits])])
            d.release(h1)
            yield
            return logits
        s, h = spec.seq_len, spec.hidden
        y = d.tensor(b * s * h * ELEM_BYTES, "ln_f_out")
        d.op("aten::layer_norm", [("vectorized_layer_norm_kernel", [x, ps["lnf"]], [y])])
        d.release(x)
        yield
        if spec.model is Model.TransformerDecoderToy:
            logits = d.tensor(b * s * spec.vocab * ELEM_BYTES, "logits")
        else:
            logits = d.tensor(b * h * ELEM_BYTES, "pooled")
        d.op("aten::linear", [("ampere_sgemm_128x64_tn", [y, ps["head"]], [logits])])
        d.release(y)
        yield
        return logits

    def pipe_send(self, src: _Device, dst: _Device, x: Tensor) -> Iterator[Tensor]:
        x2 = dst.tensor(x.size / dst.scale, "recv_activation")
        src.op("nccl:send", [("ncclDevKernel_SendRecv", [x], [])], tape=False)
        src.copy(x.placement.address, x2.placement.address, x.size, CopyDirection.DeviceToDevice)
        dst.op("nccl:recv", [("ncclDevKernel_SendRecv", [], [x2])], tape=False)
        src.release(x)
        yield
        return x2

    def pipe_grad(self, src: _Device, dst: _Device, target: Tensor) -> Iterator[dict]:
        # the received activation on ``src`` is the tape root; its grad goes back to ``dst``
        g = dst.tensor(target.size / dst.scale, f"grad({target.name})")
        src.op("nccl:send", [("ncclDevKernel_SendRecv", [], [])], tape=False)
        src.copy(0, g.placement.address, g.size, CopyDirection.DeviceToDevice)
        dst.op("nccl:recv", [("ncclDevKernel_SendRecv", [], [g])], tape=False)
        yield
        return {target: g}


# -- driver --------------------------------------------------------------------------

def _device_stream(spec: WorkloadSpec, devices: list[int], scale: float) -> Iterator[tuple]:
    clock = _Clock()
    sink: list = []
    rng = random.Random(spec.seed)
    devs = [_Device(spec, d, clock, sink, rng, scale) for d in devices]
    for _ in _Program(spec, devs).run():
        yield from _drain(sink)
    yield from _drain(sink)


def _drain(sink: list) -> Iterator[tuple]:
    # accesses are appended before their completion record but share its window,
    # so order by timestamp within the flushed slice
    sink.sort(key=lambda r: r[0])
    yield from sink
    sink.clear()


def iter_trace(spec: WorkloadSpec) -> Iterator[Event]:
    """Lazily generate the event stream for ``spec``."""
    spec.validate()
    if spec.parallelism in (Parallelism.DP, Parallelism.TP):
        scale = 1.0 / spec.devices if spec.parallelism is Parallelism.TP else 1.0
        streams = [_device_stream(spec, [d], scale) for d in range(spec.devices)]
        merged = heapq.merge(*streams, key=lambda r: (r[0], r[1]))
    else:
        merged = _device_stream(spec, list(range(spec.devices)), 1.0)
    for seq, (ts, dev, kind, payload, stack) in enumerate(merged):
        yield Event(seq, dev, ts, kind, payload, stack)


def generate_trace(spec: WorkloadSpec) -> list[Event]:
    return list(iter_trace(spec))
