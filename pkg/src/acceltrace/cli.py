"""Command-line driver: ``acceltrace gen|run|sim-uvm|validate``.

Exit codes: 0 success, 1 usage error, 2 data error (bad trace or spec
input), 3 tool error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Mapping, Optional, Sequence

from . import errors as E
from .engine import EngineConfig, EngineMode, run
from .tools import REGISTRY, Knobs, RangeFilter, select_tool
from .tools.builtin import MemcharTool
from .traceio import Dialect, load_events, save_events
from .uvm import Granularity, Policy, UvmConfig, build_prefetch_plan, normalized, replay_kernels, set_capacity, simulate
from .workload import PRESETS, WorkloadSpec, iter_trace, load_spec_file, preset, spec_from_mapping

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOOL = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; we reserve 2 for data errors
    def error(self, message: str):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acceltrace", description="Accelerator trace generation, analysis and UVM simulation.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic workload trace")
    g.add_argument("--preset", choices=sorted(PRESETS), help="start from a named workload")
    g.add_argument("--config", help="key=value workload file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one workload field (repeatable)")
    g.add_argument("--out", required=True, help="output path (.pasta binary or .jsonl)")
    g.add_argument("--dialect", choices=[d.name.lower() for d in Dialect], default="unified")

    r = sub.add_parser("run", help="run an analysis tool over a trace")
    r.add_argument("--trace", required=True)
    r.add_argument("--tool", help="tool name (overrides PASTA_TOOL)")
    r.add_argument("--engine", choices=["serial", "parallel"], default="serial")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--buffer-capacity", type=int, default=65_536)
    r.add_argument("--batch-size", type=int, default=4_096)
    r.add_argument("--slowdown-ns", type=int, default=0, help="artificial per-event analysis cost")
    r.add_argument("--start-grid", type=int, help="overrides START_GRID_ID")
    r.add_argument("--end-grid", type=int, help="overrides END_GRID_ID")
    r.add_argument("--range-label", action="append", default=[], help="keep kernels inside these ranges")
    r.add_argument("--knob", action="append", default=[], help="attribution knob (repeatable)")
    r.add_argument("--top-k", type=int, default=20)
    r.add_argument("--window-ns", type=int, default=1_000_000)
    r.add_argument("--devices", help="device pair A,B for mem-timeline differences")
    _output_args(r, ("json", "csv", "jsonl"))
    r.add_argument("--no-timings", action="store_true", help="zero wall-clock fields for golden files")

    s = sub.add_parser("sim-uvm", help="simulate UVM demand paging with prefetch policies")
    s.add_argument("--trace", required=True)
    s.add_argument("--policy", choices=["none", "object", "tensor", "all"], default="all")
    s.add_argument("--oversub", type=float, default=1.0)
    s.add_argument("--page-size", type=int, default=2 * 1024 * 1024)
    s.add_argument("--fault-latency-ns", type=int, default=20_000)
    s.add_argument("--migration-bw", type=float, default=8.0, help="demand migration bytes/ns")
    s.add_argument("--prefetch-bw", type=float, default=16.0, help="prefetch bytes/ns")
    s.add_argument("--no-overlap", action="store_true")
    _output_args(s, ("json", "csv"))

    v = sub.add_parser("validate", help="check a trace for format and stream invariants")
    v.add_argument("--trace", required=True)
    return p


def _output_args(p: argparse.ArgumentParser, formats) -> None:
    p.add_argument("--format", choices=formats, default="json")
    p.add_argument("--out", help="output file (default stdout)")


# -- report emission ------------------------------------------------------------------

def emit_report(report, fmt: str = "json", path: Optional[str] = None,
                engine_stats=None, timings: bool = True, stream=None) -> None:
    """Serialize a report; key order is fixed so reruns are byte-identical."""
    if fmt == "csv":
        text = report.to_csv() if hasattr(report, "to_csv") else _dict_csv(report)
    else:
        body = report.to_dict() if hasattr(report, "to_dict") else dict(report)
        if engine_stats is not None:
            body["engine_stats"] = engine_stats.to_dict(timings)
        if fmt == "jsonl":
            text = json.dumps(body, separators=(",", ":")) + "\n"
        else:
            text = json.dumps(body, indent=2) + "\n"
    if path and path != "-":
        Path(path).write_text(text, encoding="utf-8")
    else:
        (stream or sys.stdout).write(text)


def _dict_csv(d: Mapping) -> str:
    return "key,value\n" + "".join(f"{k},{v}\n" for k, v in d.items())


# -- subcommands -----------------------------------------------------------------------

def _cmd_gen(a, env) -> int:
    spec = WorkloadSpec()
    if a.preset:
        spec = preset(a.preset)
    if a.config:
        spec = load_spec_file(a.config, spec)
    if a.set:
        kv = {}
        for item in a.set:
            if "=" not in item:
                raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            kv[k] = v
        spec = spec_from_mapping(kv, spec)
    spec.validate()
    save_events(iter_trace(spec), a.out, Dialect[a.dialect.upper()] if a.dialect != "unified" else Dialect.Unified)
    print(f"wrote {a.out}", file=sys.stderr)
    return EXIT_OK


def _tool_options(name: str, a) -> dict:
    if name == "kernel-freq":
        return {"top_k": a.top_k}
    if name == "hotness":
        return {"window_len_ns": a.window_ns}
    if name == "mem-timeline" and a.devices:
        try:
            x, y = (int(t) for t in a.devices.split(","))
        except ValueError:
            raise _UsageError("--devices expects two integers A,B") from None
        return {"device_pair": (x, y)}
    if name == "attribution" and a.knob:
        return {"knobs": Knobs.parse(a.knob)}
    return {}


def _cmd_run(a, env) -> int:
    desc = select_tool(a.tool, env, REGISTRY)
    tool = desc.create(**_tool_options(desc.name, a))
    mode = EngineMode(a.engine)
    workers = a.workers if a.workers is not None else (4 if mode is EngineMode.Parallel else 1)
    try:
        cfg = EngineConfig(mode, workers, a.buffer_capacity, a.batch_size, a.slowdown_ns)
        rf = RangeFilter.from_env(env, a.start_grid, a.end_grid, a.range_label or None)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    report, stats = run(load_events(a.trace), tool, cfg, rf)
    emit_report(report, a.format, a.out, stats, timings=not a.no_timings)
    return EXIT_OK


def _cmd_sim(a, env) -> int:
    events = list(load_events(a.trace))
    memchar = run(events, MemcharTool())[0]
    try:
        capacity = set_capacity(memchar.footprint_bytes, a.oversub, a.page_size)
        cfg = UvmConfig(capacity, a.page_size, a.fault_latency_ns, a.migration_bw, a.prefetch_bw, not a.no_overlap)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    kernels = replay_kernels(events, a.page_size)
    policies = [p.value for p in Policy] if a.policy == "all" else [a.policy]
    results = {}
    for pol in policies:
        plan = None if pol == "none" else build_prefetch_plan(events, Granularity(pol))
        results[pol] = simulate(kernels, plan, cfg)
    norm = normalized(results) if "none" in results else {}
    if a.format == "csv":
        rows = ["policy,total_time_ns,normalized,faults,demand_migrated_bytes,prefetched_bytes,evictions"]
        for pol, r in results.items():
            n = norm.get(pol, "")
            rows.append(f"{pol},{r.total_time_ns:.1f},{n if n == '' else f'{n:.6f}'},{r.faults},"
                        f"{r.demand_migrated_bytes},{r.prefetched_bytes},{r.evictions}")
        text = "\n".join(rows) + "\n"
    else:
        text = json.dumps({
            "oversub": a.oversub,
            "footprint_bytes": memchar.footprint_bytes,
            "capacity_bytes": capacity,
            "results": {k: r.to_dict() for k, r in results.items()},
            "normalized": norm,
        }, indent=2) + "\n"
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_validate(a, env) -> int:
    n = 0
    for _ in load_events(a.trace, validate=True):
        n += 1
    print(f"ok: {n} events")
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "run": _cmd_run, "sim-uvm": _cmd_sim, "validate": _cmd_validate}

_USAGE_ERRORS = (E.UnknownTool, E.NoToolSpecified, E.UnknownKnob, E.NoKnobEnabled, E.EngineError,
                 E.CapacityTooSmall, E.DuplicateName)
_DATA_ERRORS = (E.TraceError, E.SpecError, E.UnknownDevice, E.EmptyProfile, E.PlanMismatch, OSError)


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    env = os.environ if env is None else env
    try:
        a = _parser().parse_args(argv)
        return _COMMANDS[a.cmd](a, env)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except _USAGE_ERRORS as exc:
        print(f"acceltrace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except E.ToolError as exc:
        print(f"acceltrace: tool error: {exc}", file=sys.stderr)
        return EXIT_TOOL
    except _DATA_ERRORS as exc:
        print(f"acceltrace: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
