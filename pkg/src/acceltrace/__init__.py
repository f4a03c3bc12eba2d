"""Accelerator trace analysis toolkit."""

from .engine import EngineConfig, EngineMode, EngineStats, run, run_parallel, run_serial
from .events import Event, EventKind
from .tools import (RangeFilter, attribution, hotness, kernel_freq, memory_timeline, uvm_profile,
                    working_set)
from .traceio import Dialect, load_events, read_trace, save_events, write_trace
from .uvm import Granularity, Policy, UvmConfig, build_prefetch_plan, compare_policies, simulate
from .workload import WorkloadSpec, generate_trace, preset

__version__ = "0.1.0"
