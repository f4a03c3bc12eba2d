from .api import (REGISTRY, Knobs, RangeFilter, Registry, Tool, ToolDescriptor, apply_range_filter,
                  register_knob, register_tool, select_tool)
from . import builtin
from .builtin import (AttributionReport, AttributionTool, HotnessMatrix, HotnessTool, KernelFreqReport,
                      KernelFreqTool, KernelProfile, MemcharTool, MemoryCharacteristics, MemoryTimeline,
                      MemTimelineTool, UvmProfile, UvmProfileTool, attribution, hotness, kernel_freq,
                      memory_timeline, uvm_profile, working_set)
