"""kvsim: trace-driven KV-cache eviction simulation and analysis."""

from .engine import EvictionConfig, EvictionEngine, EvictionLog, RunMetrics, retention_ratio, run
from .trace import DecodeTrace, TraceFormatError, TraceHeader, read_trace, slice_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "DecodeTrace",
    "EvictionConfig",
    "EvictionEngine",
    "EvictionLog",
    "RunMetrics",
    "TraceFormatError",
    "TraceHeader",
    "read_trace",
    "retention_ratio",
    "run",
    "slice_trace",
    "write_trace",
    "__version__",
]
