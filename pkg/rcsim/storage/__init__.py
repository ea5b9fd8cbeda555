from .trace_store import TraceStore, read_trace, trace_digest, trace_store, write_trace

__all__ = ["trace_store", "TraceStore", "read_trace", "write_trace", "trace_digest"]
