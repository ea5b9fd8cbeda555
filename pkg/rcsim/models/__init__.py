from .scenario import Fault, Policy, Scenario, Timing, Topology
from .trace import MatrixRow, RunRequest, RunResult, TraceEvent, Verdict

__all__ = [
    "Fault",
    "Policy",
    "Scenario",
    "Timing",
    "Topology",
    "MatrixRow",
    "RunRequest",
    "RunResult",
    "TraceEvent",
    "Verdict",
]
