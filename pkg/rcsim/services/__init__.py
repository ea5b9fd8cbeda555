from .certs import CryptoService, crypto
from .engine import Engine, TraceRecorder
from .harness import Simulation, load_scenario, run, run_matrix
from .oracle import oracle_check

__all__ = [
    "CryptoService",
    "crypto",
    "Engine",
    "TraceRecorder",
    "Simulation",
    "load_scenario",
    "run",
    "run_matrix",
    "oracle_check",
]
