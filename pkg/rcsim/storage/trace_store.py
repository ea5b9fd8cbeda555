import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from pydantic import ValidationError

from rcsim.errors import ConfigError
from rcsim.models.trace import RunResult, TraceEvent

logger = logging.getLogger(__name__)

DIGEST_KEY = "trace_digest"


def event_line(event: TraceEvent) -> str:
    """One trace record in canonical form"""
    return json.dumps(event.model_dump(), sort_keys=True, separators=(",", ":"))


def trace_digest(events: Iterable[TraceEvent]) -> str:
    h = hashlib.sha256()
    for event in events:
        h.update(event_line(event).encode())
        h.update(b"\n")
    return h.hexdigest()


def write_trace(path: Union[str, Path], events: List[TraceEvent]) -> str:
    """Write events as JSON lines followed by a digest line; returns the digest"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = trace_digest(events)
    with path.open("w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event_line(event) + "\n")
        fh.write(json.dumps({DIGEST_KEY: digest}) + "\n")
    logger.info("Wrote %d trace events to %s", len(events), path)
    return digest


def read_trace(path: Union[str, Path]) -> Tuple[List[TraceEvent], Optional[str]]:
    """
    Load a trace file.

    Returns:
        The events and the recorded digest (None if the digest line is missing)

    Raises:
        ConfigError: if the file is missing or a line is not a trace record
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Trace file {path} not found", field="trace")
    events: List[TraceEvent] = []
    recorded = None
    with path.open(encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if DIGEST_KEY in record:
                    recorded = record[DIGEST_KEY]
                    continue
                events.append(TraceEvent.model_validate(record))
            except (json.JSONDecodeError, ValidationError) as e:
                raise ConfigError(f"Malformed trace record: {e}", field="trace", line=number)
    return events, recorded


class TraceStore:
    """In-memory storage for finished runs and their traces"""

    def __init__(self):
        self._runs: Dict[str, RunResult] = {}
        self._events: Dict[str, List[TraceEvent]] = {}

    def save_run(self, result: RunResult, events: List[TraceEvent]) -> RunResult:
        """Store a finished run"""
        self._runs[result.run_id] = result
        self._events[result.run_id] = events
        return result

    def get_run(self, run_id: str) -> Optional[RunResult]:
        """Retrieve a run by ID"""
        return self._runs.get(run_id)

    def get_events(self, run_id: str) -> Optional[List[TraceEvent]]:
        return self._events.get(run_id)

    def update_run(self, result: RunResult) -> RunResult:
        self._runs[result.run_id] = result
        return result

    def list_runs(self) -> List[RunResult]:
        """List all runs"""
        return list(self._runs.values())

    def delete_run(self, run_id: str) -> bool:
        """Delete a run"""
        if run_id in self._runs:
            del self._runs[run_id]
            self._events.pop(run_id, None)
            return True
        return False


# Global instance
trace_store = TraceStore()
