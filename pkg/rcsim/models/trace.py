from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class TraceEvent(BaseModel):
    """Represents one audited protocol event"""
    model_config = ConfigDict(frozen=True)

    tick: int
    kind: str
    actor: str
    peer: Optional[str] = None
    digest: Optional[str] = None
    data: Dict[str, Any] = Field(default_factory=dict)


class Verdict(BaseModel):
    """Represents the result of one invariant check"""
    invariant: str
    passed: bool
    witness: Optional[str] = None
    tick: Optional[int] = None
    excused: bool = False


class RunResult(BaseModel):
    """Represents a finished run"""
    run_id: str
    scenario: str
    seed: int
    policy: str
    verdicts: List[Verdict]
    trace_digest: str
    events: int
    assumption_breach: bool = False
    trace_path: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(v.passed or v.excused for v in self.verdicts)


class MatrixRow(BaseModel):
    """One row of the fault matrix"""
    fault_class: str
    scenario: str
    mitigation: str
    seeds: List[int]
    passed: bool
    failures: List[str] = Field(default_factory=list)


class RunRequest(BaseModel):
    """Represents a request to run a scenario"""
    scenario: Optional[str] = None
    document: Optional[Dict[str, Any]] = None
    seed: Optional[int] = None
    policy: Optional[Literal["global", "cm"]] = None
    analysis: Optional[str] = None


class MatrixRequest(BaseModel):
    """Represents a request to run the fault matrix"""
    seeds: int = Field(default=1, ge=1)
    classes: Optional[List[str]] = None


class GraphResponse(BaseModel):
    """Represents the communication graph analyzed for one cycle"""
    run_id: str
    cycle: int
    adjacency: Dict[str, List[str]]
