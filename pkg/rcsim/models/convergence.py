from typing import Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from rcsim.models.certs import FailureCertificate, QuorumCertificate, ValidityCertificate


class BGReport(BaseModel):
    """Represents a BG's account of the inputs it received for one cycle"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    reporter: str
    own_hash: bytes
    # issuer bg_id -> payload root as received
    received: Dict[str, bytes]
    complete: bool
    cert: Optional[QuorumCertificate] = None


class CMDecision(BaseModel):
    """A CM_REPLY: the committed inputs and the faulty set for one cycle"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    committed: Dict[str, bytes]
    # excluded bg_id -> failure certificate, None for live but unselected BGs
    fn: Dict[str, Optional[FailureCertificate]] = Field(default_factory=dict)
    horizon: int = 0
    holders: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)
    validity: Optional[ValidityCertificate] = None


class CMDeny(BaseModel):
    """A CM_DENY: the CM will never assist this cycle"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    validity: Optional[ValidityCertificate] = None


class BGMeta(BaseModel):
    """How a BG settled one earlier cycle, carried in a later input"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    bg_id: str
    flavor: Literal["NO_ASST", "ASSISTED", "DENIED"]
    report_cert: Optional[QuorumCertificate] = None
    reply: Optional[CMDecision] = None
    deny: Optional[CMDeny] = None


class CMCommand(BaseModel):
    """A command proposed to the CM's replicated state machine"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["REPLY", "DENY"]
    cycle: int
    proposer: str
    reply: Optional[CMDecision] = None
    # evidence the replicas re-run the analysis over
    reports: Tuple[BGReport, ...] = ()
    failure_certs: Tuple[FailureCertificate, ...] = ()
    live_listed: Tuple[str, ...] = ()


class Classification(BaseModel):
    """Outcome of classifying a cycle at the end of cycle + k"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    result: Literal["CM_ASSISTED", "UNASSISTED", "NeedsCMQuery"]
    reply: Optional[CMDecision] = None
