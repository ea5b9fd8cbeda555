from typing import Dict, List, Literal, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field

from rcsim.models.certs import (
    GlobalQuorumCertificate,
    MerkleProof,
    QuorumCertificate,
    Signature,
)
from rcsim.models.convergence import BGMeta, CMDecision


class ClientTx(BaseModel):
    """Represents a signed client transaction"""
    model_config = ConfigDict(frozen=True)

    client_id: str
    tx_id: int
    nonce: int
    payload: bytes
    digest: bytes
    signature: Signature

    @property
    def key(self) -> Tuple[str, int]:
        return (self.client_id, self.nonce)


class TransactionBlock(BaseModel):
    """Represents the transactions one node batched for one cycle"""
    model_config = ConfigDict(frozen=True)

    origin: str
    sl_id: str
    cycle: int
    txs: Tuple[ClientTx, ...]
    root: bytes
    # Sequence number a node may claim for its block; ordering never reads it
    claimed_number: Optional[int] = None


class RoleMap(BaseModel):
    """Roles of an SL's members as agreed by its CFT layer"""
    model_config = ConfigDict(frozen=True)

    monitor: Optional[str]
    representatives: Tuple[str, ...]
    live: Tuple[str, ...]


class SLRoundState(BaseModel):
    """Round-one progress of one cycle at one SL member"""
    cycle: int
    phase: Literal["collecting", "broadcast", "sealed"] = "collecting"
    tbs: List[TransactionBlock] = Field(default_factory=list)
    roles: Optional[RoleMap] = None
    liveness: Dict[str, bool] = Field(default_factory=dict)


class BGPayload(BaseModel):
    """The ordered input a BG contributes to one cycle"""
    model_config = ConfigDict(frozen=True)

    bg_id: str
    cycle: int
    blocks: Tuple[TransactionBlock, ...]
    participating_sls: Tuple[str, ...]
    # BG_META for cycle - k, carried in CM-bypass mode
    meta: Optional[BGMeta] = None
    root: bytes


class BGDecision(BaseModel):
    """A BG payload with the quorum certificate over its root"""
    model_config = ConfigDict(frozen=True)

    payload: BGPayload
    qc: QuorumCertificate

    @property
    def bg_id(self) -> str:
        return self.payload.bg_id

    @property
    def cycle(self) -> int:
        return self.payload.cycle

    @property
    def root(self) -> bytes:
        return self.payload.root


class CommitProof(BaseModel):
    """Proof that a client transaction was committed in a cycle"""
    model_config = ConfigDict(frozen=True)

    tx_digest: bytes
    cycle: int
    bg_id: str
    tb_root: bytes
    merkle_branch: MerkleProof
    block_branch: MerkleProof
    bg_qc: QuorumCertificate


class CycleState(BaseModel):
    """Pipeline slot for one cycle at one node"""
    cycle: int
    own: Optional[BGDecision] = None
    fetched: Dict[str, BGDecision] = Field(default_factory=dict)
    missing: Set[str] = Field(default_factory=set)
    phase: Literal["exchanging", "complete", "stalled"] = "exchanging"
    commit_status: Literal["uncommitted", "committed"] = "uncommitted"
    included: Tuple[str, ...] = ()
    order_digest: Optional[bytes] = None
    # BGs whose emulators every representative of this SL gave up on
    stalled_on: Set[str] = Field(default_factory=set)
    report_sent: bool = False
    settled: bool = False
    outcome: Optional[str] = None


class StateRequest(BaseModel):
    """A representative's request for a BG's certified payload"""
    model_config = ConfigDict(frozen=True)

    requester: str
    requester_sl: str
    requester_bg: str
    target_bg: str
    cycle: int
    relay: bool = False


class StateResponse(BaseModel):
    """Null (no decision yet) or Full (decision with certificate)"""
    model_config = ConfigDict(frozen=True)

    responder: str
    target_bg: str
    cycle: int
    decision: Optional[BGDecision] = None
    pushed: bool = False

    @property
    def is_null(self) -> bool:
        return self.decision is None


class MembershipView(BaseModel):
    """Certified membership for one epoch"""
    model_config = ConfigDict(frozen=True)

    epoch: int
    bgs: Tuple[str, ...]
    emulators: Dict[str, Tuple[str, ...]]
    quorum_sizes: Dict[str, int]
    # first cycle each BG participates in during this epoch
    admitted: Dict[str, int] = Field(default_factory=dict)
    seq: int = 0
    gqc: GlobalQuorumCertificate


class ExclusionRecord(BaseModel):
    """Certified removal of an unreachable BG from the cycles it could not serve"""
    model_config = ConfigDict(frozen=True)

    bg_id: str
    effective_cycle: int
    # last epoch whose view was issued before this record
    epoch_limit: int
    reporter: str
    seq: int
    cert: QuorumCertificate

    def applies(self, cycle: int, epoch: int) -> bool:
        return cycle >= self.effective_cycle and epoch <= self.epoch_limit


class Epoch(BaseModel):
    """An interval between resynchronizations and its certificate"""
    model_config = ConfigDict(frozen=True)

    number: int
    first_cycle: int
    last_cycle: int
    gqc: GlobalQuorumCertificate


class CommittedCycle(BaseModel):
    """A committed cycle as carried in a state transfer"""
    model_config = ConfigDict(frozen=True)

    cycle: int
    decisions: Tuple[BGDecision, ...]
    reply: Optional[CMDecision] = None

