"""
Wire vocabulary exchanged between simulated actors.

Items delivered through an SL's atomic broadcast are separate from the
point-to-point messages; an item is wrapped in SLSubmit on the way in and
SLDeliver on the way out.
"""
from typing import Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict

from rcsim.models.certs import QuorumCertificate, Signature
from rcsim.models.convergence import BGReport, CMCommand, CMDecision, CMDeny
from rcsim.models.protocol import (
    BGDecision,
    BGPayload,
    ClientTx,
    CommitProof,
    CommittedCycle,
    ExclusionRecord,
    MembershipView,
    RoleMap,
    TransactionBlock,
)


class Message(BaseModel):
    model_config = ConfigDict(frozen=True)


class Item(BaseModel):
    model_config = ConfigDict(frozen=True)


# ---------------------------------------------------------------------------
# SL atomic broadcast items
# ---------------------------------------------------------------------------

class TBItem(Item):
    tb: TransactionBlock


class SealItem(Item):
    cycle: int


class RolesItem(Item):
    cycle: int
    roles: RoleMap


class PayloadItem(Item):
    """A verified remote BG payload, shared so other representatives abort"""
    decision: BGDecision
    via: str


class RepStalledItem(Item):
    rep: str
    target_bg: str
    cycle: int


SLItem = Union[TBItem, SealItem, RolesItem, PayloadItem, RepStalledItem]


class SLSubmit(Message):
    item: SLItem


class SLDeliver(Message):
    seq: int
    item: SLItem


class SLRejoinRequest(Message):
    node: str
    from_seq: int


class SLRejoinGrant(Message):
    items: Tuple[Tuple[int, SLItem], ...]
    roles: Optional[RoleMap] = None


# ---------------------------------------------------------------------------
# BG tier
# ---------------------------------------------------------------------------

class BGPropose(Message):
    cycle: int
    sl_id: str
    blocks: Tuple[TransactionBlock, ...]
    sender: str


class SignRequest(Message):
    kind: str
    cycle: int
    root: bytes
    payload: Optional[BGPayload] = None
    report: Optional[BGReport] = None


class SignShare(Message):
    kind: str
    cycle: int
    root: bytes
    sl_id: str
    signature: Signature


class BGDecided(Message):
    decision: BGDecision


class StatusVote(Message):
    """An SL's signed claim that a BG is unreachable in a cycle"""
    cycle: int
    suspect: str
    sl_id: str
    signature: Signature


class HeldNotice(Message):
    target_bg: str
    cycle: int
    sl_id: str


class NodeRemovalProposal(Message):
    sl_id: str
    node: str
    proposer: str


class ProbeRequest(Message):
    node: str
    proposal: int


class Ping(Message):
    nonce: int


class Pong(Message):
    nonce: int


class ProbeResult(Message):
    proposal: int
    node: str
    alive: bool
    sl_id: str
    signature: Signature


class LossOfQuorum(Message):
    reason: str
    cycle: Optional[int] = None


class ExclusionNotice(Message):
    record: ExclusionRecord


class ViewNotice(Message):
    view: MembershipView


class ViewRequest(Message):
    epoch: int
    requester: str


class ReportSubmit(Message):
    cycle: int
    sl_id: str
    decisions: Tuple[BGDecision, ...]
    stalled_on: Tuple[str, ...] = ()


class ReportDecided(Message):
    report: BGReport
    decisions: Tuple[BGDecision, ...]


class CMOutcome(Message):
    cycle: int
    reply: Optional[CMDecision] = None
    deny: Optional[CMDeny] = None


# ---------------------------------------------------------------------------
# Global tier
# ---------------------------------------------------------------------------

class ExclusionReport(Message):
    reporter: str
    suspect: str
    cycle: int
    cert: QuorumCertificate


class ExclusionAck(Message):
    suspect: str
    cycle: int


class HeldQuery(Message):
    suspect: str
    instance: int


class HeldAnswer(Message):
    bg_id: str
    suspect: str
    held: int
    instance: int


class JoinRequest(Message):
    bg_id: str
    emulators: Tuple[str, ...]


class RemovalCertified(Message):
    bg_id: str
    node: str
    cert: QuorumCertificate


class GlobalViewRequest(Message):
    epoch: int
    bg_id: str
    requester: str


class GlobalViewReply(Message):
    requester: str
    view: Optional[MembershipView]
    records: Tuple[ExclusionRecord, ...] = ()


class TransferRequest(Message):
    requester: str
    from_cycle: int


class TransferBundle(Message):
    sender: str
    views: Tuple[MembershipView, ...]
    records: Tuple[ExclusionRecord, ...]
    cycles: Tuple[CommittedCycle, ...]


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class ClientSubmit(Message):
    tx: ClientTx


class ProofDelivery(Message):
    proof: CommitProof
    node: str


# ---------------------------------------------------------------------------
# Convergence Module
# ---------------------------------------------------------------------------

class ReportToCM(Message):
    report: BGReport


class Suspicion(Message):
    suspect: str
    cycle: int
    signature: Signature


class CMSubmit(Message):
    command: CMCommand
    # epoch view the proposer derived the member set from
    view: Optional[MembershipView] = None


class CMCertified(Message):
    kind: Literal["REPLY", "DENY"]
    cycle: int
    index: int
    reply: Optional[CMDecision] = None
    deny: Optional[CMDeny] = None


class CMRejectedNotice(Message):
    kind: Literal["REPLY", "DENY"]
    cycle: int
    reason: str


class CMQuery(Message):
    cycle: int
    requester: str

