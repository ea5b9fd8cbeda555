from enum import Enum
from typing import Dict, Literal, Tuple

from pydantic import BaseModel, ConfigDict

# 32-byte hash value
Digest = bytes


class KeyPair(BaseModel):
    """A principal's identifier and signing seed"""
    model_config = ConfigDict(frozen=True)

    public_id: str
    secret: bytes
    public_key: bytes


class Signature(BaseModel):
    """Represents a signature by one principal over one message"""
    model_config = ConfigDict(frozen=True)

    signer: str
    value: bytes


class MerkleProof(BaseModel):
    """Sibling path from a leaf to a Merkle root"""
    model_config = ConfigDict(frozen=True)

    index: int
    # (sibling digest, side of the sibling)
    path: Tuple[Tuple[bytes, Literal["left", "right"]], ...] = ()


class MerkleTree(BaseModel):
    """A Merkle tree with every level kept for proof generation"""
    model_config = ConfigDict(frozen=True)

    leaves: Tuple[bytes, ...]
    levels: Tuple[Tuple[bytes, ...], ...]
    root: bytes


class QuorumCertificate(BaseModel):
    """Signatures of a quorum of SLs over (bg_id, cycle, payload_root)"""
    model_config = ConfigDict(frozen=True)

    bg_id: str
    cycle: int
    payload_root: bytes
    signatures: Tuple[Signature, ...]
    quorum_size: int
    kind: str = "order"


class FailureCertificate(BaseModel):
    """f+1 CM-node suspicions that a BG was unreachable in a cycle"""
    model_config = ConfigDict(frozen=True)

    suspect_bg_id: str
    cycle: int
    signatures: Tuple[Signature, ...]


class GlobalQuorumCertificate(BaseModel):
    """BG-leader signatures certifying one epoch's membership"""
    model_config = ConfigDict(frozen=True)

    epoch: int
    participating_bgs: Tuple[str, ...]
    committed_cycle_range: Tuple[int, int]
    quorum_sizes: Dict[str, int]
    signatures: Tuple[Signature, ...]


class ValidityCertificate(BaseModel):
    """A quorum certificate plus f+1 signatures attesting the decision is the first valid one"""
    model_config = ConfigDict(frozen=True)

    inner: QuorumCertificate
    validity_signatures: Tuple[Signature, ...]
    decision_index: int


class Rejected(BaseModel):
    """Outcome of a decision that was not certified"""
    model_config = ConfigDict(frozen=True)

    reason: Literal["DuplicateDecision", "InvalidDecision"]
    detail: str = ""


class VerifyResult(str, Enum):
    OK = "ok"
    TOO_FEW_SIGNATURES = "too_few_signatures"
    DUPLICATE_SIGNER = "duplicate_signer"
    BAD_SIGNATURE = "bad_signature"
    UNKNOWN_SIGNER = "unknown_signer"
    CONTEXT_MISMATCH = "context_mismatch"


class Decision(BaseModel):
    """A decision submitted for certification in a replicated log"""
    model_config = ConfigDict(frozen=True)

    scope: str
    cycle: int
    kind: str
    body_digest: bytes


class LogEntry(BaseModel):
    """One ordered entry of a decision log"""
    model_config = ConfigDict(frozen=True)

    index: int
    decision: Decision
    valid: bool
