"""
Hashing, signatures, Merkle trees and certificate checks.

Every certificate species travels between tiers, so all of them are
built and verified here:

- QuorumCertificate: 2f_i+1 SL signatures over (bg_id, cycle, root)
- FailureCertificate: f+1 CM-node suspicions for (bg_id, cycle)
- GlobalQuorumCertificate: BG-leader signatures over one epoch's view
- ValidityCertificate: a quorum certificate plus f+1 validity signatures

Merkle trees use domain-separated hashing: a leaf is H(0x00 || d), an
internal node H(0x01 || left || right), and an odd level duplicates its
last element.
"""
import hashlib
import hmac
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from rcsim.errors import ConfigError, EmptyInput
from rcsim.models.certs import (
    Decision,
    FailureCertificate,
    GlobalQuorumCertificate,
    KeyPair,
    LogEntry,
    MerkleProof,
    MerkleTree,
    QuorumCertificate,
    Rejected,
    Signature,
    ValidityCertificate,
    VerifyResult,
)
from rcsim.models.protocol import MembershipView

logger = logging.getLogger(__name__)

LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
EMPTY_ROOT = hashlib.sha256(b"").digest()

T = TypeVar("T")

# principal -> verification key
Directory = Dict[str, bytes]


# ---------------------------------------------------------------------------
# Canonical encoding and hashing
# ---------------------------------------------------------------------------

def _encode(value, out: bytearray) -> None:
    if isinstance(value, bool):
        tag, data = b"b", (b"\x01" if value else b"\x00")
    elif isinstance(value, int):
        tag, data = b"i", str(value).encode()
    elif isinstance(value, bytes):
        tag, data = b"y", value
    elif isinstance(value, str):
        tag, data = b"s", value.encode("utf-8")
    elif value is None:
        tag, data = b"n", b""
    elif isinstance(value, (list, tuple)):
        tag, data = b"l", canonical(*value)
    elif isinstance(value, dict):
        tag, data = b"d", canonical(*[(k, value[k]) for k in sorted(value)])
    else:
        raise TypeError(f"Cannot canonically encode {type(value).__name__}")
    out += tag + len(data).to_bytes(4, "big") + data


def canonical(*parts) -> bytes:
    """Length-prefixed, type-tagged encoding; stable across runs"""
    out = bytearray()
    for part in parts:
        _encode(part, out)
    return bytes(out)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest(*parts) -> bytes:
    """Digest over the canonical encoding of the given fields"""
    return sha256(canonical(*parts))


# ---------------------------------------------------------------------------
# Merkle trees
# ---------------------------------------------------------------------------

def leaf_hash(leaf: bytes) -> bytes:
    return sha256(LEAF_TAG + leaf)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(NODE_TAG + left + right)


def merkle_build(leaves: Sequence[bytes]) -> MerkleTree:
    """
    Build a Merkle tree over leaf digests.

    Args:
        leaves: Leaf digests in order

    Returns:
        Tree holding every level, bottom first

    Raises:
        EmptyInput: if leaves is empty
    """
    if not leaves:
        raise EmptyInput("Merkle tree needs at least one leaf")
    level = [leaf_hash(leaf) for leaf in leaves]
    levels = [tuple(level)]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level = level + [level[-1]]
        level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(tuple(level))
    return MerkleTree(leaves=tuple(leaves), levels=tuple(levels), root=level[0])


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Root of the tree over leaves, EMPTY_ROOT for no leaves"""
    if not leaves:
        return EMPTY_ROOT
    return merkle_build(leaves).root


def merkle_prove(tree: MerkleTree, index: int) -> MerkleProof:
    """Sibling path for the leaf at index"""
    if index < 0 or index >= len(tree.leaves):
        raise IndexError(f"Leaf index {index} out of range")
    path = []
    position = index
    for level in tree.levels[:-1]:
        padded = list(level)
        if len(padded) % 2 == 1:
            padded.append(padded[-1])
        if position % 2 == 0:
            path.append((padded[position + 1], "right"))
        else:
            path.append((padded[position - 1], "left"))
        position //= 2
    return MerkleProof(index=index, path=tuple(path))


def merkle_verify(root: bytes, leaf: bytes, proof: MerkleProof) -> bool:
    """True iff folding leaf through proof reproduces root"""
    current = leaf_hash(leaf)
    for sibling, side in proof.path:
        if side == "right":
            current = node_hash(current, sibling)
        else:
            current = node_hash(sibling, current)
    return current == root


def order_blocks(blocks: Iterable[Tuple[bytes, T]]) -> List[Tuple[bytes, T]]:
    """
    Sort blocks ascending by root bytes; identical roots collapse to one entry.

    Args:
        blocks: (root, payload) pairs

    Returns:
        Ordered (root, payload) pairs
    """
    by_root: Dict[bytes, T] = {}
    for root, payload in blocks:
        if root not in by_root:
            by_root[root] = payload
    return [(root, by_root[root]) for root in sorted(by_root)]


# ---------------------------------------------------------------------------
# Signature providers
# ---------------------------------------------------------------------------

class KeyedHashSigner:
    """Deterministic keyed-hash signatures; the verification key is the secret"""

    name = "keyed-hash"

    def __init__(self, seed: bytes = b"rcsim-keys"):
        self._seed = seed
        self._secrets: Dict[str, bytes] = {}

    def secret(self, principal: str) -> bytes:
        secret = self._secrets.get(principal)
        if secret is None:
            secret = sha256(self._seed + b"|" + principal.encode())
            self._secrets[principal] = secret
        return secret

    def public_key(self, principal: str) -> bytes:
        return self.secret(principal)

    def sign(self, principal: str, message: bytes) -> bytes:
        return hmac.new(self.secret(principal), message, hashlib.sha256).digest()

    def verify(self, public_key: bytes, message: bytes, value: bytes) -> bool:
        expected = hmac.new(public_key, message, hashlib.sha256).digest()
        return hmac.compare_digest(expected, value)


class Ed25519Signer:
    """Ed25519 signatures with seed-derived private keys"""

    name = "ed25519"

    def __init__(self, seed: bytes = b"rcsim-keys"):
        self._seed = seed
        self._private: Dict[str, Ed25519PrivateKey] = {}
        self._public: Dict[bytes, Ed25519PublicKey] = {}

    def secret(self, principal: str) -> bytes:
        return sha256(self._seed + b"|" + principal.encode())

    def _key(self, principal: str) -> Ed25519PrivateKey:
        key = self._private.get(principal)
        if key is None:
            key = Ed25519PrivateKey.from_private_bytes(self.secret(principal))
            self._private[principal] = key
        return key

    def public_key(self, principal: str) -> bytes:
        return self._key(principal).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, principal: str, message: bytes) -> bytes:
        return self._key(principal).sign(message)

    def verify(self, public_key: bytes, message: bytes, value: bytes) -> bool:
        key = self._public.get(public_key)
        if key is None:
            key = Ed25519PublicKey.from_public_bytes(public_key)
            self._public[public_key] = key
        try:
            key.verify(value, message)
            return True
        except InvalidSignature:
            return False


SIGNERS = {
    KeyedHashSigner.name: KeyedHashSigner,
    Ed25519Signer.name: Ed25519Signer,
}


class CryptoService:
    """Signing and verification through a pluggable provider"""

    def __init__(self, provider: Optional[Union[KeyedHashSigner, Ed25519Signer]] = None):
        self.provider = provider or KeyedHashSigner()

    def use(self, name: str) -> None:
        """Switch the signature provider by name"""
        if name not in SIGNERS:
            raise ConfigError(f"Unknown signer '{name}'", field="signer")
        if self.provider.name != name:
            self.provider = SIGNERS[name]()
            logger.info("Signature provider set to %s", name)

    def keypair(self, principal: str) -> KeyPair:
        return KeyPair(
            public_id=principal,
            secret=self.provider.secret(principal),
            public_key=self.provider.public_key(principal),
        )

    def directory(self, principals: Iterable[str]) -> Directory:
        return {p: self.provider.public_key(p) for p in principals}

    def sign(self, principal: str, message: bytes) -> Signature:
        return Signature(signer=principal, value=self.provider.sign(principal, message))

    def verify(self, sig: Signature, message: bytes, public_key: bytes) -> bool:
        return self.provider.verify(public_key, message, sig.value)

    def check_signatures(
        self,
        signatures: Sequence[Signature],
        message: bytes,
        directory: Directory,
        expected: int,
    ) -> VerifyResult:
        """Shared rule: every signer known, distinct and valid, and at least expected of them"""
        seen = set()
        for sig in signatures:
            if sig.signer not in directory:
                return VerifyResult.UNKNOWN_SIGNER
            if sig.signer in seen:
                return VerifyResult.DUPLICATE_SIGNER
            seen.add(sig.signer)
            if not self.verify(sig, message, directory[sig.signer]):
                return VerifyResult.BAD_SIGNATURE
        if len(seen) < expected:
            return VerifyResult.TOO_FEW_SIGNATURES
        return VerifyResult.OK


crypto = CryptoService()


# ---------------------------------------------------------------------------
# Quorum certificates
# ---------------------------------------------------------------------------

def qc_message(bg_id: str, cycle: int, payload_root: bytes, kind: str = "order") -> bytes:
    return canonical("qc", kind, bg_id, cycle, payload_root)


def sign_qc_share(principal: str, bg_id: str, cycle: int, payload_root: bytes, kind: str = "order") -> Signature:
    return crypto.sign(principal, qc_message(bg_id, cycle, payload_root, kind))


def make_qc(
    bg_id: str,
    cycle: int,
    payload_root: bytes,
    signatures: Sequence[Signature],
    quorum_size: int,
    kind: str = "order",
) -> QuorumCertificate:
    ordered = tuple(sorted(signatures, key=lambda s: s.signer))
    return QuorumCertificate(
        bg_id=bg_id,
        cycle=cycle,
        payload_root=payload_root,
        signatures=ordered,
        quorum_size=quorum_size,
        kind=kind,
    )


def qc_check(
    cert: QuorumCertificate,
    expected_quorum: int,
    directory: Directory,
    bg_id: Optional[str] = None,
    cycle: Optional[int] = None,
    kind: Optional[str] = None,
) -> VerifyResult:
    """Verify a quorum certificate and report why it failed"""
    if bg_id is not None and cert.bg_id != bg_id:
        return VerifyResult.CONTEXT_MISMATCH
    if cycle is not None and cert.cycle != cycle:
        return VerifyResult.CONTEXT_MISMATCH
    if kind is not None and cert.kind != kind:
        return VerifyResult.CONTEXT_MISMATCH
    message = qc_message(cert.bg_id, cert.cycle, cert.payload_root, cert.kind)
    return crypto.check_signatures(cert.signatures, message, directory, expected_quorum)


def qc_verify(
    cert: QuorumCertificate,
    expected_quorum: int,
    directory: Directory,
    bg_id: Optional[str] = None,
    cycle: Optional[int] = None,
    kind: Optional[str] = None,
) -> bool:
    return qc_check(cert, expected_quorum, directory, bg_id, cycle, kind) is VerifyResult.OK


# ---------------------------------------------------------------------------
# Failure and global certificates
# ---------------------------------------------------------------------------

def suspicion_message(suspect_bg_id: str, cycle: int) -> bytes:
    return canonical("suspect", suspect_bg_id, cycle)


def failure_cert_verify(cert: FailureCertificate, f: int, directory: Directory) -> bool:
    message = suspicion_message(cert.suspect_bg_id, cert.cycle)
    return crypto.check_signatures(cert.signatures, message, directory, f + 1) is VerifyResult.OK


def gqc_message(
    epoch: int,
    participating_bgs: Sequence[str],
    committed_cycle_range: Tuple[int, int],
    quorum_sizes: Dict[str, int],
) -> bytes:
    return canonical(
        "gqc", epoch, sorted(participating_bgs), list(committed_cycle_range), dict(quorum_sizes)
    )


def make_gqc(
    epoch: int,
    participating_bgs: Sequence[str],
    committed_cycle_range: Tuple[int, int],
    quorum_sizes: Dict[str, int],
    signers: Sequence[str],
) -> GlobalQuorumCertificate:
    message = gqc_message(epoch, participating_bgs, committed_cycle_range, quorum_sizes)
    return GlobalQuorumCertificate(
        epoch=epoch,
        participating_bgs=tuple(sorted(participating_bgs)),
        committed_cycle_range=committed_cycle_range,
        quorum_sizes=dict(quorum_sizes),
        signatures=tuple(crypto.sign(s, message) for s in sorted(signers)),
    )


def gqc_verify(cert: GlobalQuorumCertificate, quorum: int, directory: Directory) -> bool:
    message = gqc_message(
        cert.epoch, cert.participating_bgs, cert.committed_cycle_range, cert.quorum_sizes
    )
    return crypto.check_signatures(cert.signatures, message, directory, quorum) is VerifyResult.OK


def view_cert_valid(view: MembershipView, quorum: int, directory: Directory) -> bool:
    """A view is valid when a quorum of its BGs signed exactly its contents"""
    cert = view.gqc
    if cert.epoch != view.epoch or cert.participating_bgs != tuple(sorted(view.bgs)):
        return False
    if cert.quorum_sizes != view.quorum_sizes:
        return False
    return gqc_verify(cert, quorum, directory)


# ---------------------------------------------------------------------------
# Decision certification
# ---------------------------------------------------------------------------

class DecisionLog:
    """Ordered log of decisions with their validity verdicts"""

    def __init__(self):
        self.entries: List[LogEntry] = []

    def next_index(self) -> int:
        return len(self.entries)

    def first_valid(self, scope: str, cycle: int) -> Optional[LogEntry]:
        for entry in self.entries:
            if entry.valid and entry.decision.scope == scope and entry.decision.cycle == cycle:
                return entry
        return None

    def valid_entries(self) -> List[LogEntry]:
        return [e for e in self.entries if e.valid]

    def record(self, decision: Decision, valid: bool) -> LogEntry:
        entry = LogEntry(index=len(self.entries), decision=decision, valid=valid)
        self.entries.append(entry)
        return entry


def decision_digest(decision: Decision) -> bytes:
    return digest("decision", decision.scope, decision.cycle, decision.kind, decision.body_digest)


def validity_message(decision: Decision, index: int) -> bytes:
    return canonical(
        "valid", decision.scope, decision.cycle, decision.kind, decision.body_digest, index
    )


def certify_decision(
    decision: Decision,
    qc: QuorumCertificate,
    prior_decisions: DecisionLog,
    validators: Sequence[str],
    validity_quorum: int,
    quorum_size: int,
    directory: Directory,
    rule: Optional[Callable[[Decision, DecisionLog], bool]] = None,
) -> Union[ValidityCertificate, Rejected]:
    """
    Certify the first valid decision for its (scope, cycle).

    Args:
        decision: The decision to certify
        qc: Quorum certificate over decision_digest(decision)
        prior_decisions: Log of earlier decisions, not modified here
        validators: Principals attesting validity
        validity_quorum: Minimum validity signatures (f+1)
        quorum_size: Quorum the inner certificate must meet
        directory: Verification keys of all signers
        rule: Extra protocol-validity predicate over the prior log

    Returns:
        ValidityCertificate, or Rejected with the reason
    """
    if qc.payload_root != decision_digest(decision) or not qc_verify(
        qc, quorum_size, directory, bg_id=decision.scope, cycle=decision.cycle, kind="decision"
    ):
        return Rejected(reason="InvalidDecision", detail="quorum certificate does not verify")
    if prior_decisions.first_valid(decision.scope, decision.cycle) is not None:
        return Rejected(reason="DuplicateDecision", detail=f"cycle {decision.cycle} already decided")
    if rule is not None and not rule(decision, prior_decisions):
        return Rejected(reason="InvalidDecision", detail="decision violates protocol rule")
    distinct = sorted(set(validators))
    if len(distinct) < validity_quorum:
        return Rejected(reason="InvalidDecision", detail="not enough validators")
    index = prior_decisions.next_index()
    message = validity_message(decision, index)
    return ValidityCertificate(
        inner=qc,
        validity_signatures=tuple(crypto.sign(v, message) for v in distinct),
        decision_index=index,
    )


def validity_verify(
    cert: ValidityCertificate,
    decision: Decision,
    quorum_size: int,
    validity_quorum: int,
    directory: Directory,
) -> bool:
    if cert.inner.payload_root != decision_digest(decision):
        return False
    if not qc_verify(
        cert.inner, quorum_size, directory, bg_id=decision.scope, cycle=decision.cycle, kind="decision"
    ):
        return False
    message = validity_message(decision, cert.decision_index)
    return (
        crypto.check_signatures(cert.validity_signatures, message, directory, validity_quorum)
        is VerifyResult.OK
    )
