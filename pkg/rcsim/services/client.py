"""
Client agents: signed submission, retry on timeout, commit-proof checks.
"""
import logging
from typing import Dict, List, Set

from rcsim.models.messages import ClientSubmit, ProofDelivery
from rcsim.models.protocol import ClientTx, CommitProof
from rcsim.models.scenario import ClientSpec, Timing
from rcsim.services.certs import Directory, canonical, crypto, merkle_verify, qc_verify, sha256
from rcsim.services.engine import ANYWHERE, Actor
from rcsim.services.layout import Layout, sl_of

logger = logging.getLogger(__name__)


def tx_message(client_id: str, tx_id: int, nonce: int, payload: bytes) -> bytes:
    return canonical("tx", client_id, tx_id, nonce, payload)


def make_tx(client_id: str, tx_id: int, nonce: int, payload: bytes) -> ClientTx:
    """Build and sign a client transaction"""
    message = tx_message(client_id, tx_id, nonce, payload)
    return ClientTx(
        client_id=client_id,
        tx_id=tx_id,
        nonce=nonce,
        payload=payload,
        digest=sha256(message),
        signature=crypto.sign(client_id, message),
    )


def verify_tx(tx: ClientTx) -> bool:
    """True iff the digest matches and the signature verifies under client_id"""
    message = tx_message(tx.client_id, tx.tx_id, tx.nonce, tx.payload)
    if tx.digest != sha256(message) or tx.signature.signer != tx.client_id:
        return False
    return crypto.verify(tx.signature, message, crypto.provider.public_key(tx.client_id))


def verify_commit_proof(proof: CommitProof, bg_quorum_size: int, directory: Directory) -> bool:
    """
    Check a commit proof end to end.

    Args:
        proof: The proof returned by a node
        bg_quorum_size: Quorum size of the issuing BG
        directory: Verification keys of the issuing BG's SLs

    Returns:
        True iff both Merkle branches and the quorum certificate verify
    """
    if not merkle_verify(proof.tb_root, proof.tx_digest, proof.merkle_branch):
        return False
    if not merkle_verify(proof.bg_qc.payload_root, proof.tb_root, proof.block_branch):
        return False
    return qc_verify(proof.bg_qc, bg_quorum_size, directory, bg_id=proof.bg_id, cycle=proof.cycle)


class ClientAgent(Actor):
    """An open-loop client bound to one BG"""

    def __init__(
        self,
        client_id: str,
        home_bg: str,
        home_sl: str,
        layout: Layout,
        spec: ClientSpec,
        timing: Timing,
        stop_at: int,
        equivocating: bool = False,
    ):
        super().__init__(client_id)
        self.home_bg = home_bg
        self.home_sl = home_sl
        self.layout = layout
        self.spec = spec
        self.timing = timing
        self.stop_at = stop_at
        self.equivocating = equivocating
        self.interval = max(1, round(1 / spec.rate_per_tick))
        self.next_tx_id = 1
        self.pending: Dict[bytes, ClientTx] = {}
        self.contacted: Dict[bytes, List[str]] = {}
        self.suspected: Set[str] = set()
        self.abandoned: Set[bytes] = set()
        self.committed: Dict[bytes, int] = {}
        self.degraded = 0

    def location(self):
        return ANYWHERE

    def start(self) -> None:
        phase = self.engine.rng.randint(0, self.interval - 1)
        self.set_timer(self.timing.batch + phase, "submit")

    def timer_submit(self, _data) -> None:
        if self.now >= self.stop_at:
            return
        nodes = self.layout.nodes[self.home_sl]
        tx = make_tx(
            self.actor_id,
            self.next_tx_id,
            self.engine.rng.getrandbits(128),
            self.engine.rng.randbytes(self.spec.payload_bytes),
        )
        self.next_tx_id += 1
        self.submit(tx, nodes[tx.tx_id % len(nodes)])
        if self.equivocating:
            self._equivocate(tx)
        self.set_timer(self.now + self.interval, "submit")

    def submit(self, tx: ClientTx, first_target: str) -> None:
        """Send tx to one node and start the client timeout"""
        self.pending[tx.digest] = tx
        self.contacted[tx.digest] = [first_target]
        self.send(first_target, ClientSubmit(tx=tx))
        self.trace("client_submit", peer=first_target, digest=tx.digest, nonce=str(tx.nonce))
        self.set_timer(self.now + self.timing.timeout, "timeout", tx.digest)

    def _equivocate(self, tx: ClientTx) -> None:
        twin = make_tx(self.actor_id, tx.tx_id, tx.nonce, tx.payload[::-1] + b"\x01")
        other_sls = [sl for sl in self.layout.sls[self.home_bg] if sl != self.home_sl]
        if not other_sls:
            return
        target = self.layout.nodes[other_sls[tx.tx_id % len(other_sls)]][0]
        self.send(target, ClientSubmit(tx=twin))
        self.trace("client_submit", peer=target, digest=twin.digest, nonce=str(tx.nonce), twin=True)

    def timer_timeout(self, digest: bytes) -> None:
        tx = self.pending.get(digest)
        if tx is None or digest in self.abandoned:
            return
        # every node this tx went to has let the client down
        self.suspected.update(self.contacted[digest])
        self.retry(tx)

    def retry(self, tx: ClientTx) -> None:
        """Resend tx to f_i further SLs of the home BG, skipping nodes that already timed out"""
        used_sls = {sl_of(n) for n in self.contacted[tx.digest]}
        wanted = self.layout.topology.f_i
        targets: List[str] = []
        for sl in self.layout.sls[self.home_bg]:
            if len(targets) == wanted:
                break
            if sl in used_sls:
                continue
            trusted = [n for n in self.layout.nodes[sl] if n not in self.suspected]
            if trusted:
                targets.append(trusted[(tx.tx_id + len(self.contacted[tx.digest])) % len(trusted)])
        degraded = len(targets) < wanted
        if degraded:
            self.degraded += 1
        for target in targets:
            self.send(target, ClientSubmit(tx=tx))
        self.contacted[tx.digest].extend(targets)
        self.trace("client_retry", digest=tx.digest, targets=targets, degraded=degraded)
        if targets:
            self.set_timer(self.now + self.timing.timeout, "timeout", tx.digest)
        else:
            self.abandoned.add(tx.digest)

    def handle_proof_delivery(self, src: str, message: ProofDelivery) -> None:
        proof = message.proof
        ok = verify_commit_proof(
            proof, self.layout.bg_quorum(proof.bg_id), self.layout.sl_directory(proof.bg_id)
        )
        if not ok:
            self.trace("proof_rejected", peer=src, digest=proof.tx_digest, cycle=proof.cycle)
            return
        self.suspected.discard(message.node)
        if proof.tx_digest in self.committed:
            return
        self.committed[proof.tx_digest] = proof.cycle
        self.pending.pop(proof.tx_digest, None)
        self.trace(
            "proof_verified", peer=src, digest=proof.tx_digest, cycle=proof.cycle, bg=proof.bg_id
        )

    def outstanding(self) -> int:
        return len(self.pending)
