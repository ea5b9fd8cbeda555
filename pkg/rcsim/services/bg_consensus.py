"""
BG tier: BFT agreement on each cycle's payload across the SLs of one BG.

BGService stands for the BFT protocol run among the SLs' monitors. It is
available while at least a quorum of the BG's SLs are in one partition
component. Each SL proposes its sealed round-one blocks; the service builds
the payload deterministically, collects a quorum of SL signature shares and
hands the certified decision to every node of the BG.

The same sign-round machinery certifies a BG's BG_REPORT in CM mode, the
status votes behind an exclusion report and node removals.
"""
import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from rcsim.models.certs import QuorumCertificate, Signature
from rcsim.models.convergence import BGMeta, BGReport
from rcsim.models.messages import (
    BGDecided,
    BGPropose,
    CMOutcome,
    ExclusionAck,
    ExclusionNotice,
    ExclusionReport,
    GlobalViewReply,
    GlobalViewRequest,
    HeldAnswer,
    HeldNotice,
    HeldQuery,
    JoinRequest,
    LossOfQuorum,
    NodeRemovalProposal,
    Ping,
    Pong,
    ProbeRequest,
    ProbeResult,
    RemovalCertified,
    ReportDecided,
    ReportSubmit,
    ReportToCM,
    SignRequest,
    SignShare,
    StatusVote,
    ViewNotice,
    ViewRequest,
)
from rcsim.models.protocol import BGDecision, BGPayload, ExclusionRecord, MembershipView, RoleMap, TransactionBlock
from rcsim.models.scenario import Policy, Timing
from rcsim.services.certs import (
    digest,
    make_qc,
    merkle_root,
    order_blocks,
    qc_verify,
    sign_qc_share,
)
from rcsim.services.client import verify_tx
from rcsim.services.convergence import (
    HorizonTable,
    meta_digest,
    outcome_valid,
    report_digest,
)
from rcsim.services.engine import Actor, Engine
from rcsim.services.layout import (
    GLOBAL_ID,
    Layout,
    bg_service_id,
    cm_node_id,
    epoch_of,
    natural_key,
    sl_service_id,
)
from rcsim.services.superleaf import make_tb, tb_valid

logger = logging.getLogger(__name__)

MAX_EXCLUSION_ATTEMPTS = 3


class DedupBuffer:
    """Transaction keys ordered in the last `window` cycles"""

    def __init__(self, window: int):
        self.window = window
        self.seen: Dict[Tuple[str, int], int] = {}

    def add(self, key: Tuple[str, int], cycle: int) -> None:
        self.seen.setdefault(key, cycle)

    def contains(self, key: Tuple[str, int], cycle: int) -> bool:
        ordered_at = self.seen.get(key)
        return ordered_at is not None and cycle - self.window <= ordered_at < cycle

    def prune(self, cycle: int) -> None:
        self.seen = {k: c for k, c in self.seen.items() if c >= cycle - self.window}


def payload_root(blocks: Sequence[TransactionBlock], meta: Optional[BGMeta] = None) -> bytes:
    leaves = [tb.root for tb in blocks]
    if meta is not None:
        leaves.append(meta_digest(meta))
    return merkle_root(leaves)


def conflicting_keys(blocks: Iterable[TransactionBlock]) -> Set[Tuple[str, int]]:
    """Keys carried with more than one digest, i.e. client equivocation"""
    digests: Dict[Tuple[str, int], Set[bytes]] = {}
    for tb in blocks:
        for tx in tb.txs:
            digests.setdefault(tx.key, set()).add(tx.digest)
    return {key for key, values in digests.items() if len(values) > 1}


def build_payload(
    bg_id: str,
    cycle: int,
    proposals: Mapping[str, Sequence[TransactionBlock]],
    dedup: DedupBuffer,
    meta: Optional[BGMeta] = None,
) -> BGPayload:
    """
    Deterministic payload from the SLs' proposals.

    Invalid blocks and transactions are dropped, then blocks are ordered
    by root. The first copy of each key survives unless the key carries
    conflicting digests or was ordered within the dedup window.
    """
    candidates = [
        tb for sl in sorted(proposals, key=natural_key) for tb in proposals[sl] if tb_valid(tb)
    ]
    conflicted = conflicting_keys(candidates)
    seen: Set[Tuple[str, int]] = set()
    kept: List[TransactionBlock] = []
    for _, tb in order_blocks((tb.root, tb) for tb in candidates):
        txs = []
        for tx in tb.txs:
            if tx.key in conflicted or tx.key in seen or dedup.contains(tx.key, cycle):
                continue
            if not verify_tx(tx):
                continue
            seen.add(tx.key)
            txs.append(tx)
        if txs:
            kept.append(make_tb(tb.origin, tb.sl_id, cycle, txs, tb.claimed_number))
    blocks = tuple(tb for _, tb in order_blocks((tb.root, tb) for tb in kept))
    return BGPayload(
        bg_id=bg_id,
        cycle=cycle,
        blocks=blocks,
        participating_sls=tuple(sorted(proposals, key=natural_key)),
        meta=meta,
        root=payload_root(blocks, meta),
    )


def bg_decide(
    bg_id: str,
    cycle: int,
    proposals: Mapping[str, Sequence[TransactionBlock]],
    dedup: DedupBuffer,
    signers: Sequence[str],
    quorum_size: int,
    meta: Optional[BGMeta] = None,
) -> BGDecision:
    """Build the payload and certify it with the given SLs' shares in one step"""
    payload = build_payload(bg_id, cycle, proposals, dedup, meta)
    shares = [sign_qc_share(sl, bg_id, cycle, payload.root) for sl in signers]
    return BGDecision(payload=payload, qc=make_qc(bg_id, cycle, payload.root, shares, quorum_size))


def verify_decision(
    decision: BGDecision,
    layout: Layout,
    bg_id: Optional[str] = None,
    cycle: Optional[int] = None,
) -> bool:
    """Recompute every root of a decision and check its certificate"""
    payload = decision.payload
    if bg_id is not None and payload.bg_id != bg_id:
        return False
    if cycle is not None and payload.cycle != cycle:
        return False
    if payload.bg_id not in layout.sls:
        return False
    if not all(tb_valid(tb) for tb in payload.blocks):
        return False
    if payload.root != payload_root(payload.blocks, payload.meta) or decision.qc.payload_root != payload.root:
        return False
    return qc_verify(
        decision.qc,
        layout.bg_quorum(payload.bg_id),
        layout.sl_directory(payload.bg_id),
        bg_id=payload.bg_id,
        cycle=payload.cycle,
        kind="order",
    )


def status_root(suspect: str, cycle: int) -> bytes:
    return digest("status", suspect, cycle)


def removal_root(node: str, alive: bool) -> bytes:
    return digest("removal", node, alive)


def forge_decision(decision: BGDecision, layout: Layout, byzantine_sls: Sequence[str]) -> BGDecision:
    """A conflicting payload signed only by colluding SLs"""
    payload = decision.payload
    blocks = payload.blocks[1:]
    root = payload_root(blocks, payload.meta)
    forged = payload.model_copy(update={"blocks": blocks, "root": root})
    shares = [sign_qc_share(sl, payload.bg_id, payload.cycle, root) for sl in byzantine_sls]
    qc = make_qc(payload.bg_id, payload.cycle, root, shares, layout.bg_quorum(payload.bg_id))
    return BGDecision(payload=forged, qc=qc)


def tamper_decision(decision: BGDecision) -> BGDecision:
    """Drop the last block but keep the original certificate"""
    payload = decision.payload
    if payload.blocks:
        tampered = payload.model_copy(update={"blocks": payload.blocks[:-1]})
    else:
        tampered = payload.model_copy(update={"root": digest("tampered", payload.root)})
    return BGDecision(payload=tampered, qc=decision.qc)


def inject_byzantine(engine: Engine, layout: Layout, target: str, behavior: str) -> List[str]:
    """
    Attach a Byzantine behavior to an SL (all its nodes), a node or a CM node.

    Returns:
        Ids of the actors that now carry the behavior
    """
    if target in layout.nodes:
        actors = list(layout.nodes[target])
    else:
        actors = [target]
    touched = []
    for actor_id in actors:
        actor = engine.actors.get(actor_id)
        if actor is None:
            continue
        if hasattr(actor, "behaviors"):
            actor.behaviors.add(behavior)
        if behavior == "malformed_command" and hasattr(actor, "malformed"):
            actor.malformed = True
        touched.append(actor_id)
    engine.recorder.record(engine.now, "byzantine", target, behavior=behavior, actors=touched)
    logger.info("t=%d %s turns Byzantine: %s", engine.now, target, behavior)
    return touched


class SignRound:
    """Signature shares collected for one root"""

    def __init__(
        self,
        kind: str,
        cycle: int,
        root: bytes,
        request: SignRequest,
        on_done: Callable[[QuorumCertificate], None],
    ):
        self.kind = kind
        self.cycle = cycle
        self.root = root
        self.request = request
        self.on_done = on_done
        self.shares: Dict[str, Signature] = {}
        self.done = False


class BGInstance:
    """Proposals received for one cycle"""

    def __init__(self, cycle: int):
        self.cycle = cycle
        self.proposals: Dict[str, Tuple[TransactionBlock, ...]] = {}
        self.timed_out = False
        self.payload: Optional[BGPayload] = None


class ReportInstance:
    def __init__(self, cycle: int):
        self.cycle = cycle
        self.submissions: Dict[str, ReportSubmit] = {}
        self.timed_out = False
        self.started = False
        self.report: Optional[BGReport] = None


class BGService(Actor):
    """BFT agreement among the SLs of one BG"""

    def __init__(self, bg_id: str, layout: Layout, timing: Timing, policy: Policy):
        super().__init__(bg_service_id(bg_id))
        self.bg_id = bg_id
        self.layout = layout
        self.timing = timing
        self.policy = policy
        self.sls: List[str] = list(layout.sls[bg_id])
        self.quorum = layout.bg_quorum(bg_id)
        self.dedup = DedupBuffer(timing.dedup_window)
        self.instances: Dict[int, BGInstance] = {}
        self.decisions: Dict[int, BGDecision] = {}
        self.next_cycle = 1
        self.rounds: Dict[Tuple[str, int], SignRound] = {}
        self.contacts: Dict[str, str] = {}
        self.leader: Optional[str] = None
        self.held: Dict[str, int] = {}
        self.votes: Dict[Tuple[str, int], Dict[str, Signature]] = {}
        self.outstanding: Dict[str, int] = {}
        self.views: Dict[int, MembershipView] = {}
        self.records: Dict[Tuple[str, int], ExclusionRecord] = {}
        self.view_waiters: Dict[int, Set[str]] = {}
        self.removals: Dict[int, Tuple[str, str, Dict[str, ProbeResult]]] = {}
        self.removal_seq = 0
        self.reports: Dict[int, ReportInstance] = {}
        self.metas: Dict[int, BGMeta] = {}
        self.cm_outcomes: Dict[int, CMOutcome] = {}
        self.horizon = HorizonTable(timing.k)
        self.join_pending = False

    def location(self):
        return self.engine.majority_home(
            (self.engine.actors[sl_service_id(sl)].location() for sl in self.sls), self.quorum
        )

    def start(self) -> None:
        if self.bg_id in self.layout.spare_bgs:
            self.join_pending = True
            self.set_timer(self.timing.batch, "join_check")

    @property
    def nodes(self) -> List[str]:
        return self.layout.bg_nodes(self.bg_id)

    @property
    def cm_mode(self) -> bool:
        return self.policy.mode == "cm"

    def broadcast(self, message) -> None:
        for node in self.nodes:
            self.send(node, message)

    # -- membership knowledge -------------------------------------------

    def view_for(self, cycle: int) -> Optional[MembershipView]:
        return self.views.get(epoch_of(cycle, self.timing.epoch))

    def live_listed(self, cycle: int) -> List[str]:
        """BGs whose input this BG expects in a cycle"""
        view = self.view_for(cycle)
        if view is None:
            return [self.bg_id]
        epoch = view.epoch
        members = [bg for bg in view.bgs if view.admitted.get(bg, 0) <= cycle]
        excluded = {r.bg_id for r in self.records.values() if r.applies(cycle, epoch)}
        if self.cm_mode and self.policy.cm_bypass:
            excluded |= self.horizon.excluded(cycle)
        return sorted((bg for bg in members if bg not in excluded), key=natural_key)

    # -- cycle agreement ------------------------------------------------

    def instance(self, cycle: int) -> BGInstance:
        inst = self.instances.get(cycle)
        if inst is None:
            inst = BGInstance(cycle)
            self.instances[cycle] = inst
        return inst

    def handle_bg_propose(self, src: str, message: BGPropose) -> None:
        if message.sl_id not in self.sls:
            return
        self.contacts[message.sl_id] = message.sender
        decided = self.decisions.get(message.cycle)
        if decided is not None:
            self.send(src, BGDecided(decision=decided))
            return
        inst = self.instance(message.cycle)
        known = inst.proposals.get(message.sl_id)
        if known is not None:
            if known != message.blocks:
                self.trace("equivocation", peer=message.sl_id, cycle=message.cycle)
            return
        inst.proposals[message.sl_id] = message.blocks
        if len(inst.proposals) == 1:
            self.set_timer(self.now + self.timing.big_delta, "decide", message.cycle)
        self.try_decide()

    def timer_decide(self, cycle: int) -> None:
        self.instance(cycle).timed_out = True
        self.try_decide()

    def meta_ready(self, cycle: int) -> Tuple[bool, Optional[BGMeta]]:
        if not (self.cm_mode and self.policy.cm_bypass):
            return True, None
        target = cycle - self.timing.k
        if target < 1:
            return True, None
        meta = self.metas.get(target)
        return meta is not None, meta

    def try_decide(self) -> None:
        cycle = self.next_cycle
        inst = self.instances.get(cycle)
        if inst is None or inst.payload is not None or self.location() is None:
            return
        enough = len(inst.proposals) == len(self.sls) or (
            inst.timed_out and len(inst.proposals) >= self.quorum
        )
        if not enough:
            return
        ready, meta = self.meta_ready(cycle)
        if not ready:
            return
        flagged = conflicting_keys(tb for blocks in inst.proposals.values() for tb in blocks)
        for client_id in sorted({key[0] for key in flagged}):
            self.trace("client_flagged", peer=client_id, cycle=cycle, reason="conflicting digests")
        inst.payload = build_payload(self.bg_id, cycle, inst.proposals, self.dedup, meta)
        self.start_round(
            "order",
            cycle,
            inst.payload.root,
            SignRequest(kind="order", cycle=cycle, root=inst.payload.root, payload=inst.payload),
            lambda qc: self.finish_order(cycle, qc),
        )

    def start_round(
        self,
        kind: str,
        cycle: int,
        root: bytes,
        request: SignRequest,
        on_done: Callable[[QuorumCertificate], None],
    ) -> SignRound:
        sign_round = SignRound(kind, cycle, root, request, on_done)
        self.rounds[(kind, cycle)] = sign_round
        self._request_shares(sign_round)
        return sign_round

    def _request_shares(self, sign_round: SignRound) -> None:
        for sl in self.sls:
            contact = self.contacts.get(sl)
            if contact is not None and sl not in sign_round.shares:
                self.send(contact, sign_round.request)
        self.set_timer(self.now + 2 * self.timing.big_delta, "sign_retry", (sign_round.kind, sign_round.cycle))

    def timer_sign_retry(self, key: Tuple[str, int]) -> None:
        sign_round = self.rounds.get(key)
        if sign_round is not None and not sign_round.done:
            self._request_shares(sign_round)

    def handle_sign_share(self, src: str, message: SignShare) -> None:
        sign_round = self.rounds.get((message.kind, message.cycle))
        if sign_round is None or sign_round.done or message.root != sign_round.root:
            return
        if message.sl_id not in self.sls or message.signature.signer != message.sl_id:
            return
        check = make_qc(self.bg_id, message.cycle, message.root, [message.signature], 1, kind=message.kind)
        if not qc_verify(check, 1, self.layout.sl_directory(self.bg_id)):
            return
        sign_round.shares[message.sl_id] = message.signature
        if len(sign_round.shares) >= self.quorum:
            sign_round.done = True
            qc = make_qc(
                self.bg_id,
                message.cycle,
                message.root,
                list(sign_round.shares.values()),
                self.quorum,
                kind=message.kind,
            )
            sign_round.on_done(qc)

    def finish_order(self, cycle: int, qc: QuorumCertificate) -> None:
        payload = self.instances[cycle].payload
        decision = BGDecision(payload=payload, qc=qc)
        self.decisions[cycle] = decision
        for tb in payload.blocks:
            for tx in tb.txs:
                self.dedup.add(tx.key, cycle)
        self.dedup.prune(cycle)
        self.held[self.bg_id] = cycle
        self.trace(
            "bg_decide",
            digest=payload.root,
            cycle=cycle,
            blocks=len(payload.blocks),
            txs=[f"{tx.client_id}:{tx.nonce}" for tb in payload.blocks for tx in tb.txs],
            sls=list(payload.participating_sls),
            meta=payload.meta.flavor if payload.meta else None,
        )
        self.broadcast(BGDecided(decision=decision))
        self._track_leader(payload.participating_sls)
        self.next_cycle = cycle + 1
        if cycle in self.reports:
            self._try_report(cycle)
        self.try_decide()

    def _track_leader(self, sls: Iterable[str]) -> None:
        monitors = [self.contacts[sl] for sl in sls if sl in self.contacts]
        if not monitors:
            return
        leader = min(monitors, key=natural_key)
        if leader != self.leader:
            self.leader = leader
            self.trace("bg_leader", peer=leader)

    # -- exclusion reports ----------------------------------------------

    def handle_held_notice(self, src: str, message: HeldNotice) -> None:
        if message.cycle > self.held.get(message.target_bg, 0):
            self.held[message.target_bg] = message.cycle

    def handle_status_vote(self, src: str, message: StatusVote) -> None:
        if self.cm_mode or message.sl_id not in self.sls:
            return
        root = status_root(message.suspect, message.cycle)
        single = make_qc(self.bg_id, message.cycle, root, [message.signature], 1, kind="status")
        if message.signature.signer != message.sl_id or not qc_verify(
            single, 1, self.layout.sl_directory(self.bg_id)
        ):
            return
        votes = self.votes.setdefault((message.suspect, message.cycle), {})
        votes[message.sl_id] = message.signature
        if len(votes) < self.quorum or message.suspect in self.outstanding:
            return
        epoch = epoch_of(message.cycle, self.timing.epoch)
        if any(r.bg_id == message.suspect and r.applies(message.cycle, epoch) for r in self.records.values()):
            return
        cert = make_qc(self.bg_id, message.cycle, root, list(votes.values()), self.quorum, kind="status")
        report = ExclusionReport(reporter=self.bg_id, suspect=message.suspect, cycle=message.cycle, cert=cert)
        self.outstanding[message.suspect] = message.cycle
        self.trace("exclusion_report", peer=message.suspect, cycle=message.cycle)
        self._send_exclusion(report, 1)

    def _send_exclusion(self, report: ExclusionReport, attempt: int) -> None:
        self.send(GLOBAL_ID, report)
        self.set_timer(self.now + 4 * self.timing.big_delta, "exclusion_retry", (report, attempt))

    def timer_exclusion_retry(self, data: Tuple[ExclusionReport, int]) -> None:
        report, attempt = data
        if self.outstanding.get(report.suspect) != report.cycle:
            return
        if attempt < MAX_EXCLUSION_ATTEMPTS:
            self._send_exclusion(report, attempt + 1)
            return
        self.outstanding.pop(report.suspect, None)
        self.trace("stall", reason="loss_of_quorum", cycle=report.cycle, suspect=report.suspect)
        self.broadcast(LossOfQuorum(reason="global service unreachable", cycle=report.cycle))

    def handle_exclusion_ack(self, src: str, message: ExclusionAck) -> None:
        if self.outstanding.get(message.suspect) == message.cycle:
            self.outstanding.pop(message.suspect)

    def handle_exclusion_notice(self, src: str, message: ExclusionNotice) -> None:
        self.learn_record(message.record)

    def learn_record(self, record: ExclusionRecord) -> None:
        key = (record.bg_id, record.seq)
        if key in self.records:
            return
        self.records[key] = record
        self.outstanding.pop(record.bg_id, None)
        if record.bg_id == self.bg_id and not self.join_pending:
            self.join_pending = True
            self.set_timer(self.now, "join_check")
        self.broadcast(ExclusionNotice(record=record))

    def handle_held_query(self, src: str, message: HeldQuery) -> None:
        self.send(
            src,
            HeldAnswer(
                bg_id=self.bg_id,
                suspect=message.suspect,
                held=self.held.get(message.suspect, 0),
                instance=message.instance,
            ),
        )

    # -- views and joins ------------------------------------------------

    def handle_view_notice(self, src: str, message: ViewNotice) -> None:
        self.learn_view(message.view)

    def learn_view(self, view: MembershipView) -> None:
        if view.epoch in self.views:
            return
        self.views[view.epoch] = view
        if self.bg_id in view.bgs:
            self.join_pending = False
        elif not self.join_pending:
            # left out while unreachable; ask to come back
            self.join_pending = True
            self.set_timer(self.now, "join_check")
        self.broadcast(ViewNotice(view=view))
        cm = cm_node_id(self.bg_id)
        if cm in self.engine.actors:
            self.send(cm, ViewNotice(view=view))
        for requester in sorted(self.view_waiters.pop(view.epoch, set())):
            self.send(requester, ViewNotice(view=view))

    def handle_view_request(self, src: str, message: ViewRequest) -> None:
        view = self.views.get(message.epoch)
        if view is not None:
            self.send(message.requester, ViewNotice(view=view))
            return
        self.view_waiters.setdefault(message.epoch, set()).add(message.requester)
        self.send(GLOBAL_ID, GlobalViewRequest(epoch=message.epoch, bg_id=self.bg_id, requester=message.requester))
        self.set_timer(self.now + 4 * self.timing.net_delay + self.timing.big_delta, "view_timeout", message.epoch)

    def handle_global_view_reply(self, src: str, message: GlobalViewReply) -> None:
        for record in message.records:
            self.learn_record(record)
        if message.view is not None:
            self.learn_view(message.view)

    def timer_view_timeout(self, epoch: int) -> None:
        waiting = self.view_waiters.get(epoch)
        if epoch in self.views or not waiting:
            return
        for requester in sorted(waiting):
            self.send(requester, LossOfQuorum(reason="view unavailable"))

    def timer_join_check(self, _data) -> None:
        latest = max(self.views) if self.views else None
        member = latest is not None and self.bg_id in self.views[latest].bgs
        if member and not self.join_pending:
            return
        if self.location() is not None:
            self.send(GLOBAL_ID, JoinRequest(bg_id=self.bg_id, emulators=tuple(self.nodes)))
        self.set_timer(self.now + 4 * self.timing.batch, "join_check")

    # -- node removal ---------------------------------------------------

    def handle_node_removal_proposal(self, src: str, message: NodeRemovalProposal) -> None:
        if message.sl_id not in self.sls or message.node not in self.layout.nodes[message.sl_id]:
            return
        self.removal_seq += 1
        proposal = self.removal_seq
        self.removals[proposal] = (message.proposer, message.node, {})
        self.trace("removal_proposed", peer=message.node, proposer=message.proposer, proposal=proposal)
        for sl in self.sls:
            contact = self.contacts.get(sl)
            if contact is not None:
                self.send(contact, ProbeRequest(node=message.node, proposal=proposal))

    def handle_probe_result(self, src: str, message: ProbeResult) -> None:
        entry = self.removals.get(message.proposal)
        if entry is None or message.sl_id not in self.sls:
            return
        proposer, node, results = entry
        results[message.sl_id] = message
        dead = [r for r in results.values() if not r.alive]
        alive = [r for r in results.values() if r.alive]
        if len(dead) >= self.quorum:
            del self.removals[message.proposal]
            root = removal_root(node, False)
            cert = make_qc(self.bg_id, message.proposal, root, [r.signature for r in dead], self.quorum, kind="removal")
            self.trace("node_removal", peer=node, proposer=proposer)
            self.send(GLOBAL_ID, RemovalCertified(bg_id=self.bg_id, node=node, cert=cert))
        elif len(alive) > self.layout.topology.f_i:
            del self.removals[message.proposal]
            self.trace("removal_rejected", peer=node, proposer=proposer)

    # -- convergence module reports -------------------------------------

    def handle_report_submit(self, src: str, message: ReportSubmit) -> None:
        if not self.cm_mode or message.sl_id not in self.sls:
            return
        inst = self.reports.setdefault(message.cycle, ReportInstance(message.cycle))
        if inst.started or message.sl_id in inst.submissions:
            return
        inst.submissions[message.sl_id] = message
        self.contacts.setdefault(message.sl_id, src)
        if len(inst.submissions) == 1:
            self.set_timer(self.now + self.timing.big_delta, "report_decide", message.cycle)
        self._try_report(message.cycle)

    def timer_report_decide(self, cycle: int) -> None:
        inst = self.reports.get(cycle)
        if inst is not None:
            inst.timed_out = True
            self._try_report(cycle)

    def _try_report(self, cycle: int) -> None:
        inst = self.reports[cycle]
        own = self.decisions.get(cycle)
        if inst.started or own is None:
            return
        if not (len(inst.submissions) == len(self.sls) or (inst.timed_out and len(inst.submissions) >= self.quorum)):
            return
        received: Dict[str, BGDecision] = {}
        for sl in sorted(inst.submissions, key=natural_key):
            for decision in inst.submissions[sl].decisions:
                if decision.bg_id == self.bg_id or decision.bg_id in received:
                    continue
                if verify_decision(decision, self.layout, cycle=cycle):
                    received[decision.bg_id] = decision
        listed = self.live_listed(cycle)
        report = BGReport(
            cycle=cycle,
            reporter=self.bg_id,
            own_hash=own.root,
            received={bg: d.root for bg, d in sorted(received.items())},
            complete=set(listed) <= set(received) | {self.bg_id},
        )
        inst.started = True
        root = report_digest(report)
        self.start_round(
            "report",
            cycle,
            root,
            SignRequest(kind="report", cycle=cycle, root=root, report=report),
            lambda qc: self.finish_report(report, tuple(received.values()), qc),
        )

    def finish_report(self, report: BGReport, decisions: Tuple[BGDecision, ...], qc: QuorumCertificate) -> None:
        certified = report.model_copy(update={"cert": qc})
        self.reports[report.cycle].report = certified
        self.trace(
            "bg_report",
            cycle=report.cycle,
            complete=report.complete,
            received=sorted(report.received, key=natural_key),
        )
        self.broadcast(ReportDecided(report=certified, decisions=decisions))
        self._send_report(report.cycle)
        if self.policy.cm_bypass and report.complete:
            self.metas[report.cycle] = BGMeta(
                cycle=report.cycle, bg_id=self.bg_id, flavor="NO_ASST", report_cert=qc
            )
            self.try_decide()
        elif report.cycle not in self.cm_outcomes:
            self.set_timer(self.now + 2 * self.timing.big_delta, "cm_resend", report.cycle)

    def _send_report(self, cycle: int) -> None:
        report = self.reports[cycle].report
        for bg in self.layout.all_bgs:
            cm = cm_node_id(bg)
            if cm in self.engine.actors:
                self.send(cm, ReportToCM(report=report))

    def timer_cm_resend(self, cycle: int) -> None:
        if cycle in self.cm_outcomes:
            return
        self._send_report(cycle)
        self.set_timer(self.now + 2 * self.timing.big_delta, "cm_resend", cycle)

    def handle_cm_outcome(self, src: str, message: CMOutcome) -> None:
        if message.cycle in self.cm_outcomes or not outcome_valid(message, self.layout):
            return
        self.cm_outcomes[message.cycle] = message
        if message.reply is not None:
            self.horizon.extend_exclusion(message.reply)
            meta = BGMeta(cycle=message.cycle, bg_id=self.bg_id, flavor="ASSISTED", reply=message.reply)
        else:
            meta = BGMeta(cycle=message.cycle, bg_id=self.bg_id, flavor="DENIED", deny=message.deny)
        self.metas.setdefault(message.cycle, meta)
        self.broadcast(message)
        self.try_decide()


class BGMonitor:
    """Node-side BG duties, active while the node is its SL's monitor"""

    def init_bg_monitor(self) -> None:
        self.accused = False
        self.probes: Dict[int, Tuple[str, bool]] = {}
        self.quorum_losses: Set[Tuple[str, Optional[int]]] = set()

    @property
    def bg_service(self) -> str:
        return bg_service_id(self.bg_id)

    def bg_propose(self, cycle: int) -> None:
        blocks = tuple(self.seal_round1(cycle))
        if "omit_transactions" in self.behaviors:
            blocks = blocks[: len(blocks) // 2]
        self.send(self.bg_service, BGPropose(cycle=cycle, sl_id=self.sl_id, blocks=blocks, sender=self.actor_id))
        if "equivocate_state" in self.behaviors and blocks:
            self.send(
                self.bg_service,
                BGPropose(cycle=cycle, sl_id=self.sl_id, blocks=blocks[1:], sender=self.actor_id),
            )
        self.set_timer(self.now + 3 * self.timing.big_delta, "repropose", cycle)

    def timer_repropose(self, cycle: int) -> None:
        if self.is_monitor and not self.has_own_decision(cycle):
            self.bg_propose(cycle)

    def handle_sign_request(self, src: str, message: SignRequest) -> None:
        if src != self.bg_service or not self.is_monitor:
            return
        if "equivocate_state" not in self.behaviors and not self.share_allowed(message):
            self.trace("sign_refused", cycle=message.cycle, kind=message.kind)
            return
        signature = sign_qc_share(self.sl_id, self.bg_id, message.cycle, message.root, message.kind)
        self.send(
            src,
            SignShare(kind=message.kind, cycle=message.cycle, root=message.root, sl_id=self.sl_id, signature=signature),
        )

    def share_allowed(self, message: SignRequest) -> bool:
        if message.kind == "order":
            payload = message.payload
            if payload is None or payload.bg_id != self.bg_id or payload.cycle != message.cycle:
                return False
            if payload.root != message.root or payload.root != payload_root(payload.blocks, payload.meta):
                return False
            return all(tb_valid(tb) and all(verify_tx(tx) for tx in tb.txs) for tb in payload.blocks)
        if message.kind == "report":
            report = message.report
            return report is not None and report.reporter == self.bg_id and report_digest(report) == message.root
        return False

    def handle_bg_decided(self, src: str, message: BGDecided) -> None:
        if src != self.bg_service:
            return
        self.on_own_decision(message.decision)

    def vote_unreachable(self, suspect: str, cycle: int) -> None:
        if not self.is_monitor:
            return
        signature = sign_qc_share(self.sl_id, self.bg_id, cycle, status_root(suspect, cycle), "status")
        self.send(self.bg_service, StatusVote(cycle=cycle, suspect=suspect, sl_id=self.sl_id, signature=signature))
        self.trace("status_vote", peer=suspect, cycle=cycle)

    def notify_held(self, target_bg: str, cycle: int) -> None:
        if self.is_monitor:
            self.send(self.bg_service, HeldNotice(target_bg=target_bg, cycle=cycle, sl_id=self.sl_id))

    def on_roles_changed(self, previous: Optional[RoleMap], roles: RoleMap) -> None:
        if roles.monitor != self.actor_id:
            return
        if previous is not None:
            for node in sorted(set(previous.live) - set(roles.live), key=natural_key):
                self.send(
                    self.bg_service,
                    NodeRemovalProposal(sl_id=self.sl_id, node=node, proposer=self.actor_id),
                )
        if "false_accusation" in self.behaviors and not self.accused:
            victims = [n for n in roles.live if n != self.actor_id]
            if victims:
                self.accused = True
                self.send(
                    self.bg_service,
                    NodeRemovalProposal(sl_id=self.sl_id, node=victims[0], proposer=self.actor_id),
                )

    def handle_probe_request(self, src: str, message: ProbeRequest) -> None:
        if src != self.bg_service:
            return
        self.probes[message.proposal] = (message.node, False)
        self.send(message.node, Ping(nonce=message.proposal))
        self.set_timer(self.now + 3 * self.timing.net_delay, "probe", message.proposal)

    def handle_ping(self, src: str, message: Ping) -> None:
        self.send(src, Pong(nonce=message.nonce))

    def handle_pong(self, src: str, message: Pong) -> None:
        probe = self.probes.get(message.nonce)
        if probe is not None and probe[0] == src:
            self.probes[message.nonce] = (src, True)

    def timer_probe(self, proposal: int) -> None:
        node, alive = self.probes.pop(proposal, (None, False))
        if node is None:
            return
        signature = sign_qc_share(self.sl_id, self.bg_id, proposal, removal_root(node, alive), "removal")
        self.send(
            self.bg_service,
            ProbeResult(proposal=proposal, node=node, alive=alive, sl_id=self.sl_id, signature=signature),
        )

    def handle_loss_of_quorum(self, src: str, message: LossOfQuorum) -> None:
        key = (message.reason, message.cycle)
        if key not in self.quorum_losses:
            self.quorum_losses.add(key)
            self.trace("stall", reason="loss_of_quorum", cycle=message.cycle, detail=message.reason)
