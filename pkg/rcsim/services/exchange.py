"""
Inter-BG state exchange and commit.

Representatives fetch every other BG's certified payload for a cycle from
that BG's emulators, escalating on timeout:

    1. one emulator, picked by rotation over (cycle, SL, representative)
    2. f_i emulators from further SLs of the target BG
    3. one emulator from each remaining SL
    4. relays: one node of each other included BG, serving a copy it holds

after which the representative announces itself stalled on the target
through its SL's atomic broadcast, and keeps polling at a slower rate.

A cycle is complete once every included BG's payload is held; in global
mode it is committed when the next cycle completes too. In CM mode the
commit set comes from the cycle's settlement: a certified CM_REPLY, or the
union of all inputs once the metas carried k cycles later show nobody
asked for assistance.
"""
import logging
from typing import Dict, List, Optional, Sequence, Set, Tuple

from rcsim.errors import CertificateError, StateTransferRefused
from rcsim.models.convergence import BGReport, CMDecision
from rcsim.models.messages import (
    CMOutcome,
    CMQuery,
    ExclusionNotice,
    PayloadItem,
    ProofDelivery,
    RepStalledItem,
    ReportDecided,
    ReportSubmit,
    TransferBundle,
    TransferRequest,
    ViewNotice,
    ViewRequest,
)
from rcsim.models.protocol import (
    BGDecision,
    CommitProof,
    CommittedCycle,
    CycleState,
    ExclusionRecord,
    MembershipView,
    StateRequest,
    StateResponse,
)
from rcsim.services.bg_consensus import forge_decision, tamper_decision, verify_decision
from rcsim.services.certs import digest, merkle_build, merkle_prove, order_blocks
from rcsim.services.convergence import HorizonTable, classify, meta_digest, outcome_valid
from rcsim.services.global_service import record_valid, view_valid
from rcsim.services.layout import cm_node_id, epoch_of, natural_key, sl_of

logger = logging.getLogger(__name__)

# a node this many cycles behind its own BG asks a peer for a state transfer
CATCHUP_LAG = 6
TRANSFER_LIMIT = 64


def smoothed_rto(rto: int, sample: int, floor: int) -> int:
    """Exponentially weighted fetch timeout, never below the floor"""
    return max(floor, int(0.75 * rto + 0.25 * sample))


class FetchState:
    """Escalation progress of one representative's fetch"""

    def __init__(self, target: str, cycle: int):
        self.target = target
        self.cycle = cycle
        self.stage = 0
        self.token = 0
        self.tried: Set[str] = set()
        self.sent_at: Dict[str, int] = {}
        self.done = False
        self.stalled = False
        self.null_extended = False


class ExchangeRole:
    """Representative, emulator and commit duties of a node"""

    def init_exchange(self) -> None:
        self.cycles: Dict[int, CycleState] = {}
        self.views: Dict[int, MembershipView] = {}
        self.records: Dict[Tuple[str, int], ExclusionRecord] = {}
        self.fetches: Dict[Tuple[int, str], FetchState] = {}
        self.rto = self.timing.big_delta
        self.push_waiters: Dict[Tuple[str, int], Set[str]] = {}
        self.rep_stalls: Dict[Tuple[int, str], Set[str]] = {}
        self.awaiting_view: Set[int] = set()
        self.view_requested: Set[int] = set()
        self.commit_frontier = 1
        self.committed: Dict[int, CommittedCycle] = {}
        self.transfer_inflight = False
        self.transfer_attempt = 0
        self.bg_reports: Dict[int, BGReport] = {}
        self.cm_outcomes: Dict[int, CMOutcome] = {}
        self.settled: Dict[int, Optional[CMDecision]] = {}
        self.settle_frontier = 1
        self.horizon = HorizonTable(self.timing.k)
        self.cm_queries: Dict[int, int] = {}

    # -- bookkeeping ----------------------------------------------------

    @property
    def cm_mode(self) -> bool:
        return self.policy.mode == "cm"

    @property
    def bypass(self) -> bool:
        return self.cm_mode and self.policy.cm_bypass

    def cycle_state(self, cycle: int) -> CycleState:
        state = self.cycles.get(cycle)
        if state is None:
            state = CycleState(cycle=cycle)
            self.cycles[cycle] = state
        return state

    def has_own_decision(self, cycle: int) -> bool:
        state = self.cycles.get(cycle)
        return state is not None and state.own is not None

    def decision_for(self, bg_id: str, cycle: int) -> Optional[BGDecision]:
        state = self.cycles.get(cycle)
        if state is None:
            return None
        if bg_id == self.bg_id:
            return state.own
        return state.fetched.get(bg_id)

    def current_cycle(self) -> int:
        return max(1, self.now // self.timing.batch)

    def record_applies(self, bg_id: str, cycle: int) -> bool:
        epoch = epoch_of(cycle, self.timing.epoch)
        return any(r.bg_id == bg_id and r.applies(cycle, epoch) for r in self.records.values())

    def own_bg_excluded(self) -> bool:
        return self.record_applies(self.bg_id, self.current_cycle())

    # -- membership -----------------------------------------------------

    def view_for(self, cycle: int) -> Optional[MembershipView]:
        epoch = epoch_of(cycle, self.timing.epoch)
        view = self.views.get(epoch)
        if view is None:
            self.request_view(epoch)
        return view

    def request_view(self, epoch: int) -> None:
        if epoch in self.view_requested:
            return
        self.view_requested.add(epoch)
        self.send(self.bg_service, ViewRequest(epoch=epoch, requester=self.actor_id))
        self.set_timer(self.now + 4 * self.timing.batch, "view_retry", epoch)

    def timer_view_retry(self, epoch: int) -> None:
        self.view_requested.discard(epoch)
        if epoch not in self.views and any(epoch_of(c, self.timing.epoch) == epoch for c in self.awaiting_view):
            self.request_view(epoch)

    def base_members(self, cycle: int) -> Optional[List[str]]:
        """Members of the cycle's view, minus certified exclusions"""
        view = self.view_for(cycle)
        if view is None:
            return None
        return [
            bg
            for bg in view.bgs
            if view.admitted.get(bg, 0) <= cycle and not self.record_applies(bg, cycle)
        ]

    def inclusion(self, cycle: int) -> Optional[List[str]]:
        """BGs whose input the cycle's order is computed from"""
        members = self.base_members(cycle)
        if members is None:
            return None
        if self.bypass:
            excluded = self.horizon.excluded(cycle)
            members = [bg for bg in members if bg not in excluded]
        return sorted(members, key=natural_key)

    def emulators_of(self, bg_id: str, cycle: int) -> List[str]:
        view = self.views.get(epoch_of(cycle, self.timing.epoch))
        if view is not None and bg_id in view.emulators:
            return list(view.emulators[bg_id])
        return self.layout.emulators(bg_id)

    def handle_view_notice(self, src: str, message: ViewNotice) -> None:
        self.learn_view(message.view)

    def learn_view(self, view: MembershipView) -> None:
        if view.epoch in self.views or not view_valid(view, self.layout):
            return
        self.views[view.epoch] = view
        pending = sorted(c for c in self.awaiting_view if epoch_of(c, self.timing.epoch) == view.epoch)
        for cycle in pending:
            self.awaiting_view.discard(cycle)
            self.start_exchange(cycle)
            self.try_complete(cycle)
        self.advance()

    def handle_exclusion_notice(self, src: str, message: ExclusionNotice) -> None:
        self.learn_record(message.record)

    def learn_record(self, record: ExclusionRecord) -> None:
        key = (record.bg_id, record.seq)
        if key in self.records:
            return
        if not record_valid(record, self.views.get(record.epoch_limit), self.layout):
            return
        self.records[key] = record
        for cycle in sorted(self.cycles):
            state = self.cycles[cycle]
            if state.commit_status == "committed" or cycle < record.effective_cycle:
                continue
            fetch = self.fetches.get((cycle, record.bg_id))
            if fetch is not None:
                fetch.done = True
            if state.phase == "complete" and record.bg_id in state.included:
                state.phase = "exchanging"
                self.trace("recompute", cycle=cycle, excluded=record.bg_id)
            self.try_complete(cycle)

    # -- fetching -------------------------------------------------------

    def on_own_decision(self, decision: BGDecision) -> None:
        state = self.cycle_state(decision.cycle)
        if state.own is not None:
            return
        state.own = decision
        self.serve_waiters(self.bg_id, decision.cycle, decision)
        if self.commit_frontier < decision.cycle - CATCHUP_LAG:
            self.request_transfer()
        self.start_exchange(decision.cycle)
        self.try_complete(decision.cycle)
        if self.cm_mode:
            self.settle()

    def fetch_targets(self, cycle: int) -> Optional[List[str]]:
        members = self.base_members(cycle)
        if members is None:
            return None
        excluded = self.horizon.excluded(cycle) if self.bypass else set()
        return [bg for bg in members if bg != self.bg_id and bg not in excluded]

    def start_exchange(self, cycle: int) -> None:
        state = self.cycles.get(cycle)
        if state is None or state.own is None or state.commit_status == "committed":
            return
        if not self.is_representative or self.sl_stalled:
            return
        targets = self.fetch_targets(cycle)
        if targets is None:
            self.awaiting_view.add(cycle)
            return
        for target in targets:
            if target not in state.fetched:
                self.fetch_remote(target, cycle)

    def resume_exchange(self) -> None:
        for cycle in sorted(self.cycles):
            if self.cycles[cycle].commit_status != "committed":
                self.start_exchange(cycle)
                if self.cm_mode:
                    self.maybe_submit_report(cycle)

    def fetch_remote(self, target: str, cycle: int) -> FetchState:
        """Start (or return) this representative's fetch of a BG's payload"""
        key = (cycle, target)
        fetch = self.fetches.get(key)
        if fetch is None:
            fetch = FetchState(target, cycle)
            self.fetches[key] = fetch
            self._escalate(fetch)
        return fetch

    def _rotation(self, cycle: int, salt: int = 0) -> int:
        reps = self.roles.representatives if self.roles else ()
        index = reps.index(self.actor_id) if self.actor_id in reps else 0
        return int.from_bytes(digest(cycle, self.sl_id, index, salt)[:4], "big")

    def _escalate(self, fetch: FetchState) -> None:
        fetch.stage += 1
        fetch.token += 1
        fetch.null_extended = False
        emulators = self.emulators_of(fetch.target, fetch.cycle)
        by_sl: Dict[str, List[str]] = {}
        for node in emulators:
            by_sl.setdefault(sl_of(node), []).append(node)
        tried_sls = {sl_of(n) for n in fetch.tried if sl_of(n) in by_sl}
        fresh_sls = sorted((sl for sl in by_sl if sl not in tried_sls), key=natural_key)
        relay = False
        picks: List[str] = []
        if fetch.stage == 1:
            if emulators:
                picks = [emulators[self._rotation(fetch.cycle) % len(emulators)]]
        elif fetch.stage == 2:
            if fresh_sls:
                start = self._rotation(fetch.cycle, 1) % len(fresh_sls)
                chosen = (fresh_sls[start:] + fresh_sls[:start])[: self.layout.topology.f_i]
                picks = [self._pick(by_sl[sl], fetch.cycle) for sl in chosen]
        elif fetch.stage == 3:
            picks = [self._pick(by_sl[sl], fetch.cycle) for sl in fresh_sls]
        elif fetch.stage == 4:
            relay = True
            others = [bg for bg in (self.fetch_targets(fetch.cycle) or []) if bg != fetch.target]
            picks = [self._pick(self.layout.bg_nodes(bg), fetch.cycle) for bg in others]
        else:
            self._stall(fetch)
            return
        if not picks:
            self._escalate(fetch)
            return
        request = StateRequest(
            requester=self.actor_id,
            requester_sl=self.sl_id,
            requester_bg=self.bg_id,
            target_bg=fetch.target,
            cycle=fetch.cycle,
            relay=relay,
        )
        for node in picks:
            fetch.tried.add(node)
            fetch.sent_at[node] = self.now
            self.send(node, request)
        timeout = self.rto if not fetch.stalled else 4 * self.rto
        self.set_timer(self.now + timeout, "fetch_timeout", (fetch.cycle, fetch.target, fetch.token))

    def _pick(self, nodes: Sequence[str], cycle: int) -> str:
        return nodes[self._rotation(cycle, len(nodes)) % len(nodes)]

    def _stall(self, fetch: FetchState) -> None:
        if not fetch.stalled:
            fetch.stalled = True
            self.trace("rep_stalled", peer=fetch.target, cycle=fetch.cycle)
            self.sl_submit(RepStalledItem(rep=self.actor_id, target_bg=fetch.target, cycle=fetch.cycle))
        # keep polling slowly; a heal or a late decision resolves the stall
        fetch.stage = 0
        fetch.tried.clear()
        fetch.token += 1
        self.set_timer(self.now + 4 * self.rto, "fetch_timeout", (fetch.cycle, fetch.target, fetch.token))

    def timer_fetch_timeout(self, data: Tuple[int, str, int]) -> None:
        cycle, target, token = data
        fetch = self.fetches.get((cycle, target))
        if fetch is None or fetch.done or fetch.token != token:
            return
        state = self.cycles.get(cycle)
        if state is None or state.commit_status == "committed" or target in state.fetched:
            fetch.done = True
            return
        if target not in (self.fetch_targets(cycle) or []) and target not in self.commit_targets(cycle):
            fetch.done = True
            return
        self._escalate(fetch)

    def handle_state_response(self, src: str, message: StateResponse) -> None:
        fetch = self.fetches.get((message.cycle, message.target_bg))
        if message.is_null:
            if fetch is not None and not fetch.done and not fetch.null_extended:
                # the responder owes a push; wait for it a while longer
                fetch.null_extended = True
                fetch.token += 1
                self.set_timer(
                    self.now + 3 * self.timing.batch,
                    "fetch_timeout",
                    (fetch.cycle, fetch.target, fetch.token),
                )
            return
        decision = message.decision
        if not verify_decision(decision, self.layout, bg_id=message.target_bg, cycle=message.cycle):
            self.trace("bad_state", peer=src, cycle=message.cycle, target=message.target_bg)
            return
        if fetch is not None and not fetch.done and src in fetch.sent_at:
            sample = self.now - fetch.sent_at[src]
            self.rto = smoothed_rto(self.rto, sample, 2 * self.timing.net_delay)
        self.accept_payload(decision, announce=True)

    def on_payload_item(self, item: PayloadItem) -> None:
        if verify_decision(item.decision, self.layout):
            self.accept_payload(item.decision, announce=False)

    def accept_payload(self, decision: BGDecision, announce: bool) -> None:
        """Store a verified remote payload; the first copy is shared with the SL"""
        if decision.bg_id == self.bg_id:
            return
        state = self.cycle_state(decision.cycle)
        if decision.bg_id in state.fetched:
            return
        state.fetched[decision.bg_id] = decision
        fetch = self.fetches.get((decision.cycle, decision.bg_id))
        if fetch is not None:
            fetch.done = True
        self.trace("accept_payload", peer=decision.bg_id, digest=decision.root, cycle=decision.cycle)
        if announce:
            self.sl_submit(PayloadItem(decision=decision, via=self.actor_id))
        self.notify_held(decision.bg_id, decision.cycle)
        self.serve_waiters(decision.bg_id, decision.cycle, decision)
        self.try_complete(decision.cycle)
        if self.cm_mode:
            self.maybe_submit_report(decision.cycle)
            self.settle()
            self.advance()

    def on_rep_stalled(self, item: RepStalledItem) -> None:
        stalled = self.rep_stalls.setdefault((item.cycle, item.target_bg), set())
        stalled.add(item.rep)
        reps = set(self.roles.representatives) if self.roles else set()
        state = self.cycle_state(item.cycle)
        if not reps or not reps <= stalled or item.target_bg in state.stalled_on:
            return
        state.stalled_on.add(item.target_bg)
        if state.phase == "exchanging":
            state.phase = "stalled"
        if self.cm_mode:
            self.maybe_submit_report(item.cycle)
            self.settle()
        else:
            self.vote_unreachable(item.target_bg, item.cycle)

    # -- emulator side --------------------------------------------------

    def handle_state_request(self, src: str, message: StateRequest) -> None:
        if "silent_emulator" in self.behaviors or self.sl_stalled or self.own_bg_excluded():
            return
        if message.target_bg != self.bg_id and not message.relay:
            return
        if self.record_applies(message.requester_bg, message.cycle):
            self.trace("state_refused", peer=message.requester, cycle=message.cycle)
            return
        decision = self.decision_for(message.target_bg, message.cycle)
        if decision is None:
            self.push_waiters.setdefault((message.target_bg, message.cycle), set()).add(src)
            self.send(src, StateResponse(responder=self.actor_id, target_bg=message.target_bg, cycle=message.cycle))
            return
        self.send(
            src,
            StateResponse(
                responder=self.actor_id,
                target_bg=message.target_bg,
                cycle=message.cycle,
                decision=self.present(decision),
            ),
        )

    def present(self, decision: BGDecision) -> BGDecision:
        if "lie_in_response" in self.behaviors:
            return tamper_decision(decision)
        if "equivocate_state" in self.behaviors:
            return forge_decision(decision, self.layout, [self.sl_id])
        return decision

    def serve_waiters(self, bg_id: str, cycle: int, decision: BGDecision) -> None:
        waiters = self.push_waiters.pop((bg_id, cycle), set())
        if "silent_emulator" in self.behaviors:
            return
        for requester in sorted(waiters):
            self.send(
                requester,
                StateResponse(
                    responder=self.actor_id,
                    target_bg=bg_id,
                    cycle=cycle,
                    decision=self.present(decision),
                    pushed=True,
                ),
            )

    # -- completion and commit ------------------------------------------

    def try_complete(self, cycle: int) -> None:
        """Mark a cycle complete once every included BG's payload is held"""
        state = self.cycles.get(cycle)
        if state is None or state.own is None or state.commit_status == "committed":
            return
        if self.bypass and cycle > self.timing.k and cycle - self.timing.k not in self.settled:
            return
        inclusion = self.inclusion(cycle)
        if inclusion is None:
            self.awaiting_view.add(cycle)
            return
        held = set(state.fetched) | {self.bg_id}
        state.missing = set(inclusion) - held
        if state.missing:
            if self.cm_mode:
                self.maybe_submit_report(cycle)
            return
        if state.phase != "complete":
            state.phase = "complete"
            state.included = tuple(inclusion)
            self.trace("complete", cycle=cycle, included=list(inclusion))
            if self.cm_mode:
                self.maybe_submit_report(cycle)
        self.advance()

    def advance(self) -> None:
        if self.cm_mode:
            self._advance_settled()
            return
        while True:
            cycle = self.commit_frontier
            current, following = self.cycles.get(cycle), self.cycles.get(cycle + 1)
            if current is None or following is None:
                return
            if current.phase != "complete" or following.phase != "complete":
                return
            self.delayed_commit(cycle)

    def delayed_commit(self, cycle: int, included: Optional[Sequence[str]] = None, reply: Optional[CMDecision] = None) -> None:
        """Emit cycle's order; in global mode only after cycle + 1 completed"""
        state = self.cycle_state(cycle)
        bgs = list(included) if included is not None else list(state.included)
        decisions = [self.decision_for(bg, cycle) for bg in bgs]
        self._emit_commit(cycle, [d for d in decisions if d is not None], reply=reply)

    def _emit_commit(
        self,
        cycle: int,
        decisions: Sequence[BGDecision],
        reply: Optional[CMDecision] = None,
        transferred: bool = False,
    ) -> None:
        state = self.cycle_state(cycle)
        ordered = [d for _, d in order_blocks((d.root, d) for d in decisions)]
        state.commit_status = "committed"
        state.included = tuple(sorted((d.bg_id for d in ordered), key=natural_key))
        state.order_digest = digest("order", cycle, [d.root for d in ordered])
        committed = CommittedCycle(cycle=cycle, decisions=tuple(ordered), reply=reply)
        self.committed[cycle] = committed
        self.commit_frontier = cycle + 1
        self.trace(
            "commit",
            digest=state.order_digest,
            cycle=cycle,
            roots={d.bg_id: d.root for d in ordered},
            txs=[f"{tx.client_id}:{tx.nonce}" for d in ordered for tb in d.payload.blocks for tx in tb.txs],
            transferred=transferred,
        )
        self.send_proofs(committed)
        for key in [k for k in self.fetches if k[0] == cycle]:
            self.fetches[key].done = True

    def send_proofs(self, committed: CommittedCycle) -> None:
        if "ignore_clients" in self.behaviors or self.own_bg_excluded():
            return
        for decision in committed.decisions:
            payload = decision.payload
            leaves = [tb.root for tb in payload.blocks]
            if payload.meta is not None:
                leaves.append(meta_digest(payload.meta))
            if not payload.blocks:
                continue
            block_tree = merkle_build(leaves)
            for index, tb in enumerate(payload.blocks):
                if tb.origin != self.actor_id:
                    continue
                tx_tree = merkle_build([tx.digest for tx in tb.txs])
                for position, tx in enumerate(tb.txs):
                    proof = CommitProof(
                        tx_digest=tx.digest,
                        cycle=committed.cycle,
                        bg_id=payload.bg_id,
                        tb_root=tb.root,
                        merkle_branch=merkle_prove(tx_tree, position),
                        block_branch=merkle_prove(block_tree, index),
                        bg_qc=decision.qc,
                    )
                    self.send(tx.client_id, ProofDelivery(proof=proof, node=self.actor_id))

    # -- CM mode --------------------------------------------------------

    def maybe_submit_report(self, cycle: int) -> None:
        """Monitor hands its SL's view of the cycle to the BG's report consensus"""
        state = self.cycles.get(cycle)
        if state is None or state.own is None or state.report_sent or not self.is_monitor:
            return
        targets = self.fetch_targets(cycle)
        if targets is None:
            return
        if any(bg not in state.fetched and bg not in state.stalled_on for bg in targets):
            return
        state.report_sent = True
        self.send(
            self.bg_service,
            ReportSubmit(
                cycle=cycle,
                sl_id=self.sl_id,
                decisions=tuple(state.fetched[bg] for bg in sorted(state.fetched, key=natural_key)),
                stalled_on=tuple(sorted(state.stalled_on, key=natural_key)),
            ),
        )

    def handle_report_decided(self, src: str, message: ReportDecided) -> None:
        if src != self.bg_service:
            return
        self.bg_reports[message.report.cycle] = message.report
        for decision in message.decisions:
            self.on_payload_item(PayloadItem(decision=decision, via=src))

    def handle_cm_outcome(self, src: str, message: CMOutcome) -> None:
        if message.cycle in self.cm_outcomes or not outcome_valid(message, self.layout):
            return
        self.cm_outcomes[message.cycle] = message
        if message.reply is not None and self.bypass:
            self.horizon.extend_exclusion(message.reply)
        self.settle()

    def live_listed(self, cycle: int) -> Optional[List[str]]:
        return self.inclusion(cycle)

    def settle(self) -> None:
        """Settle cycles in order from certified outcomes or the metas k cycles later"""
        progressed = False
        while True:
            cycle = self.settle_frontier
            if cycle in self.settled:
                self.settle_frontier += 1
                continue
            outcome = self.cm_outcomes.get(cycle)
            if outcome is not None:
                self._record_settlement(cycle, outcome.reply, "cm")
                progressed = True
                continue
            if not self.bypass:
                break
            classification = self._classify(cycle)
            if classification is None:
                break
            if classification.result == "NeedsCMQuery":
                self.query_cm(cycle)
                break
            self._record_settlement(cycle, classification.reply, "metas")
            progressed = True
        if progressed:
            for cycle in sorted(self.cycles):
                if self.cycles[cycle].phase != "complete":
                    self.start_exchange(cycle)
                    self.try_complete(cycle)
            self.advance()

    def _classify(self, cycle: int):
        later = self.cycles.get(cycle + self.timing.k)
        live = self.live_listed(cycle)
        if later is None or later.own is None or live is None:
            return None
        excluded_later = self.horizon.excluded(cycle + self.timing.k)
        metas = {}
        waiting = False
        for bg in live:
            decision = later.own if bg == self.bg_id else later.fetched.get(bg)
            if decision is not None:
                metas[bg] = decision.payload.meta
            elif bg not in later.stalled_on and bg not in excluded_later:
                waiting = True
        try:
            result = classify(cycle, metas, live)
        except CertificateError as exc:
            self.trace("certification_conflict", cycle=cycle, detail=str(exc))
            logger.error("t=%d %s: %s", self.now, self.actor_id, exc)
            return None
        if result.result == "CM_ASSISTED":
            return result
        return None if waiting else result

    def query_cm(self, cycle: int) -> None:
        attempt = self.cm_queries.get(cycle)
        if attempt is not None:
            return
        self.cm_queries[cycle] = 0
        self._send_query(cycle)

    def _send_query(self, cycle: int) -> None:
        replicas = sorted(self.layout.all_bgs, key=natural_key)
        attempt = self.cm_queries[cycle]
        home = replicas.index(self.bg_id) if self.bg_id in replicas else 0
        target = cm_node_id(replicas[(home + attempt) % len(replicas)])
        self.send(target, CMQuery(cycle=cycle, requester=self.actor_id))
        self.set_timer(self.now + 2 * self.timing.big_delta, "cm_query_retry", cycle)

    def timer_cm_query_retry(self, cycle: int) -> None:
        if cycle in self.settled:
            return
        self.cm_queries[cycle] += 1
        self._send_query(cycle)

    def _record_settlement(self, cycle: int, reply: Optional[CMDecision], source: str) -> None:
        self.settled[cycle] = reply
        if reply is not None and self.bypass:
            self.horizon.extend_exclusion(reply)
        self.trace(
            "classify",
            cycle=cycle,
            result="CM_ASSISTED" if reply is not None else "UNASSISTED",
            committed=sorted(reply.committed, key=natural_key) if reply is not None else None,
            source=source,
        )

    def commit_targets(self, cycle: int) -> List[str]:
        if cycle not in self.settled:
            return []
        reply = self.settled[cycle]
        if reply is not None:
            return sorted(reply.committed, key=natural_key)
        return self.live_listed(cycle) or []

    def _advance_settled(self) -> None:
        while True:
            cycle = self.commit_frontier
            if cycle not in self.settled:
                return
            later = self.cycles.get(cycle + max(1, self.timing.k))
            if later is None or later.own is None:
                return
            reply = self.settled[cycle]
            targets = self.commit_targets(cycle)
            missing = [bg for bg in targets if self.decision_for(bg, cycle) is None]
            if missing:
                # assisted or denied cycles may lack inputs; fetch them from any holder
                if self.is_representative and self.has_own_decision(cycle):
                    for bg in missing:
                        self.fetch_remote(bg, cycle)
                return
            if reply is not None:
                decisions = [self.decision_for(bg, cycle) for bg in targets]
                if any(d.root != reply.committed[d.bg_id] for d in decisions):
                    self.trace("stall", reason="reply_mismatch", cycle=cycle)
                    return
            self.delayed_commit(cycle, included=targets, reply=reply)

    # -- state transfer -------------------------------------------------

    def transfer_peers(self) -> List[str]:
        peers = [n for sl in self.layout.sls[self.bg_id] if sl != self.sl_id for n in self.layout.nodes[sl]]
        latest = self.views.get(max(self.views)) if self.views else None
        for bg in latest.bgs if latest else self.layout.initial_bgs:
            if bg != self.bg_id:
                peers.extend(self.layout.bg_nodes(bg))
        return peers

    def request_transfer(self) -> None:
        if self.transfer_inflight:
            return
        peers = self.transfer_peers()
        if not peers:
            return
        peer = peers[(self._rotation(self.commit_frontier) + self.transfer_attempt) % len(peers)]
        self.transfer_attempt += 1
        self.transfer_inflight = True
        self.send(peer, TransferRequest(requester=self.actor_id, from_cycle=self.commit_frontier))
        self.set_timer(self.now + 4 * self.timing.net_delay + self.timing.batch, "transfer_timeout", self.transfer_attempt)

    def timer_transfer_timeout(self, attempt: int) -> None:
        if attempt == self.transfer_attempt:
            self.transfer_inflight = False

    def handle_transfer_request(self, src: str, message: TransferRequest) -> None:
        cycles = [self.committed[c] for c in sorted(self.committed) if c >= message.from_cycle]
        self.send(
            src,
            TransferBundle(
                sender=self.actor_id,
                views=tuple(self.views[e] for e in sorted(self.views)),
                records=tuple(self.records[k] for k in sorted(self.records)),
                cycles=tuple(cycles[:TRANSFER_LIMIT]),
            ),
        )

    def verify_bundle(self, bundle: TransferBundle) -> None:
        """
        Check every certificate in a state transfer.

        Raises:
            StateTransferRefused: on the first view, record or decision that fails
        """
        for view in bundle.views:
            if not view_valid(view, self.layout):
                raise StateTransferRefused(f"view for epoch {view.epoch} does not verify")
        views = {v.epoch: v for v in bundle.views}
        views.update(self.views)
        for record in bundle.records:
            if not record_valid(record, views.get(record.epoch_limit), self.layout):
                raise StateTransferRefused(f"exclusion of {record.bg_id} does not verify", cycle=record.effective_cycle)
        records = list(self.records.values()) + list(bundle.records)
        horizon = self.horizon.copy()
        for committed in sorted(bundle.cycles, key=lambda c: c.cycle):
            for decision in committed.decisions:
                if decision.cycle != committed.cycle or not verify_decision(decision, self.layout):
                    raise StateTransferRefused(
                        f"payload of {decision.bg_id} does not verify", cycle=committed.cycle
                    )
            reply = committed.reply
            if reply is not None:
                if not outcome_valid(CMOutcome(cycle=committed.cycle, reply=reply), self.layout):
                    raise StateTransferRefused("CM_REPLY does not verify", cycle=committed.cycle)
                if any(reply.committed.get(d.bg_id, d.root) != d.root for d in committed.decisions):
                    raise StateTransferRefused("payload differs from CM_REPLY", cycle=committed.cycle)
                expected = set(reply.committed)
            else:
                expected = self.expected_members(committed.cycle, views, records, horizon)
            held = [d.bg_id for d in committed.decisions]
            if len(held) != len(set(held)) or set(held) != expected:
                missing = sorted(expected - set(held), key=natural_key)
                extra = sorted(set(held) - expected, key=natural_key)
                raise StateTransferRefused(
                    f"payloads do not match the inclusion set (missing {missing}, extra {extra})",
                    cycle=committed.cycle,
                )
            if reply is not None and self.bypass:
                horizon.extend_exclusion(reply)

    def expected_members(
        self,
        cycle: int,
        views: Dict[int, MembershipView],
        records: Sequence[ExclusionRecord],
        horizon: HorizonTable,
    ) -> Set[str]:
        """Inclusion set of a transferred cycle, from the views and records at hand"""
        epoch = epoch_of(cycle, self.timing.epoch)
        view = views.get(epoch)
        if view is None:
            raise StateTransferRefused(f"no view for epoch {epoch}", cycle=cycle)
        excluded = {r.bg_id for r in records if r.applies(cycle, epoch)}
        if self.bypass:
            excluded |= horizon.excluded(cycle)
        return {bg for bg in view.bgs if view.admitted.get(bg, 0) <= cycle and bg not in excluded}

    def handle_transfer_bundle(self, src: str, message: TransferBundle) -> None:
        self.transfer_inflight = False
        try:
            self.verify_bundle(message)
        except StateTransferRefused as exc:
            logger.warning("t=%d %s refused transfer from %s: %s", self.now, self.actor_id, src, exc)
            self.trace("transfer_refused", peer=src, cycle=exc.cycle, reason=str(exc))
            return
        for view in message.views:
            self.learn_view(view)
        for record in message.records:
            self.learn_record(record)
        applied = 0
        for committed in sorted(message.cycles, key=lambda c: c.cycle):
            if committed.cycle != self.commit_frontier:
                continue
            state = self.cycle_state(committed.cycle)
            for decision in committed.decisions:
                if decision.bg_id == self.bg_id:
                    state.own = state.own or decision
                else:
                    state.fetched.setdefault(decision.bg_id, decision)
            if self.cm_mode:
                self.settled.setdefault(committed.cycle, committed.reply)
                self.settle_frontier = max(self.settle_frontier, committed.cycle + 1)
                if committed.reply is not None and self.bypass:
                    self.horizon.extend_exclusion(committed.reply)
            state.phase = "complete"
            self._emit_commit(committed.cycle, committed.decisions, reply=committed.reply, transferred=True)
            applied += 1
        self.trace("state_transfer", peer=src, applied=applied, frontier=self.commit_frontier)
        self.advance()
