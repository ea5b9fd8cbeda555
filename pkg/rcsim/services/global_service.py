"""
Global membership tier: certified views, BG exclusion, epochs and joins.

GlobalService stands for the BFT agreement among the BG leaders. It is
available while a global quorum of the current view's BGs are in one
partition component; on the minority side nothing can be certified.
"""
import logging
from typing import Dict, List, Optional, Set, Tuple

from rcsim.models.messages import (
    ExclusionAck,
    ExclusionNotice,
    ExclusionReport,
    GlobalViewReply,
    GlobalViewRequest,
    HeldAnswer,
    HeldQuery,
    JoinRequest,
    RemovalCertified,
    ViewNotice,
)
from rcsim.models.protocol import Epoch, ExclusionRecord, MembershipView
from rcsim.models.scenario import Policy, Timing
from rcsim.services.bg_consensus import removal_root, status_root
from rcsim.services.certs import digest, make_gqc, make_qc, qc_verify, sign_qc_share, view_cert_valid
from rcsim.services.engine import Actor
from rcsim.services.layout import (
    GLOBAL_ID,
    Layout,
    bg_service_id,
    cycle_start,
    epoch_cycles,
    epoch_of,
    natural_key,
)

logger = logging.getLogger(__name__)


def exclusion_root(bg_id: str, effective_cycle: int) -> bytes:
    return digest("exclusion", bg_id, effective_cycle)


def view_valid(view: MembershipView, layout: Layout) -> bool:
    return view_cert_valid(view, layout.global_quorum(len(view.bgs)), layout.bg_directory())


def record_valid(record: ExclusionRecord, view: Optional[MembershipView], layout: Layout) -> bool:
    """Check an exclusion record against the view it was decided under"""
    members = len(view.bgs) if view is not None else len(layout.initial_bgs)
    if record.cert.payload_root != exclusion_root(record.bg_id, record.effective_cycle):
        return False
    return qc_verify(
        record.cert,
        layout.global_quorum(members),
        layout.bg_directory(),
        bg_id=GLOBAL_ID,
        cycle=record.effective_cycle,
        kind="exclusion",
    )


class ExclusionInstance:
    def __init__(self, number: int, report: ExclusionReport):
        self.number = number
        self.suspect = report.suspect
        self.cycle = report.cycle
        self.reporters: Set[str] = {report.reporter}
        self.answers: Dict[str, int] = {}
        self.suspect_answered = False


class GlobalService(Actor):
    """BFT agreement among BG leaders on membership"""

    def __init__(self, layout: Layout, timing: Timing, policy: Policy):
        super().__init__(GLOBAL_ID)
        self.layout = layout
        self.timing = timing
        self.policy = policy
        self.views: Dict[int, MembershipView] = {}
        self.epochs: List[Epoch] = []
        self.records: List[ExclusionRecord] = []
        self.instances: Dict[int, ExclusionInstance] = {}
        self.open: Dict[str, int] = {}
        self.instance_seq = 0
        self.pending_joins: Dict[str, Tuple[str, ...]] = {}
        self.removed: Dict[str, Set[str]] = {}

    @property
    def latest(self) -> MembershipView:
        return self.views[max(self.views)]

    def location(self):
        if not self.views:
            return None
        view = self.latest
        return self.engine.majority_home(
            (self.engine.actors[bg_service_id(bg)].location() for bg in view.bgs),
            self.layout.global_quorum(len(view.bgs)),
        )

    def start(self) -> None:
        initial = self.layout.initial_bgs
        self.issue_view(0, initial, {}, initial)
        self._announce(self.views[0])
        self.set_timer(self._resync_tick(1), "resync", 1)

    def _resync_tick(self, epoch: int) -> int:
        first, _ = epoch_cycles(epoch, self.timing.epoch)
        return cycle_start(first, self.timing.batch) - self.timing.batch // 2

    def _announce(self, view: MembershipView) -> None:
        for bg in self.layout.all_bgs:
            self.send(bg_service_id(bg), ViewNotice(view=view))

    def excluded_now(self, bg_id: str) -> bool:
        epoch = self.latest.epoch
        return any(r.bg_id == bg_id and r.epoch_limit >= epoch for r in self.records)

    def query_membership(self, epoch: Optional[int] = None) -> Optional[MembershipView]:
        if not self.views:
            return None
        return self.views.get(epoch) if epoch is not None else self.latest

    # -- epochs ---------------------------------------------------------

    def issue_view(self, epoch: int, bgs, admitted: Dict[str, int], signers) -> MembershipView:
        """Certify the membership of one epoch"""
        bgs = sorted(bgs, key=natural_key)
        emulators = {
            bg: tuple(n for n in self.layout.emulators(bg) if n not in self.removed.get(bg, set()))
            for bg in bgs
        }
        quorum_sizes = {bg: self.layout.bg_quorum(bg) for bg in bgs}
        cycle_range = epoch_cycles(epoch, self.timing.epoch)
        gqc = make_gqc(epoch, bgs, cycle_range, quorum_sizes, signers)
        view = MembershipView(
            epoch=epoch,
            bgs=tuple(bgs),
            emulators=emulators,
            quorum_sizes=quorum_sizes,
            admitted=admitted,
            seq=epoch,
            gqc=gqc,
        )
        self.views[epoch] = view
        self.epochs.append(Epoch(number=epoch, first_cycle=cycle_range[0], last_cycle=cycle_range[1], gqc=gqc))
        self.trace("view", epoch=epoch, bgs=list(bgs), admitted=admitted, signers=sorted(signers))
        return view

    def timer_resync(self, epoch: int) -> None:
        if epoch in self.views:
            return
        if self.location() is None:
            logger.info("t=%d resync for epoch %d lacks a global quorum", self.now, epoch)
            self.trace("stall", reason="global_quorum", epoch=epoch)
            # the epoch rolls over at the next opportunity
            self.set_timer(self.now + self.timing.batch, "resync", epoch)
            return
        previous = self.latest
        first, _ = epoch_cycles(epoch, self.timing.epoch)
        members = [bg for bg in previous.bgs if not self.excluded_now(bg)]
        admitted: Dict[str, int] = {}
        for bg in sorted(self.pending_joins, key=natural_key):
            if self.engine.reachable(self.actor_id, bg_service_id(bg)):
                if bg not in members:
                    members.append(bg)
                admitted[bg] = first
        signers = [bg for bg in members if self.engine.reachable(self.actor_id, bg_service_id(bg))]
        if len(signers) < self.layout.global_quorum(len(members)):
            self.trace("stall", reason="global_quorum", epoch=epoch)
            self.set_timer(self.now + self.timing.batch, "resync", epoch)
            return
        for bg in admitted:
            del self.pending_joins[bg]
        view = self.issue_view(epoch, members, admitted, signers)
        logger.info("t=%d epoch %d starts at cycle %d with %s", self.now, epoch, first, list(view.bgs))
        self.trace("epoch", epoch=epoch, first_cycle=first, bgs=list(view.bgs))
        self._announce(view)
        self.set_timer(self._resync_tick(epoch + 1), "resync", epoch + 1)

    # -- exclusion ------------------------------------------------------

    def handle_exclusion_report(self, src: str, message: ExclusionReport) -> None:
        reporter = message.reporter
        if reporter not in self.layout.all_bgs or message.cert.payload_root != status_root(
            message.suspect, message.cycle
        ):
            return
        if not qc_verify(
            message.cert,
            self.layout.bg_quorum(reporter),
            self.layout.sl_directory(reporter),
            bg_id=reporter,
            cycle=message.cycle,
            kind="status",
        ):
            return
        epoch = epoch_of(message.cycle, self.timing.epoch)
        if any(r.bg_id == message.suspect and r.applies(message.cycle, epoch) for r in self.records):
            self.send(src, ExclusionAck(suspect=message.suspect, cycle=message.cycle))
            return
        number = self.open.get(message.suspect)
        if number is not None:
            self.instances[number].reporters.add(reporter)
            return
        self.instance_seq += 1
        inst = ExclusionInstance(self.instance_seq, message)
        self.instances[inst.number] = inst
        self.open[message.suspect] = inst.number
        for bg in self.latest.bgs:
            self.send(bg_service_id(bg), HeldQuery(suspect=message.suspect, instance=inst.number))
        self.set_timer(self.now + self.timing.big_delta, "exclusion_decide", inst.number)

    def handle_held_answer(self, src: str, message: HeldAnswer) -> None:
        inst = self.instances.get(message.instance)
        if inst is None or src != bg_service_id(message.bg_id):
            return
        if message.bg_id == inst.suspect:
            inst.suspect_answered = True
            return
        inst.answers[message.bg_id] = message.held

    def timer_exclusion_decide(self, number: int) -> None:
        inst = self.instances.pop(number, None)
        if inst is None:
            return
        self.open.pop(inst.suspect, None)
        if inst.suspect_answered:
            self.trace("exclusion_rejected", peer=inst.suspect, cycle=inst.cycle)
            for reporter in sorted(inst.reporters):
                self.send(bg_service_id(reporter), ExclusionAck(suspect=inst.suspect, cycle=inst.cycle))
            return
        view = self.latest
        needed = self.layout.global_quorum(len(view.bgs))
        signers = sorted(inst.answers, key=natural_key)
        if len(signers) < needed:
            # reporters retry; a minority side never gets here with enough answers
            self.trace("stall", reason="global_quorum", cycle=inst.cycle, suspect=inst.suspect)
            return
        effective = max(inst.answers.values()) + 1
        root = exclusion_root(inst.suspect, effective)
        shares = [sign_qc_share(bg, GLOBAL_ID, effective, root, "exclusion") for bg in signers]
        record = ExclusionRecord(
            bg_id=inst.suspect,
            effective_cycle=effective,
            epoch_limit=view.epoch,
            reporter=min(inst.reporters, key=natural_key),
            seq=len(self.records) + 1,
            cert=make_qc(GLOBAL_ID, effective, root, shares, needed, kind="exclusion"),
        )
        self.records.append(record)
        logger.info("t=%d %s excluded from cycle %d", self.now, inst.suspect, effective)
        self.trace(
            "exclusion", peer=inst.suspect, cycle=effective, epoch_limit=view.epoch, reporters=sorted(inst.reporters)
        )
        for bg in self.layout.all_bgs:
            self.send(bg_service_id(bg), ExclusionNotice(record=record))

    # -- joins, removals, queries ---------------------------------------

    def handle_join_request(self, src: str, message: JoinRequest) -> None:
        if src != bg_service_id(message.bg_id):
            return
        if message.bg_id in self.latest.bgs and not self.excluded_now(message.bg_id):
            self.send(src, ViewNotice(view=self.latest))
            return
        if message.bg_id not in self.pending_joins:
            self.trace("join", peer=message.bg_id)
        self.pending_joins[message.bg_id] = message.emulators

    def handle_removal_certified(self, src: str, message: RemovalCertified) -> None:
        bg = message.bg_id
        if bg not in self.layout.all_bgs or message.cert.payload_root != removal_root(message.node, False):
            return
        if not qc_verify(
            message.cert, self.layout.bg_quorum(bg), self.layout.sl_directory(bg), bg_id=bg, kind="removal"
        ):
            return
        removed = self.removed.setdefault(bg, set())
        if message.node not in removed:
            removed.add(message.node)
            self.trace("removal_applied", peer=message.node)

    def handle_global_view_request(self, src: str, message: GlobalViewRequest) -> None:
        view = self.views.get(message.epoch)
        if view is None:
            return
        self.send(
            src,
            GlobalViewReply(requester=message.requester, view=view, records=tuple(self.records)),
        )
