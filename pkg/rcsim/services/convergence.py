"""
Convergence Module: report ingestion, failure certificates, graph analysis,
certified decisions and the bypass classification of cycles.

A BG's report lists the inputs it received in a cycle. The CM turns the
reports into a communication graph whose edges run from the BG that issued
an input to each BG that holds it, then selects the inputs to commit:

- FULL: every non-failed BG whose input reached all other non-failed BGs
- REPLICATION(R): every non-failed BG whose input reached at least R-1 others

Decisions go through a replicated state machine whose first valid
transition per cycle is certified; later conflicting ones are rejected.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx

from rcsim.errors import CertificateError
from rcsim.models.certs import Decision, FailureCertificate, ValidityCertificate
from rcsim.models.convergence import (
    BGMeta,
    BGReport,
    Classification,
    CMCommand,
    CMDecision,
    CMDeny,
)
from rcsim.models.messages import (
    CMCertified,
    CMOutcome,
    CMQuery,
    CMRejectedNotice,
    CMSubmit,
    ReportToCM,
    Suspicion,
    ViewNotice,
)
from rcsim.models.protocol import MembershipView
from rcsim.models.scenario import AnalysisPolicy, Policy, Script, Timing
from rcsim.services.certs import (
    DecisionLog,
    certify_decision,
    crypto,
    decision_digest,
    digest,
    failure_cert_verify,
    make_qc,
    qc_message,
    qc_verify,
    sha256,
    suspicion_message,
    validity_verify,
    view_cert_valid,
)
from rcsim.services.engine import UNIFIED, Actor
from rcsim.services.layout import (
    CM_RSM_ID,
    Layout,
    bg_service_id,
    cm_node_id,
    cycle_start,
    epoch_of,
    natural_key,
)

logger = logging.getLogger(__name__)


def report_digest(report: BGReport) -> bytes:
    return digest(
        "report", report.cycle, report.reporter, report.own_hash, dict(report.received), report.complete
    )


def meta_digest(meta: BGMeta) -> bytes:
    if meta.reply is not None:
        attachment = reply_digest(meta.reply)
    elif meta.deny is not None:
        attachment = digest("deny", meta.deny.cycle)
    else:
        attachment = meta.report_cert.payload_root if meta.report_cert else b""
    return digest("meta", meta.cycle, meta.bg_id, meta.flavor, attachment)


def reply_digest(reply: CMDecision) -> bytes:
    return digest(
        "reply",
        reply.cycle,
        dict(reply.committed),
        sorted(reply.fn),
        reply.horizon,
        {bg: list(h) for bg, h in reply.holders.items()},
    )


def command_digest(command: CMCommand) -> bytes:
    if command.kind == "REPLY" and command.reply is not None:
        return reply_digest(command.reply)
    return digest("deny", command.cycle)


# ---------------------------------------------------------------------------
# Communication graph and analysis
# ---------------------------------------------------------------------------

class CommGraph:
    """Directed graph of who received whose input in one cycle"""

    def __init__(self, cycle: int, vertices: Iterable[str]):
        self.cycle = cycle
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(sorted(vertices, key=natural_key))
        self.failed: Dict[str, Optional[FailureCertificate]] = {}
        self.hashes: Dict[str, bytes] = {}
        self.claims: Dict[str, Set[bytes]] = {}

    @classmethod
    def from_edges(
        cls,
        cycle: int,
        vertices: Iterable[str],
        edges: Iterable[Tuple[str, str]],
        failed: Iterable[str] = (),
    ) -> "CommGraph":
        graph = cls(cycle, vertices)
        for v in graph.vertices:
            graph.hashes[v] = sha256(f"{v}:{cycle}".encode())
        graph.graph.add_edges_from(edges)
        for v in failed:
            graph.failed[v] = None
        return graph

    @property
    def vertices(self) -> List[str]:
        return list(self.graph.nodes)

    def add_report(self, report: BGReport) -> None:
        reporter = report.reporter
        if reporter not in self.graph:
            return
        self.hashes[reporter] = report.own_hash
        self.claims.setdefault(reporter, set()).add(report.own_hash)
        for issuer, value in sorted(report.received.items()):
            if issuer == reporter or issuer not in self.graph:
                continue
            self.claims.setdefault(issuer, set()).add(value)
            self.graph.add_edge(issuer, reporter)

    def mark_failed(self, bg_id: str, cert: Optional[FailureCertificate]) -> None:
        if bg_id in self.graph:
            self.failed[bg_id] = cert

    def flag_conflicts(self) -> List[str]:
        """Issuers seen with two different hashes are treated as failed"""
        flagged = [v for v, hashes in self.claims.items() if len(hashes) > 1]
        for v in flagged:
            self.failed.setdefault(v, None)
        return sorted(flagged, key=natural_key)

    def adjacency(self) -> Dict[str, List[str]]:
        return {
            v: sorted(self.graph.successors(v), key=natural_key) for v in self.vertices
        }

    def render(self) -> str:
        """Text adjacency list, one edge per line, failed vertices marked"""
        lines = []
        for v in self.vertices:
            mark = " (failed)" if v in self.failed else ""
            lines.append(f"{v}{mark}")
            for w in sorted(self.graph.successors(v), key=natural_key):
                lines.append(f"  {v} -> {w}")
        return "\n".join(lines)


def ingest_reports(
    cycle: int,
    reports: Iterable[BGReport],
    failure_certs: Iterable[FailureCertificate],
    members: Sequence[str],
) -> CommGraph:
    """Build the communication graph of a cycle from reports and failure certificates"""
    graph = CommGraph(cycle, members)
    for report in sorted(reports, key=lambda r: natural_key(r.reporter)):
        if report.cycle == cycle:
            graph.add_report(report)
    for cert in failure_certs:
        if cert.cycle == cycle:
            graph.mark_failed(cert.suspect_bg_id, cert)
    graph.flag_conflicts()
    return graph


def _threshold(policy: AnalysisPolicy, live: int) -> int:
    if policy.kind == "full":
        return live - 1
    return policy.r - 1


def analyze(graph: CommGraph, policy: AnalysisPolicy) -> Tuple[Dict[str, bytes], Set[str]]:
    """
    Select the inputs to commit.

    Failed vertices and their edges are removed first; a live vertex is
    selected when its out-degree within the live subgraph meets the policy
    threshold. Unselected live vertices join FN for this cycle only.

    Returns:
        (committed bg_id -> hash, FN set)
    """
    live = [v for v in graph.vertices if v not in graph.failed]
    sub = graph.graph.subgraph(live)
    need = _threshold(policy, len(live))
    selected = [v for v in live if sub.out_degree(v) >= need]
    committed = {v: graph.hashes.get(v, b"") for v in selected}
    fn = set(graph.vertices) - set(selected)
    return committed, fn


def brute_force_analyze(graph: CommGraph, policy: AnalysisPolicy) -> Tuple[Dict[str, bytes], Set[str]]:
    """
    Reference selection by enumeration over the raw edge list.

    Every subset of vertices is tried; a subset qualifies when it holds no
    failed vertex and each member's input is held by enough live vertices
    (all of them under FULL). The largest qualifying subset wins.
    """
    vertices = graph.vertices
    failed = set(graph.failed)
    live = {v for v in vertices if v not in failed}
    holders: Dict[str, Set[str]] = {v: set() for v in vertices}
    for issuer, holder in graph.graph.edges():
        holders[issuer].add(holder)

    def reaches(v: str) -> bool:
        held = (holders[v] & live) - {v}
        if policy.kind == "full":
            return held == live - {v}
        return len(held) >= policy.r - 1

    best: Tuple[str, ...] = ()
    for mask in range(1 << len(vertices)):
        subset = tuple(v for i, v in enumerate(vertices) if mask >> i & 1)
        if len(subset) <= len(best) or failed.intersection(subset):
            continue
        if all(reaches(v) for v in subset):
            best = subset
    committed = {v: graph.hashes.get(v, b"") for v in best}
    return committed, set(vertices) - set(best)


def holders_map(graph: CommGraph) -> Dict[str, Tuple[str, ...]]:
    return {
        v: tuple(sorted([v, *graph.graph.successors(v)], key=natural_key))
        for v in graph.vertices
        if v not in graph.failed
    }


# ---------------------------------------------------------------------------
# Classification and exclusion horizons
# ---------------------------------------------------------------------------

def classify(cycle: int, metas: Dict[str, Optional[BGMeta]], live_listed: Sequence[str]) -> Classification:
    """
    Decide whether a cycle was CM-assisted from the metas seen in cycle + k.

    Raises:
        CertificateError: if one cycle carries both a CM_REPLY and a CM_DENY
    """
    present = {bg: metas[bg] for bg in live_listed if metas.get(bg) is not None}
    assisted = [m for _, m in sorted(present.items(), key=lambda kv: natural_key(kv[0])) if m.flavor == "ASSISTED"]
    denied = [m for m in present.values() if m.flavor == "DENIED"]
    if assisted and denied:
        raise CertificateError(f"Cycle {cycle} carries both CM_REPLY and CM_DENY")
    if assisted:
        return Classification(cycle=cycle, result="CM_ASSISTED", reply=assisted[0].reply)
    if len(present) == len(live_listed):
        return Classification(cycle=cycle, result="UNASSISTED")
    return Classification(cycle=cycle, result="NeedsCMQuery")


def outcome_valid(message: CMOutcome, layout: Layout) -> bool:
    """True when a CM outcome carries a validity certificate from f+1 CM replicas"""
    if message.reply is not None:
        kind, body, validity = "REPLY", reply_digest(message.reply), message.reply.validity
    elif message.deny is not None:
        kind, body, validity = "DENY", digest("deny", message.cycle), message.deny.validity
    else:
        return False
    if validity is None:
        return False
    decision = Decision(scope="cm", cycle=message.cycle, kind=kind, body_digest=body)
    return validity_verify(
        validity,
        decision,
        layout.cm_quorum(len(layout.all_bgs)),
        layout.topology.cm_f + 1,
        layout.cm_directory(),
    )


class HorizonTable:
    """Exclusion windows announced by CM_REPLY decisions"""

    def __init__(self, k: int):
        self.k = k
        self.windows: Dict[str, List[Tuple[int, int]]] = {}
        self.applied: Set[int] = set()

    def extend_exclusion(self, decision: CMDecision) -> None:
        """FN members are skipped for cycles [C+k, C+k+h)"""
        if decision.cycle in self.applied:
            return
        self.applied.add(decision.cycle)
        if decision.horizon <= 0:
            return
        first = decision.cycle + self.k
        for bg_id in decision.fn:
            self.windows.setdefault(bg_id, []).append((first, first + decision.horizon))

    def copy(self) -> "HorizonTable":
        table = HorizonTable(self.k)
        table.windows = {bg: list(spans) for bg, spans in self.windows.items()}
        table.applied = set(self.applied)
        return table

    def excluded(self, cycle: int) -> Set[str]:
        return {
            bg for bg, spans in self.windows.items() if any(lo <= cycle < hi for lo, hi in spans)
        }


# ---------------------------------------------------------------------------
# CM replicas
# ---------------------------------------------------------------------------

class CMNode(Actor):
    """One CM replica, co-hosted with a BG"""

    def __init__(
        self,
        host_bg: str,
        layout: Layout,
        timing: Timing,
        policy: Policy,
        replicas: Sequence[str],
        members_for: Optional[Callable[[int], List[str]]] = None,
        scripted: bool = False,
        malformed: bool = False,
    ):
        super().__init__(cm_node_id(host_bg))
        self.host_bg = host_bg
        self.layout = layout
        self.timing = timing
        self.policy = policy
        self.replicas = list(replicas)
        self.scripted = scripted
        self.malformed = malformed
        self._members_for = members_for
        self.views: Dict[int, MembershipView] = {}
        self.reports: Dict[int, Dict[str, BGReport]] = {}
        self.suspicions: Dict[Tuple[int, str], Dict[str, object]] = {}
        self.fcerts: Dict[int, Dict[str, FailureCertificate]] = {}
        self.outcomes: Dict[int, CMOutcome] = {}
        self.horizon = HorizonTable(timing.k if policy.cm_bypass else 0)
        self.frontier = 1
        self.proposed: Dict[int, CMCommand] = {}
        self.waiters: Dict[int, Set[str]] = {}
        self.armed: Set[int] = set()
        self.suspected: Set[Tuple[int, str]] = set()

    def location(self):
        host = self.engine.actors.get(bg_service_id(self.host_bg))
        if host is None:
            return None if self.crashed else UNIFIED
        return None if self.crashed else host.location()

    @property
    def f(self) -> int:
        return self.layout.topology.cm_f

    def members(self, cycle: int) -> List[str]:
        """BGs whose input is expected in a cycle"""
        if self._members_for is not None:
            base = self._members_for(cycle)
        else:
            view = self.views.get(epoch_of(cycle, self.timing.epoch))
            if view is None:
                return []
            base = [bg for bg in view.bgs if view.admitted.get(bg, 0) <= cycle]
        excluded = self.horizon.excluded(cycle) if self.policy.cm_bypass else set()
        return sorted((bg for bg in base if bg not in excluded), key=natural_key)

    def leader(self) -> str:
        return sorted(self.replicas, key=natural_key)[0]

    # -- inputs -------------------------------------------------------------

    def handle_view_notice(self, src: str, message: ViewNotice) -> None:
        self.views.setdefault(message.view.epoch, message.view)

    def handle_report_to_cm(self, src: str, message: ReportToCM) -> None:
        report = message.report
        if not self.scripted and not self._report_valid(report):
            self.trace("cm_report_rejected", peer=report.reporter, cycle=report.cycle)
            return
        per_cycle = self.reports.setdefault(report.cycle, {})
        known = per_cycle.get(report.reporter)
        if known is not None:
            if known.own_hash != report.own_hash or known.received != report.received:
                self.trace("cm_conflicting_report", peer=report.reporter, cycle=report.cycle)
            self._answer_requester(report)
            return
        per_cycle[report.reporter] = report
        self.trace(
            "cm_report",
            peer=report.reporter,
            digest=report.own_hash,
            cycle=report.cycle,
            complete=report.complete,
            received=sorted(report.received, key=natural_key),
        )
        if report.cycle not in self.armed:
            self.armed.add(report.cycle)
            self.set_timer(self.now + self.timing.big_delta, "suspect", report.cycle)
        self._answer_requester(report)
        self._progress()
        if report.cycle < self.frontier and not self._covers(report, report.cycle):
            self._late_request(report.cycle)

    def _report_valid(self, report: BGReport) -> bool:
        cert = report.cert
        if cert is None or cert.payload_root != report_digest(report):
            return False
        return qc_verify(
            cert,
            self.layout.bg_quorum(report.reporter),
            self.layout.sl_directory(report.reporter),
            bg_id=report.reporter,
            cycle=report.cycle,
            kind="report",
        )

    def _answer_requester(self, report: BGReport) -> None:
        outcome = self.outcomes.get(report.cycle)
        if outcome is not None and not report.complete:
            self.send(bg_service_id(report.reporter), outcome)

    def timer_suspect(self, cycle: int) -> None:
        reported = self.reports.get(cycle, {})
        for bg_id in self.members(cycle):
            if bg_id in reported or (cycle, bg_id) in self.suspected:
                continue
            self.suspected.add((cycle, bg_id))
            signature = crypto.sign(self.actor_id, suspicion_message(bg_id, cycle))
            vote = Suspicion(suspect=bg_id, cycle=cycle, signature=signature)
            for replica in self.replicas:
                if replica == self.actor_id:
                    self.handle_suspicion(self.actor_id, vote)
                else:
                    self.send(replica, vote)

    def handle_suspicion(self, src: str, message: Suspicion) -> None:
        signer = message.signature.signer
        if signer not in self.replicas:
            return
        if not crypto.verify(
            message.signature,
            suspicion_message(message.suspect, message.cycle),
            crypto.provider.public_key(signer),
        ):
            return
        votes = self.suspicions.setdefault((message.cycle, message.suspect), {})
        votes[signer] = message.signature
        certs = self.fcerts.setdefault(message.cycle, {})
        if message.suspect in certs or len(votes) < self.f + 1:
            return
        cert = FailureCertificate(
            suspect_bg_id=message.suspect,
            cycle=message.cycle,
            signatures=tuple(sorted(votes.values(), key=lambda s: s.signer)),
        )
        certs[message.suspect] = cert
        self.trace("cm_failcert", peer=message.suspect, cycle=message.cycle)
        self._progress()
        if message.cycle < self.frontier and message.cycle not in self.outcomes:
            if any(not self._covers(r, message.cycle) for r in self.reports.get(message.cycle, {}).values()):
                self._late_request(message.cycle)

    # -- per-cycle processing ---------------------------------------------

    def ingest_reports(self, cycle: int) -> CommGraph:
        return ingest_reports(
            cycle,
            self.reports.get(cycle, {}).values(),
            self.fcerts.get(cycle, {}).values(),
            self.members(cycle),
        )

    def _covers(self, report: BGReport, cycle: int) -> bool:
        return set(self.members(cycle)) <= set(report.received) | {report.reporter}

    def _graph_final(self, cycle: int) -> bool:
        reported = self.reports.get(cycle, {})
        certs = self.fcerts.get(cycle, {})
        return all(bg in reported or bg in certs for bg in self.members(cycle))

    def _needs_assist(self, cycle: int) -> bool:
        reports = self.reports.get(cycle, {})
        if not self.policy.cm_bypass:
            return bool(reports)
        return any(not self._covers(r, cycle) for r in reports.values())

    def _progress(self) -> None:
        while True:
            cycle = self.frontier
            if cycle in self.outcomes:
                self.frontier += 1
                continue
            reports = self.reports.get(cycle)
            if not reports:
                return
            if not self._needs_assist(cycle):
                members = self.members(cycle)
                quorum = self.layout.global_quorum(len(members)) if members else 1
                if self._graph_final(cycle) or len(reports) >= quorum:
                    self.frontier += 1
                    continue
                return
            if not self._graph_final(cycle):
                return
            self.decide(cycle)
            return

    def _late_request(self, cycle: int) -> None:
        if cycle in self.outcomes or cycle in self.proposed:
            return
        if self._graph_final(cycle):
            self.decide(cycle)

    def _reply_at_or_after(self, cycle: int) -> bool:
        return any(o.reply is not None and c >= cycle for c, o in self.outcomes.items())

    def decide(self, cycle: int) -> CMCommand:
        """Propose REPLY (or DENY when a later cycle was already assisted) to the RSM"""
        if cycle in self.proposed:
            return self.proposed[cycle]
        if self._reply_at_or_after(cycle + self.timing.k):
            command = CMCommand(kind="DENY", cycle=cycle, proposer=self.actor_id)
        else:
            command = self._reply_command(cycle)
        self.proposed[cycle] = command
        self._schedule_submit(cycle)
        return command

    def _reply_command(self, cycle: int) -> CMCommand:
        graph = self.ingest_reports(cycle)
        committed, fn = analyze(graph, self.policy.analysis_policy)
        if self.malformed and committed:
            committed = dict(list(committed.items())[1:])
        fn_certs = {bg: graph.failed.get(bg) for bg in sorted(fn, key=natural_key)}
        reply = CMDecision(
            cycle=cycle,
            committed=committed,
            fn=fn_certs,
            horizon=self.timing.horizon if self.policy.cm_bypass else 0,
            holders=holders_map(graph) if self.policy.analysis_policy.kind == "replication" else {},
        )
        self.trace(
            "cm_graph",
            cycle=cycle,
            adjacency=graph.adjacency(),
            failed=sorted(graph.failed, key=natural_key),
            committed=sorted(committed, key=natural_key),
            fn=sorted(fn, key=natural_key),
        )
        members = self.members(cycle)
        reports = self.reports.get(cycle, {})
        certs = self.fcerts.get(cycle, {})
        return CMCommand(
            kind="REPLY",
            cycle=cycle,
            proposer=self.actor_id,
            reply=reply,
            reports=tuple(reports[bg] for bg in members if bg in reports),
            failure_certs=tuple(certs[bg] for bg in members if bg in certs),
            live_listed=tuple(members),
        )

    def _schedule_submit(self, cycle: int) -> None:
        big = self.timing.big_delta
        if self.policy.cm_submission == "leader":
            delay = 0 if self.leader() == self.actor_id else 2 * big + self.engine.rng.randint(0, big)
        else:
            delay = self.engine.rng.randint(0, big // 4)
        self.set_timer(self.now + delay, "submit", cycle)

    def timer_submit(self, cycle: int) -> None:
        if cycle in self.outcomes:
            return
        command = self.proposed.get(cycle)
        if command is None:
            return
        view = self.views.get(epoch_of(cycle, self.timing.epoch))
        self.send(CM_RSM_ID, CMSubmit(command=command, view=view))
        self.trace("cm_command", cycle=cycle, command=command.kind)
        self.set_timer(self.now + 4 * self.timing.big_delta, "submit", cycle)

    # -- outcomes -----------------------------------------------------------

    def handle_cm_certified(self, src: str, message: CMCertified) -> None:
        if message.cycle in self.outcomes:
            return
        outcome = CMOutcome(cycle=message.cycle, reply=message.reply, deny=message.deny)
        self.outcomes[message.cycle] = outcome
        if message.reply is not None:
            self.horizon.extend_exclusion(message.reply)
        host = bg_service_id(self.host_bg)
        if host in self.engine.actors:
            self.send(host, outcome)
        for requester in sorted(self.waiters.pop(message.cycle, set())):
            self.send(requester, outcome)
        self._progress()

    def handle_cm_rejected_notice(self, src: str, message: CMRejectedNotice) -> None:
        if message.cycle in self.outcomes or message.kind != "REPLY":
            return
        # a REPLY outside the assist window becomes a DENY
        command = CMCommand(kind="DENY", cycle=message.cycle, proposer=self.actor_id)
        self.proposed[message.cycle] = command
        self.set_timer(self.now, "submit", message.cycle)

    def handle_cm_query(self, src: str, message: CMQuery) -> None:
        outcome = self.outcomes.get(message.cycle)
        if outcome is not None:
            self.send(message.requester, outcome)
            return
        self.waiters.setdefault(message.cycle, set()).add(message.requester)
        self.assist_or_deny(message.cycle)

    def assist_or_deny(self, cycle: int) -> None:
        """Settle a cycle nobody asked the CM about yet: it stays unassisted"""
        if cycle in self.proposed:
            return
        self.proposed[cycle] = CMCommand(kind="DENY", cycle=cycle, proposer=self.actor_id)
        self.set_timer(self.now, "submit", cycle)

    def assist(self, report: BGReport) -> Optional[CMOutcome]:
        """
        Answer an assistance request.

        Returns the certified outcome when one exists; otherwise starts the
        decision (REPLY, or DENY once a cycle >= C+k was assisted) and
        returns None until the RSM certifies it.
        """
        outcome = self.outcomes.get(report.cycle)
        if outcome is not None:
            return outcome
        if report.complete:
            return None
        if self._graph_final(report.cycle):
            self.decide(report.cycle)
        return None


class CMRsm(Actor):
    """The CM's replicated state machine with the decision-certification layer"""

    def __init__(
        self,
        layout: Layout,
        timing: Timing,
        policy: Policy,
        replicas: Sequence[str],
        members_for: Optional[Callable[[int], List[str]]] = None,
        scripted: bool = False,
    ):
        super().__init__(CM_RSM_ID)
        self.layout = layout
        self.timing = timing
        self.policy = policy
        self.replicas = list(replicas)
        self._members_for = members_for
        self.scripted = scripted
        self.log = DecisionLog()
        self.certified: Dict[int, CMCertified] = {}
        self.horizon = HorizonTable(timing.k if policy.cm_bypass else 0)

    @property
    def quorum(self) -> int:
        return self.layout.cm_quorum(len(self.replicas))

    def location(self):
        return self.engine.majority_home(
            (self.engine.actors[r].location() for r in self.replicas), self.quorum
        )

    def handle_cm_submit(self, src: str, message: CMSubmit) -> None:
        command = message.command
        if src not in self.replicas:
            return
        decision = Decision(
            scope="cm", cycle=command.cycle, kind=command.kind, body_digest=command_digest(command)
        )
        signers = [r for r in self.replicas if self.engine.reachable(self.actor_id, r)]
        root = decision_digest(decision)
        qc = make_qc(
            "cm",
            command.cycle,
            root,
            [crypto.sign(s, qc_message("cm", command.cycle, root, "decision")) for s in signers],
            self.quorum,
            kind="decision",
        )
        result = certify_decision(
            decision,
            qc,
            self.log,
            validators=signers,
            validity_quorum=self.layout.topology.cm_f + 1,
            quorum_size=self.quorum,
            directory=self.layout.cm_directory(),
            rule=lambda d, log: self.command_valid(command, log, message.view),
        )
        if isinstance(result, ValidityCertificate):
            self.log.record(decision, True)
            self._publish(command, result)
            return
        self.log.record(decision, False)
        self.trace("cm_rejected", peer=src, cycle=command.cycle, command=command.kind, reason=result.reason)
        self.send(src, CMRejectedNotice(kind=command.kind, cycle=command.cycle, reason=result.reason))
        existing = self.certified.get(command.cycle)
        if existing is not None:
            self.send(src, existing)

    def members(self, cycle: int, view: Optional[MembershipView]) -> Optional[List[str]]:
        """Members of a cycle per the certified view, or None when the view does not check out"""
        if self._members_for is not None:
            return self._members_for(cycle)
        if view is None or view.epoch != epoch_of(cycle, self.timing.epoch):
            return None
        if not view_cert_valid(view, self.layout.global_quorum(len(view.bgs)), self.layout.bg_directory()):
            return None
        return [bg for bg in view.bgs if view.admitted.get(bg, 0) <= cycle]

    def evidence_complete(self, command: CMCommand, view: Optional[MembershipView]) -> bool:
        """Every expected BG is accounted for by one report or a failure certificate"""
        base = self.members(command.cycle, view)
        if base is None:
            return False
        listed = set(command.live_listed)
        excluded = self.horizon.excluded(command.cycle) if self.policy.cm_bypass else set()
        # the listing may keep a BG the horizon already skips, never drop one it expects
        if not set(base) - excluded <= listed <= set(base):
            return False
        reporters = [r.reporter for r in command.reports]
        if len(set(reporters)) != len(reporters) or not set(reporters) <= listed:
            return False
        if any(r.cycle != command.cycle for r in command.reports):
            return False
        suspects = {c.suspect_bg_id for c in command.failure_certs if c.cycle == command.cycle}
        return listed <= set(reporters) | suspects

    def command_valid(self, command: CMCommand, log: DecisionLog, view: Optional[MembershipView] = None) -> bool:
        """Deterministic validity rule every replica applies"""
        if command.kind == "DENY":
            return True
        if command.reply is None or command.reply.cycle != command.cycle:
            return False
        for entry in log.valid_entries():
            if entry.decision.kind == "REPLY" and entry.decision.cycle >= command.cycle + self.timing.k:
                return False
        if not self.evidence_complete(command, view):
            return False
        for report in command.reports:
            if not self.scripted and not self._report_valid(report):
                return False
        for cert in command.failure_certs:
            if not failure_cert_verify(cert, self.layout.topology.cm_f, self.layout.cm_directory()):
                return False
        graph = ingest_reports(
            command.cycle, command.reports, command.failure_certs, list(command.live_listed)
        )
        committed, fn = analyze(graph, self.policy.analysis_policy)
        return committed == dict(command.reply.committed) and fn == set(command.reply.fn)

    def _report_valid(self, report: BGReport) -> bool:
        cert = report.cert
        return cert is not None and cert.payload_root == report_digest(report) and qc_verify(
            cert,
            self.layout.bg_quorum(report.reporter),
            self.layout.sl_directory(report.reporter),
            bg_id=report.reporter,
            cycle=report.cycle,
            kind="report",
        )

    def _publish(self, command: CMCommand, validity: ValidityCertificate) -> None:
        if command.kind == "REPLY":
            reply = command.reply.model_copy(update={"validity": validity})
            self.horizon.extend_exclusion(reply)
            message = CMCertified(kind="REPLY", cycle=command.cycle, index=validity.decision_index, reply=reply)
            self.trace(
                "cm_certified",
                cycle=command.cycle,
                command="REPLY",
                index=validity.decision_index,
                committed={bg: h for bg, h in reply.committed.items()},
                fn=sorted(reply.fn, key=natural_key),
                horizon=reply.horizon,
                proposer=command.proposer,
            )
        else:
            deny = CMDeny(cycle=command.cycle, validity=validity)
            message = CMCertified(kind="DENY", cycle=command.cycle, index=validity.decision_index, deny=deny)
            self.trace(
                "cm_certified",
                cycle=command.cycle,
                command="DENY",
                index=validity.decision_index,
                proposer=command.proposer,
            )
        logger.info("t=%d CM certified %s for cycle %d", self.now, command.kind, command.cycle)
        self.certified[command.cycle] = message
        for replica in self.replicas:
            self.send(replica, message)


class ScriptedReporter(Actor):
    """Feeds scripted BG_REPORTs to the CM replicas, one cycle per batch period"""

    def __init__(self, script: Script, timing: Timing, replicas: Sequence[str]):
        super().__init__("script")
        self.script = script
        self.timing = timing
        self.replicas = list(replicas)
        self.members = {c.cycle: list(c.members) for c in script.cycles}

    def location(self):
        return UNIFIED

    def members_for(self, cycle: int) -> List[str]:
        return sorted(self.members.get(cycle, []), key=natural_key)

    def start(self) -> None:
        for entry in self.script.cycles:
            self.set_timer(cycle_start(entry.cycle, self.timing.batch) + self.timing.batch, "emit", entry.cycle)

    def timer_emit(self, cycle: int) -> None:
        entry = next(c for c in self.script.cycles if c.cycle == cycle)
        members = set(entry.members)
        for scripted in entry.reports:
            received = {bg: label_hash(label) for bg, label in scripted.received.items()}
            report = BGReport(
                cycle=cycle,
                reporter=scripted.reporter,
                own_hash=label_hash(scripted.own),
                received=received,
                complete=members <= set(received) | {scripted.reporter},
            )
            for replica in self.replicas:
                self.send(replica, ReportToCM(report=report))


def label_hash(label: str) -> bytes:
    """Digest standing in for a scripted hash label such as 'hash1'"""
    return sha256(label.encode())
