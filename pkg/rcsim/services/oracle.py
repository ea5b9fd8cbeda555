"""
Independent re-derivation of a run's expected outputs from its trace.

The oracle never looks at actor state. It rebuilds, per cycle, the set of
BGs whose input must be committed (from the certified views, exclusions and
CM decisions recorded in the trace) and the order those inputs produce,
then checks every node's commit events against it.
"""
import logging
import math
from typing import Dict, Iterable, List, Optional, Set, Tuple

from rcsim.models.scenario import Scenario
from rcsim.models.trace import TraceEvent, Verdict
from rcsim.services.certs import digest
from rcsim.services.convergence import CommGraph, analyze, brute_force_analyze
from rcsim.services.engine import ancestors
from rcsim.services.layout import Layout, bg_of, cycle_start, epoch_of, natural_key, sl_of

logger = logging.getLogger(__name__)

CRASH_CLASSES = {"F1", "F2", "F3", "F4", "F9", "F12", "F14", "F16"}


class TraceIndex:
    """Trace events grouped the ways the checks need them"""

    def __init__(self, events: Iterable[TraceEvent], scenario: Scenario):
        self.events = list(events)
        self.scenario = scenario
        self.layout = Layout(scenario.topology)
        self.by_kind: Dict[str, List[TraceEvent]] = {}
        for event in self.events:
            self.by_kind.setdefault(event.kind, []).append(event)
        self.byzantine: Set[str] = set()
        for event in self.of("byzantine"):
            self.byzantine.update(event.data.get("actors", []))
        self.crashed: Set[str] = set()
        self.faulted_bgs: Set[str] = set()
        for event in self.of("fault"):
            if event.data.get("fault_class") in CRASH_CLASSES:
                self.crashed.update(event.data.get("affected", []))
            if event.data.get("fault_class") in ("F12", "F13", "F16"):
                self.faulted_bgs.add(bg_of(event.data.get("target") or ""))
        self.commits: Dict[str, List[TraceEvent]] = {}
        for event in self.of("commit"):
            self.commits.setdefault(event.actor, []).append(event)
        self.bg_roots: Dict[Tuple[str, int], str] = {}
        for event in self.of("bg_decide"):
            self.bg_roots.setdefault((event.actor[3:], event.data["cycle"]), event.digest)
        self.views: Dict[int, TraceEvent] = {}
        for event in self.of("view"):
            self.views.setdefault(event.data["epoch"], event)
        self.replies: Dict[int, TraceEvent] = {}
        self.denies: Dict[int, TraceEvent] = {}
        for event in self.of("cm_certified"):
            target = self.replies if event.data["command"] == "REPLY" else self.denies
            target.setdefault(event.data["cycle"], event)

    def of(self, kind: str) -> List[TraceEvent]:
        return self.by_kind.get(kind, [])

    @property
    def honest_nodes(self) -> List[str]:
        return [n for n in self.layout.all_nodes() if n not in self.byzantine]

    def record_applies(self, bg_id: str, cycle: int) -> bool:
        epoch = epoch_of(cycle, self.scenario.timing.epoch)
        return any(
            e.peer == bg_id and e.data["cycle"] <= cycle and epoch <= e.data["epoch_limit"]
            for e in self.of("exclusion")
        )

    def horizon_excluded(self, cycle: int) -> Set[str]:
        if self.scenario.policy.mode != "cm" or not self.scenario.policy.cm_bypass:
            return set()
        k = self.scenario.timing.k
        excluded: Set[str] = set()
        for c, event in self.replies.items():
            horizon = event.data.get("horizon", 0)
            if horizon and c + k <= cycle < c + k + horizon:
                excluded.update(event.data.get("fn", []))
        return excluded

    def expected_inclusion(self, cycle: int) -> Optional[Dict[str, Optional[str]]]:
        """Expected bg -> payload root for a cycle, None if the trace lacks its view"""
        if self.scenario.policy.mode == "cm" and cycle in self.replies:
            return dict(self.replies[cycle].data["committed"])
        view = self.views.get(epoch_of(cycle, self.scenario.timing.epoch))
        if view is None:
            return None
        admitted = view.data.get("admitted", {})
        excluded = self.horizon_excluded(cycle)
        members = [
            bg
            for bg in view.data["bgs"]
            if admitted.get(bg, 0) <= cycle and not self.record_applies(bg, cycle) and bg not in excluded
        ]
        return {bg: self.bg_roots.get((bg, cycle)) for bg in members}


def order_digest(cycle: int, roots: Iterable[str]) -> str:
    return digest("order", cycle, sorted(bytes.fromhex(r) for r in roots)).hex()


def _verdict(name: str, failures: List[Tuple[int, str]]) -> Verdict:
    if not failures:
        return Verdict(invariant=name, passed=True)
    tick, witness = min(failures, key=lambda f: f[0])
    more = f" (+{len(failures) - 1} more)" if len(failures) > 1 else ""
    return Verdict(invariant=name, passed=False, witness=witness + more, tick=tick)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_safety(index: TraceIndex) -> Verdict:
    """Every honest node that commits cycle c commits the same order"""
    first: Dict[int, Tuple[str, str]] = {}
    failures = []
    honest = set(index.honest_nodes)
    for event in index.of("commit"):
        if event.actor not in honest:
            continue
        cycle = event.data["cycle"]
        known = first.setdefault(cycle, (event.actor, event.digest))
        if known[1] != event.digest:
            failures.append((event.tick, f"cycle {cycle}: {known[0]} and {event.actor} committed different orders"))
    return _verdict("safety", failures)


def check_prefix(index: TraceIndex) -> Verdict:
    failures = []
    for node, commits in index.commits.items():
        expected = 1
        for event in commits:
            if event.data["cycle"] != expected:
                failures.append((event.tick, f"{node} committed cycle {event.data['cycle']} after {expected - 1}"))
                break
            expected += 1
    return _verdict("prefix", failures)


def check_oracle_order(index: TraceIndex) -> Verdict:
    """Commits match the inclusion set and order the trace's certificates imply"""
    failures = []
    honest = set(index.honest_nodes)
    for event in index.of("commit"):
        if event.actor not in honest:
            continue
        cycle = event.data["cycle"]
        roots: Dict[str, str] = event.data["roots"]
        expected = index.expected_inclusion(cycle)
        if expected is None:
            failures.append((event.tick, f"{event.actor} committed cycle {cycle} without a recorded view"))
            continue
        if sorted(roots) != sorted(expected):
            failures.append(
                (
                    event.tick,
                    f"{event.actor} cycle {cycle}: included {sorted(roots, key=natural_key)}, "
                    f"expected {sorted(expected, key=natural_key)}",
                )
            )
            continue
        wrong = [bg for bg, root in expected.items() if root is not None and roots[bg] != root]
        if wrong:
            failures.append((event.tick, f"{event.actor} cycle {cycle}: payload roots differ for {wrong}"))
        elif event.digest != order_digest(cycle, roots.values()):
            failures.append((event.tick, f"{event.actor} cycle {cycle}: order digest does not match its roots"))
    return _verdict("oracle_order", failures)


def check_dedup(index: TraceIndex) -> Verdict:
    failures = []
    for node, commits in index.commits.items():
        seen: Dict[str, int] = {}
        for event in commits:
            for key in event.data.get("txs", []):
                if key in seen:
                    failures.append(
                        (event.tick, f"{node} committed {key} in cycles {seen[key]} and {event.data['cycle']}")
                    )
                seen.setdefault(key, event.data["cycle"])
    return _verdict("dedup", failures)


def check_commit_delay(index: TraceIndex) -> Verdict:
    """
    A node outputs cycle c only after it saw c and c+1 complete itself.

    In CM mode assisted cycles never complete locally, so commits there are
    bounded by the bypass pipeline depth instead.
    """
    scenario = index.scenario
    delay = scenario.commit_delay
    failures = []
    if scenario.policy.mode == "cm":
        batch = scenario.timing.batch
        for event in index.of("commit"):
            cycle = event.data["cycle"]
            earliest = cycle_start(cycle + delay, batch) + 2 * batch
            if not event.data.get("transferred") and event.tick < earliest:
                failures.append((event.tick, f"{event.actor} committed cycle {cycle} at {event.tick} < {earliest}"))
        return _verdict("commit_delay", failures)
    complete: Dict[Tuple[str, int], bool] = {}
    for event in index.events:
        if event.kind in ("complete", "recompute"):
            complete[(event.actor, event.data["cycle"])] = event.kind == "complete"
        elif event.kind == "commit" and not event.data.get("transferred"):
            cycle = event.data["cycle"]
            pending = [c for c in (cycle, cycle + delay) if not complete.get((event.actor, c))]
            if pending:
                failures.append(
                    (event.tick, f"{event.actor} committed cycle {cycle} before completing cycle {pending[0]}")
                )
    return _verdict("commit_delay", failures)


def _placement(components: List[List[str]], node: str) -> Optional[int]:
    chain = set(ancestors(node))
    wildcard = None
    for i, comp in enumerate(components):
        if chain & set(comp):
            return i
        if "*" in comp:
            wildcard = i
    return wildcard


def minority_nodes(index: TraceIndex, components: List[List[str]]) -> Set[str]:
    """Nodes outside the component holding a global quorum of BGs"""
    layout = index.layout
    place = {n: _placement(components, n) for n in layout.all_nodes()}
    holding: Dict[int, int] = {}
    for bg in layout.initial_bgs:
        sl_homes: Dict[int, int] = {}
        for sl in layout.sls[bg]:
            counts: Dict[int, int] = {}
            for node in layout.nodes[sl]:
                counts[place[node]] = counts.get(place[node], 0) + 1
            home, count = max(counts.items(), key=lambda kv: kv[1])
            if count >= layout.sl_majority(sl):
                sl_homes[home] = sl_homes.get(home, 0) + 1
        for comp, count in sl_homes.items():
            if count >= layout.bg_quorum(bg):
                holding[comp] = holding.get(comp, 0) + 1
    needed = layout.global_quorum(len(layout.initial_bgs))
    main = [comp for comp, count in holding.items() if count >= needed]
    if not main:
        return set(layout.all_nodes())
    majority_sls = set()
    for sl, nodes in layout.nodes.items():
        if sum(place[n] == main[0] for n in nodes) >= layout.sl_majority(sl):
            majority_sls.add(sl)
    return {n for n in layout.all_nodes() if place[n] != main[0] or sl_of(n) not in majority_sls}


def check_liveness(index: TraceIndex) -> Verdict:
    """
    Majority-side honest nodes commit enough cycles; minority-side nodes
    emit no commits while their partition lasts.
    """
    scenario = index.scenario
    layout = index.layout
    grace = 2 * scenario.timing.net_delay
    failures = []
    sidelined: Set[str] = set()
    for event in index.of("partition"):
        components = event.data["components"]
        until = event.data.get("until")
        minority = minority_nodes(index, components)
        sidelined |= minority
        for node in minority:
            for commit in index.commits.get(node, []):
                if event.tick + grace <= commit.tick and (until is None or commit.tick < until):
                    failures.append(
                        (commit.tick, f"minority node {node} committed cycle {commit.data['cycle']} during partition")
                    )
                    break
    needed = math.ceil(scenario.min_commit_ratio * scenario.cycles)
    exempt = index.byzantine | index.crashed | sidelined
    for node in layout.all_nodes():
        bg = bg_of(node)
        if node in exempt or bg in layout.spare_bgs or bg in index.faulted_bgs:
            continue
        if any(e.peer == bg for e in index.of("exclusion")):
            continue
        cycles = {e.data["cycle"] for e in index.commits.get(node, []) if e.data["cycle"] <= scenario.cycles}
        if len(cycles) < needed:
            failures.append((scenario.total_ticks, f"{node} committed {len(cycles)} of {scenario.cycles} cycles"))
    return _verdict("liveness", failures)


def check_bg_agreement(index: TraceIndex) -> Verdict:
    """One certified payload per BG and cycle, and honest nodes only accept that one"""
    failures = []
    decided: Dict[Tuple[str, int], str] = {}
    for event in index.of("bg_decide"):
        key = (event.actor[3:], event.data["cycle"])
        known = decided.setdefault(key, event.digest)
        if known != event.digest:
            failures.append((event.tick, f"{key[0]} decided two payloads for cycle {key[1]}"))
    honest = set(index.honest_nodes)
    for event in index.of("accept_payload"):
        if event.actor not in honest:
            continue
        root = decided.get((event.peer, event.data["cycle"]))
        if root is not None and root != event.digest:
            failures.append(
                (event.tick, f"{event.actor} accepted a forged payload of {event.peer} for cycle {event.data['cycle']}")
            )
    return _verdict("bg_agreement", failures)


def check_proof_consistency(index: TraceIndex) -> Verdict:
    """Every proof a client accepted names a transaction survivors committed in that cycle"""
    keys: Dict[str, str] = {}
    for event in index.of("client_submit"):
        keys.setdefault(event.digest, f"{event.actor}:{event.data['nonce']}")
    survivors = [n for n in index.honest_nodes if n not in index.crashed]
    committed: Dict[int, Set[str]] = {}
    for node in survivors:
        for event in index.commits.get(node, []):
            committed.setdefault(event.data["cycle"], set(event.data.get("txs", [])))
    failures = []
    for event in index.of("proof_verified"):
        cycle = event.data["cycle"]
        key = keys.get(event.digest)
        if cycle not in committed:
            continue
        if key is None or key not in committed[cycle]:
            failures.append((event.tick, f"{event.actor} holds a proof for {key} in cycle {cycle} survivors never committed"))
    return _verdict("proof_consistency", failures)


def check_fifo(index: TraceIndex) -> Verdict:
    ends = index.of("run_end")
    if ends and ends[-1].data.get("fifo_violations", 0):
        return Verdict(
            invariant="fifo",
            passed=False,
            witness=f"{ends[-1].data['fifo_violations']} out-of-order deliveries",
            tick=ends[-1].tick,
        )
    return Verdict(invariant="fifo", passed=True)


def check_reply_deny_exclusive(index: TraceIndex) -> Verdict:
    failures = []
    per_cycle: Dict[int, List[TraceEvent]] = {}
    for event in index.of("cm_certified"):
        per_cycle.setdefault(event.data["cycle"], []).append(event)
    for cycle, events in per_cycle.items():
        if len(events) > 1:
            kinds = sorted({e.data["command"] for e in events})
            failures.append((events[1].tick, f"cycle {cycle} certified {len(events)} decisions {kinds}"))
    return _verdict("cm_reply_deny_exclusive", failures)


def check_assist_window(index: TraceIndex) -> Verdict:
    """No CM_REPLY for C is certified after a CM_REPLY for any cycle >= C + k"""
    k = index.scenario.timing.k
    failures = []
    highest = None
    for event in index.of("cm_certified"):
        if event.data["command"] != "REPLY":
            continue
        cycle = event.data["cycle"]
        if highest is not None and highest >= cycle + k:
            failures.append((event.tick, f"CM_REPLY for {cycle} certified after CM_REPLY for {highest}"))
        highest = cycle if highest is None else max(highest, cycle)
    return _verdict("cm_assist_window", failures)


def check_classification_agreement(index: TraceIndex) -> Verdict:
    failures = []
    honest = set(index.honest_nodes)
    seen: Dict[int, Tuple[str, str]] = {}
    for event in index.of("classify"):
        if event.actor not in honest:
            continue
        cycle = event.data["cycle"]
        result = event.data["result"]
        expected = "CM_ASSISTED" if cycle in index.replies else "UNASSISTED"
        if cycle in index.replies or cycle in index.denies:
            if result != expected:
                failures.append((event.tick, f"{event.actor} classified cycle {cycle} {result}, CM certified {expected}"))
                continue
        known = seen.setdefault(cycle, (event.actor, result))
        if known[1] != result:
            failures.append((event.tick, f"cycle {cycle}: {known[0]} says {known[1]}, {event.actor} says {result}"))
    return _verdict("cm_classification_agreement", failures)


def check_assisted_outcome(index: TraceIndex) -> Verdict:
    failures = []
    honest = set(index.honest_nodes)
    for event in index.of("commit"):
        cycle = event.data["cycle"]
        reply = index.replies.get(cycle)
        if reply is None or event.actor not in honest:
            continue
        if event.data["roots"] != reply.data["committed"]:
            failures.append((event.tick, f"{event.actor} cycle {cycle} differs from the certified CM_REPLY"))
    return _verdict("cm_assisted_outcome", failures)


def check_view_unique(index: TraceIndex) -> Verdict:
    failures = []
    seen: Dict[int, List[str]] = {}
    for event in index.of("view"):
        bgs = event.data["bgs"]
        known = seen.setdefault(event.data["epoch"], bgs)
        if known != bgs:
            failures.append((event.tick, f"epoch {event.data['epoch']} certified as {known} and {bgs}"))
    return _verdict("membership_view_unique", failures)


def check_graph_analysis(index: TraceIndex) -> Verdict:
    """Recompute each CM graph analysis by brute-force subset search"""
    policy = index.scenario.policy.analysis_policy
    failures = []
    for event in index.of("cm_graph"):
        if event.actor in index.byzantine:
            continue
        adjacency: Dict[str, List[str]] = event.data["adjacency"]
        edges = [(v, w) for v, targets in adjacency.items() for w in targets]
        graph = CommGraph.from_edges(event.data["cycle"], adjacency, edges, event.data.get("failed", []))
        fast, _ = analyze(graph, policy)
        slow, _ = brute_force_analyze(graph, policy)
        claimed = sorted(event.data["committed"], key=natural_key)
        if sorted(fast, key=natural_key) != sorted(slow, key=natural_key) or sorted(slow, key=natural_key) != claimed:
            failures.append((event.tick, f"cycle {event.data['cycle']}: analysis {claimed} != search {sorted(slow)}"))
    return _verdict("cm_graph_analysis", failures)


def check_script(index: TraceIndex) -> Verdict:
    failures = []
    script = index.scenario.script
    for step in script.cycles if script else []:
        reply = index.replies.get(step.cycle)
        if step.expect_committed is None and step.expect_fn is None:
            continue
        if reply is None:
            failures.append((index.scenario.total_ticks, f"no CM_REPLY for cycle {step.cycle}"))
            continue
        committed = sorted(reply.data["committed"], key=natural_key)
        fn = sorted(reply.data.get("fn", []), key=natural_key)
        if step.expect_committed is not None and committed != sorted(step.expect_committed, key=natural_key):
            failures.append((reply.tick, f"cycle {step.cycle} committed {committed}, expected {step.expect_committed}"))
        if step.expect_fn is not None and fn != sorted(step.expect_fn, key=natural_key):
            failures.append((reply.tick, f"cycle {step.cycle} FN {fn}, expected {step.expect_fn}"))
    return _verdict("script_expectations", failures)


def check_expected_events(index: TraceIndex) -> Verdict:
    failures = []
    end = index.scenario.total_ticks
    for kind, minimum in sorted(index.scenario.expect_events.items()):
        count = len(index.of(kind))
        if count < minimum:
            failures.append((end, f"{kind}: {count} events, expected at least {minimum}"))
    for kind in index.scenario.forbid_events:
        events = index.of(kind)
        if events:
            failures.append((events[0].tick, f"{kind} must not occur ({len(events)} events)"))
    return _verdict("expected_events", failures)


GLOBAL_CHECKS = (
    check_safety,
    check_prefix,
    check_oracle_order,
    check_dedup,
    check_commit_delay,
    check_liveness,
    check_bg_agreement,
    check_proof_consistency,
    check_fifo,
    check_view_unique,
    check_expected_events,
)

CM_CHECKS = (
    check_reply_deny_exclusive,
    check_assist_window,
    check_classification_agreement,
    check_assisted_outcome,
    check_graph_analysis,
    check_script,
)


def oracle_check(events: Iterable[TraceEvent], scenario: Scenario) -> List[Verdict]:
    """Evaluate every invariant of a finished run"""
    index = TraceIndex(events, scenario)
    checks = list(GLOBAL_CHECKS)
    if scenario.policy.mode == "cm":
        checks.extend(CM_CHECKS)
    if scenario.script is not None:
        # scripted runs exercise the CM alone
        checks = [check_fifo, check_expected_events, *CM_CHECKS]
    verdicts = [check(index) for check in checks]
    if scenario.assumption_breach:
        verdicts = [v if v.passed else v.model_copy(update={"excused": True}) for v in verdicts]
    for verdict in verdicts:
        if not verdict.passed:
            logger.info("%s failed at %s: %s", verdict.invariant, verdict.tick, verdict.witness)
    return verdicts
