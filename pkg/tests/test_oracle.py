from rcsim.models.scenario import Scenario
from rcsim.models.trace import TraceEvent
from rcsim.services.certs import digest
from rcsim.services.oracle import (
    TraceIndex,
    check_assist_window,
    check_bg_agreement,
    check_classification_agreement,
    check_commit_delay,
    check_dedup,
    check_expected_events,
    check_graph_analysis,
    check_oracle_order,
    check_prefix,
    check_reply_deny_exclusive,
    check_safety,
    minority_nodes,
    oracle_check,
    order_digest,
)

BGS = ["BG1", "BG2", "BG3"]
ROOTS = {bg: digest("payload", bg).hex() for bg in BGS}


def ev(tick, kind, actor, peer=None, digest=None, **data):
    return TraceEvent(tick=tick, kind=kind, actor=actor, peer=peer, digest=digest, data=data)


def commit(node, cycle, tick=None, roots=None, order=None, txs=(), **extra):
    roots = dict(ROOTS) if roots is None else roots
    return ev(
        tick if tick is not None else (cycle + 3) * 1000,
        "commit",
        node,
        digest=order or order_digest(cycle, roots.values()),
        cycle=cycle,
        roots=roots,
        txs=list(txs),
        **extra,
    )


def base_events(cycles=(1,)):
    events = [ev(0, "view", "global", epoch=0, bgs=BGS, admitted={})]
    for cycle in cycles:
        for bg in BGS:
            events.append(ev(cycle * 1000 + 2000, "bg_decide", f"bg:{bg}", digest=ROOTS[bg], cycle=cycle))
    return events


def completed(node, *cycles):
    return [ev(cycle * 1000 + 2500, "complete", node, cycle=cycle, included=BGS) for cycle in cycles]


def index_of(events, **scenario):
    return TraceIndex(events, Scenario(name="hand-built", **scenario))


def test_matching_commits_pass():
    events = base_events() + completed("BG1.SL1.N1", 1, 2) + completed("BG2.SL3.N2", 1, 2)
    events += [commit("BG1.SL1.N1", 1), commit("BG2.SL3.N2", 1)]
    index = index_of(events)
    for check in (check_safety, check_prefix, check_oracle_order, check_commit_delay, check_bg_agreement):
        assert check(index).passed, check.__name__


def test_diverging_commits_break_safety():
    events = base_events() + [
        commit("BG1.SL1.N1", 1),
        commit("BG2.SL1.N1", 1, order=digest("other").hex()),
    ]
    verdict = check_safety(index_of(events))
    assert not verdict.passed
    assert "BG1.SL1.N1" in verdict.witness and "BG2.SL1.N1" in verdict.witness


def test_byzantine_nodes_are_not_held_to_safety():
    events = base_events() + [
        ev(0, "byzantine", "BG2.SL1", behavior="equivocate_state", actors=["BG2.SL1.N1"]),
        commit("BG1.SL1.N1", 1),
        commit("BG2.SL1.N1", 1, order=digest("other").hex()),
    ]
    assert check_safety(index_of(events)).passed


def test_gap_in_commits_breaks_prefix():
    events = base_events((1, 3)) + [commit("BG1.SL1.N1", 1), commit("BG1.SL1.N1", 3)]
    verdict = check_prefix(index_of(events))
    assert not verdict.passed
    assert "cycle 3 after 1" in verdict.witness


def test_recommitted_transaction_breaks_dedup():
    events = base_events((1, 2)) + [
        commit("BG1.SL1.N1", 1, txs=["C1:5"]),
        commit("BG1.SL1.N1", 2, txs=["C1:5", "C2:1"]),
    ]
    assert not check_dedup(index_of(events)).passed


def test_commit_before_next_cycle_completes_breaks_commit_delay():
    node = "BG1.SL1.N1"
    assert check_commit_delay(index_of(base_events() + completed(node, 1, 2) + [commit(node, 1)])).passed
    verdict = check_commit_delay(index_of(base_events() + completed(node, 1) + [commit(node, 1)]))
    assert not verdict.passed
    assert "before completing cycle 2" in verdict.witness
    # another node's completion does not count
    others = completed("BG2.SL1.N1", 2)
    assert not check_commit_delay(index_of(base_events() + completed(node, 1) + others + [commit(node, 1)])).passed
    late = base_events() + completed(node, 1) + [commit(node, 1)] + completed(node, 2)
    assert not check_commit_delay(index_of(late)).passed


def test_recomputed_cycle_must_complete_again():
    node = "BG1.SL1.N1"
    recompute = ev(3600, "recompute", node, cycle=2, excluded="BG3")
    events = base_events() + completed(node, 1, 2) + [recompute, commit(node, 1)]
    assert not check_commit_delay(index_of(events)).passed
    events = base_events() + completed(node, 1, 2) + [recompute] + completed(node, 2) + [commit(node, 1)]
    assert check_commit_delay(index_of(events)).passed


def test_transferred_commits_skip_commit_delay():
    transferred = commit("BG1.SL1.N1", 1, tick=100, transferred=True)
    assert check_commit_delay(index_of(base_events() + [transferred])).passed


def test_early_cm_commit_breaks_commit_delay():
    cm = {"policy": {"mode": "cm", "analysis": "full", "cm_bypass": True}, "timing": {"batch": 1000, "k": 2}}
    assert not check_commit_delay(index_of(base_events() + [commit("BG1.SL1.N1", 1, tick=4999)], **cm)).passed
    assert check_commit_delay(index_of(base_events() + [commit("BG1.SL1.N1", 1, tick=5000)], **cm)).passed


def test_missing_bg_breaks_oracle_order():
    roots = {bg: ROOTS[bg] for bg in ("BG1", "BG2")}
    verdict = check_oracle_order(index_of(base_events() + [commit("BG1.SL1.N1", 1, roots=roots)]))
    assert not verdict.passed
    assert "expected ['BG1', 'BG2', 'BG3']" in verdict.witness


def test_excluded_bg_is_not_expected():
    roots = {bg: ROOTS[bg] for bg in ("BG1", "BG2")}
    record = ev(1500, "exclusion", "global", peer="BG3", cycle=1, epoch_limit=0)
    assert check_oracle_order(index_of(base_events() + [record, commit("BG1.SL1.N1", 1, roots=roots)])).passed


def test_commit_without_view_fails():
    verdict = check_oracle_order(index_of([commit("BG1.SL1.N1", 1)]))
    assert not verdict.passed
    assert "without a recorded view" in verdict.witness


def test_forged_payload_acceptance_breaks_bg_agreement():
    accepted = ev(3500, "accept_payload", "BG1.SL1.N1", peer="BG2", digest=digest("forged").hex(), cycle=1)
    assert not check_bg_agreement(index_of(base_events() + [accepted])).passed


def test_cm_decisions_are_exclusive_and_windowed():
    events = [
        ev(5000, "cm_certified", "cm", cycle=4, command="REPLY", committed={}, fn=[]),
        ev(5100, "cm_certified", "cm", cycle=4, command="DENY"),
    ]
    assert not check_reply_deny_exclusive(index_of(events, policy={"mode": "cm"})).passed

    late = [
        ev(5000, "cm_certified", "cm", cycle=6, command="REPLY", committed={}, fn=[]),
        ev(5100, "cm_certified", "cm", cycle=3, command="REPLY", committed={}, fn=[]),
    ]
    assert not check_assist_window(index_of(late, policy={"mode": "cm"})).passed
    assert check_assist_window(index_of(late[::-1], policy={"mode": "cm"})).passed


def test_classification_must_follow_the_certified_outcome():
    events = [
        ev(5000, "cm_certified", "cm", cycle=2, command="DENY"),
        ev(5100, "classify", "BG1.SL1.N1", cycle=2, result="UNASSISTED"),
        ev(5100, "classify", "BG2.SL1.N1", cycle=2, result="CM_ASSISTED"),
    ]
    verdict = check_classification_agreement(index_of(events, policy={"mode": "cm"}))
    assert not verdict.passed
    assert "BG2.SL1.N1" in verdict.witness


def test_graph_analysis_claim_is_rechecked():
    adjacency = {"BG1": ["BG3"], "BG2": ["BG1"], "BG3": ["BG1"]}
    good = ev(3000, "cm_graph", "CM.BG1", cycle=1, adjacency=adjacency, failed=["BG2"], committed=["BG1", "BG3"])
    bad = ev(3000, "cm_graph", "CM.BG1", cycle=1, adjacency=adjacency, failed=["BG2"], committed=["BG1"])
    assert check_graph_analysis(index_of([good], policy={"mode": "cm"})).passed
    assert not check_graph_analysis(index_of([bad], policy={"mode": "cm"})).passed


def test_expected_and_forbidden_events():
    events = [ev(10, "exclusion", "global", peer="BG3", cycle=1, epoch_limit=0)]
    assert not check_expected_events(index_of(events, expect_events={"join": 1})).passed
    assert not check_expected_events(index_of(events, forbid_events=["exclusion"])).passed
    assert check_expected_events(index_of(events, expect_events={"exclusion": 1})).passed


def test_minority_side_of_a_bg_partition():
    index = index_of([])
    minority = minority_nodes(index, [["BG3"], ["*"]])
    assert minority == set(index.layout.bg_nodes("BG3"))
    # no side keeps a global quorum of BGs, so everyone is sidelined
    split = minority_nodes(index, [["BG1"], ["BG2"], ["BG3"]])
    assert split == set(index.layout.all_nodes())


def test_breached_assumptions_excuse_failures():
    events = base_events() + [
        commit("BG1.SL1.N1", 1),
        commit("BG2.SL1.N1", 1, order=digest("other").hex()),
        ev(9000, "run_end", "harness", delivered=1, dropped=0, fifo_violations=0, cycles=1),
    ]
    verdicts = {v.invariant: v for v in oracle_check(events, Scenario(name="x", cycles=1, assumption_breach=True))}
    assert not verdicts["safety"].passed
    assert verdicts["safety"].excused
    assert verdicts["fifo"].passed
