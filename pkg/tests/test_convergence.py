import random

import pytest

from rcsim.errors import CertificateError
from rcsim.models.convergence import BGMeta, BGReport, CMCommand, CMDecision, CMDeny
from rcsim.models.scenario import AnalysisPolicy, Policy, Timing, Topology
from rcsim.services.certs import DecisionLog
from rcsim.services.convergence import (
    CMRsm,
    CommGraph,
    HorizonTable,
    analyze,
    brute_force_analyze,
    classify,
    holders_map,
    ingest_reports,
    label_hash,
)
from rcsim.services.layout import Layout, cm_node_id

FULL = AnalysisPolicy.parse("full")


def walkthrough_first_cycle(failed=("BG2",)):
    # BG1 holds BG2's and BG3's inputs, BG3 holds BG1's, BG2 never reported
    return CommGraph.from_edges(
        1, ["BG1", "BG2", "BG3"], [("BG2", "BG1"), ("BG3", "BG1"), ("BG1", "BG3")], failed
    )


def test_unreachable_bg_is_left_out():
    graph = walkthrough_first_cycle()
    committed, fn = analyze(graph, FULL)
    assert sorted(committed) == ["BG1", "BG3"]
    assert fn == {"BG2"}
    assert graph.adjacency() == {"BG1": ["BG3"], "BG2": ["BG1"], "BG3": ["BG1"]}


def test_without_failure_certificate_nothing_reaches_everyone():
    committed, fn = analyze(walkthrough_first_cycle(failed=()), FULL)
    assert committed == {}
    assert fn == {"BG1", "BG2", "BG3"}


def test_full_exchange_commits_everyone():
    bgs = ["BG1", "BG2", "BG3"]
    graph = CommGraph.from_edges(2, bgs, [(a, b) for a in bgs for b in bgs if a != b])
    committed, fn = analyze(graph, FULL)
    assert sorted(committed) == bgs
    assert fn == set()
    assert committed["BG2"] == graph.hashes["BG2"]


def test_replication_policy_needs_fewer_holders():
    graph = walkthrough_first_cycle(failed=())
    committed, fn = analyze(graph, AnalysisPolicy.parse("replication:2"))
    assert sorted(committed) == ["BG1", "BG2", "BG3"]
    committed, _ = analyze(graph, AnalysisPolicy.parse("replication:3"))
    assert committed == {}


@pytest.mark.parametrize("text", ["replication:0", "partial", "replication:x"])
def test_bad_analysis_policy(text):
    with pytest.raises(ValueError):
        AnalysisPolicy.parse(text)


@pytest.mark.parametrize("seed", range(25))
def test_analysis_matches_exhaustive_search(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 7)
    bgs = [f"BG{i}" for i in range(1, n + 1)]
    edges = [(a, b) for a in bgs for b in bgs if a != b and rng.random() < 0.6]
    failed = [v for v in bgs if rng.random() < 0.15]
    graph = CommGraph.from_edges(seed, bgs, edges, failed)
    for policy in (FULL, AnalysisPolicy.parse(f"replication:{rng.randint(1, n)}")):
        assert analyze(graph, policy) == brute_force_analyze(graph, policy)


def test_failed_issuer_edges_do_not_count():
    bgs = ["BG1", "BG2", "BG3", "BG4"]
    edges = [
        ("BG4", "BG1"), ("BG4", "BG2"), ("BG4", "BG3"),
        ("BG1", "BG2"), ("BG1", "BG3"), ("BG1", "BG4"),
        ("BG2", "BG1"), ("BG2", "BG4"),
        ("BG3", "BG4"),
    ]
    graph = CommGraph.from_edges(7, bgs, edges, failed=["BG4"])
    for policy, chosen in ((FULL, {"BG1"}), (AnalysisPolicy.parse("replication:2"), {"BG1", "BG2"})):
        committed, fn = brute_force_analyze(graph, policy)
        assert set(committed) == chosen
        assert fn == set(bgs) - chosen
        assert analyze(graph, policy) == (committed, fn)


def test_conflicting_claims_mark_the_issuer_failed():
    reports = [
        BGReport(cycle=3, reporter="BG1", own_hash=label_hash("h1"), received={"BG2": label_hash("a")}, complete=True),
        BGReport(cycle=3, reporter="BG3", own_hash=label_hash("h3"), received={"BG2": label_hash("b")}, complete=True),
        BGReport(cycle=4, reporter="BG2", own_hash=label_hash("late"), received={}, complete=False),
    ]
    graph = ingest_reports(3, reports, [], ["BG1", "BG2", "BG3"])
    assert "BG2" in graph.failed
    assert "BG2" not in graph.hashes
    assert "(failed)" in graph.render()


def test_holders_include_the_issuer():
    holders = holders_map(walkthrough_first_cycle())
    assert holders == {"BG1": ("BG1", "BG3"), "BG3": ("BG1", "BG3")}


def _meta(bg, flavor, cycle=5, reply=None):
    deny = CMDeny(cycle=cycle) if flavor == "DENIED" else None
    return BGMeta(cycle=cycle, bg_id=bg, flavor=flavor, reply=reply, deny=deny)


def test_classification():
    live = ["BG1", "BG2", "BG3"]
    quiet = {bg: _meta(bg, "NO_ASST") for bg in live}
    assert classify(5, quiet, live).result == "UNASSISTED"

    missing = dict(quiet, BG3=None)
    assert classify(5, missing, live).result == "NeedsCMQuery"

    reply = CMDecision(cycle=5, committed={"BG1": label_hash("h1")}, fn={"BG3": None})
    assisted = dict(missing, BG2=_meta("BG2", "ASSISTED", reply=reply))
    outcome = classify(5, assisted, live)
    assert outcome.result == "CM_ASSISTED"
    assert outcome.reply == reply

    # metas from BGs outside the live list do not count
    assert classify(5, dict(quiet, BG9=_meta("BG9", "DENIED")), live).result == "UNASSISTED"


def test_reply_and_deny_in_one_cycle_is_an_error():
    reply = CMDecision(cycle=5, committed={})
    metas = {"BG1": _meta("BG1", "ASSISTED", reply=reply), "BG2": _meta("BG2", "DENIED")}
    with pytest.raises(CertificateError):
        classify(5, metas, ["BG1", "BG2"])


def test_horizon_skips_fn_members_for_h_cycles():
    table = HorizonTable(k=2)
    decision = CMDecision(cycle=5, committed={}, fn={"BG2": None}, horizon=3)
    table.extend_exclusion(decision)
    table.extend_exclusion(decision)
    assert table.windows == {"BG2": [(7, 10)]}
    assert [c for c in range(5, 12) if "BG2" in table.excluded(c)] == [7, 8, 9]


def test_zero_horizon_excludes_nothing():
    table = HorizonTable(k=2)
    table.extend_exclusion(CMDecision(cycle=5, committed={}, fn={"BG2": None}, horizon=0))
    assert table.excluded(7) == set()


@pytest.mark.slow
def test_analysis_matches_exhaustive_search_at_scale():
    rng = random.Random(1000)
    for cycle in range(1000):
        n = rng.randint(1, 7)
        bgs = [f"BG{i}" for i in range(1, n + 1)]
        edges = [(a, b) for a in bgs for b in bgs if a != b and rng.random() < rng.random()]
        failed = [v for v in bgs if rng.random() < 0.2]
        graph = CommGraph.from_edges(cycle, bgs, edges, failed)
        policies = [FULL] + [AnalysisPolicy.parse(f"replication:{r}") for r in range(1, 5)]
        for policy in policies:
            assert analyze(graph, policy) == brute_force_analyze(graph, policy), (cycle, str(policy))


def rsm_for(members=None):
    layout = Layout(Topology(bgs=3))
    policy = Policy(mode="cm", analysis="full", cm_bypass=False)
    replicas = [cm_node_id(bg) for bg in layout.all_bgs]
    members_for = (lambda cycle: list(members)) if members is not None else None
    return CMRsm(layout, Timing(), policy, replicas, members_for=members_for, scripted=members is not None)


def exchange_reports(cycle, bgs):
    return [
        BGReport(
            cycle=cycle,
            reporter=bg,
            own_hash=label_hash(bg),
            received={other: label_hash(other) for other in bgs if other != bg},
            complete=True,
        )
        for bg in bgs
    ]


def reply_command(cycle, reports, listed):
    committed, fn = analyze(ingest_reports(cycle, reports, [], listed), FULL)
    return CMCommand(
        kind="REPLY",
        cycle=cycle,
        proposer="CM.BG1",
        reply=CMDecision(cycle=cycle, committed=committed, fn={bg: None for bg in fn}),
        reports=tuple(reports),
        live_listed=tuple(listed),
    )


BGS = ["BG1", "BG2", "BG3"]


def test_reply_with_every_report_is_valid():
    command = reply_command(2, exchange_reports(2, BGS), BGS)
    assert rsm_for(BGS).command_valid(command, DecisionLog())


def test_reply_missing_a_members_report_is_rejected():
    reports = [r for r in exchange_reports(2, BGS) if r.reporter != "BG2"]
    command = reply_command(2, reports, BGS)
    assert not rsm_for(BGS).command_valid(command, DecisionLog())


def test_reply_listing_fewer_members_is_rejected():
    reports = exchange_reports(2, ["BG1", "BG3"])
    command = reply_command(2, reports, ["BG1", "BG3"])
    assert not rsm_for(BGS).command_valid(command, DecisionLog())


def test_reply_with_duplicate_reporter_is_rejected():
    reports = exchange_reports(2, BGS)
    command = reply_command(2, reports + reports[:1], BGS)
    assert not rsm_for(BGS).command_valid(command, DecisionLog())


def test_reply_without_a_certified_view_is_rejected():
    command = reply_command(2, exchange_reports(2, BGS), BGS)
    assert not rsm_for().command_valid(command, DecisionLog(), view=None)


def test_deny_needs_no_evidence():
    command = CMCommand(kind="DENY", cycle=2, proposer="CM.BG1")
    assert rsm_for(BGS).command_valid(command, DecisionLog())
