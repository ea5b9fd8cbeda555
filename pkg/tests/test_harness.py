import math
import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from rcsim.errors import ConfigError
from rcsim.models.scenario import Scenario
from rcsim.services import harness
from rcsim.services.bg_consensus import DedupBuffer, build_payload
from rcsim.services.client import make_tx
from rcsim.services.superleaf import make_tb
from rcsim.storage import read_trace, trace_digest


def failed(verdicts):
    return [f"{v.invariant}: {v.witness}" for v in verdicts if not (v.passed or v.excused)]


# -- scenario documents -------------------------------------------------------

def test_yaml_syntax_error_reports_the_line():
    with pytest.raises(ConfigError) as info:
        harness.parse_scenario("name: broken\ntiming:\n  batch: [1000\n")
    assert info.value.line is not None


def test_invalid_field_reports_path_and_line():
    text = "name: bad\ncycles: 4\ntiming:\n  batch: 5\n"
    with pytest.raises(ConfigError) as info:
        harness.parse_scenario(text)
    assert info.value.field == "timing.batch"
    assert info.value.line == 4


def test_unknown_field_is_rejected():
    with pytest.raises(ConfigError) as info:
        harness.parse_scenario("name: x\ntopology:\n  bgz: 3\n")
    assert info.value.field == "topology.bgz"


def test_scenario_must_be_a_mapping():
    with pytest.raises(ConfigError):
        harness.parse_scenario("- just\n- a list\n")


def test_too_few_sls_for_f_i():
    with pytest.raises(ConfigError):
        harness.parse_scenario("name: x\ntopology:\n  sls_per_bg: 3\n  f_i: 1\n")


def test_breached_assumptions_skip_preconditions():
    scenario = harness.parse_scenario("name: x\nassumption_breach: true\ntopology:\n  sls_per_bg: 3\n")
    assert scenario.assumption_breach


def test_every_shipped_scenario_parses():
    names = harness.list_scenarios()
    assert {"baseline", "cm_walkthrough", "long_partition"} <= set(names)
    for cls, (stem, _) in harness.MATRIX.items():
        assert stem in names
        scenario = harness.shipped_scenario(stem)
        assert any(f.fault_class == cls for f in scenario.faults) or scenario.byzantine
    assert len(harness.matrix_scenarios()) == 16


def test_unknown_shipped_scenario():
    with pytest.raises(ConfigError):
        harness.shipped_scenario("no_such_scenario")
    with pytest.raises(ConfigError):
        harness.load_scenario("/nonexistent/scenario.yaml")


def test_overrides_revalidate():
    base = harness.shipped_scenario("f01_node_crash_round1")
    switched = harness.apply_overrides(base, policy="cm", analysis="replication:2")
    assert switched.policy.mode == "cm"
    assert str(switched.policy.analysis_policy) == "replication:2"
    assert harness.apply_overrides(base) is base
    with pytest.raises(ConfigError):
        harness.apply_overrides(base, analysis="sometimes")


def test_seed_resolution(monkeypatch, short_scenario):
    scenario = short_scenario(seed=5)
    assert harness.resolve_seed(scenario) == 5
    monkeypatch.setenv("RCSIM_SEED", "77")
    assert harness.resolve_seed(scenario) == 77
    assert harness.resolve_seed(scenario, 3) == 3


def test_bad_fault_targets_fail_at_build_time(short_scenario):
    with pytest.raises(ConfigError):
        harness.Simulation(short_scenario(faults=[{"class": "F1", "target": "BG7.SL1.N1", "cycle": 2}]))
    with pytest.raises(ConfigError):
        harness.Simulation(short_scenario(faults=[{"class": "F10", "cycle": 2, "components": [["BG9"], ["*"]]}]))
    with pytest.raises(ConfigError):
        harness.Simulation(short_scenario(faults=[{"class": "F2", "cycle": 2}]))


# -- runs ----------------------------------------------------------------------

def test_cm_walkthrough():
    scenario = harness.shipped_scenario("cm_walkthrough")
    events, verdicts = harness.run(scenario)
    assert failed(verdicts) == []
    assert harness.comm_graph(events, 1) == {"BG1": ["BG3"], "BG2": ["BG1"], "BG3": ["BG1"]}
    replies = {e.data["cycle"]: e for e in events if e.kind == "cm_certified" and e.data["command"] == "REPLY"}
    assert sorted(replies[1].data["committed"]) == ["BG1", "BG3"]
    assert replies[1].data["fn"] == ["BG2"]
    assert sorted(replies[4].data["committed"]) == ["BG1", "BG3", "BG4"]
    assert harness.comm_graph(events, 99) is None


def test_walkthrough_under_replication():
    scenario = harness.apply_overrides(harness.shipped_scenario("cm_walkthrough"), analysis="replication:2")
    events, _ = harness.run(scenario)
    replies = {e.data["cycle"]: e for e in events if e.kind == "cm_certified" and e.data["command"] == "REPLY"}
    assert sorted(replies[2].data["committed"]) == ["BG1", "BG2", "BG3"]


def test_short_run_passes(short_scenario):
    events, verdicts = harness.run(short_scenario())
    assert failed(verdicts) == []
    assert events[0].kind == "run_start"
    assert events[-1].kind == "run_end"
    assert any(e.kind == "commit" for e in events)
    assert any(e.kind == "proof_verified" for e in events)


def test_same_seed_same_trace(tmp_path, short_scenario):
    scenario = short_scenario(cycles=5)
    first, _ = harness.run_result(scenario, seed=9, trace_path=tmp_path / "a.jsonl")
    second, _ = harness.run_result(scenario, seed=9)
    assert first.trace_digest == second.trace_digest
    events, recorded = read_trace(tmp_path / "a.jsonl")
    assert recorded == trace_digest(events) == first.trace_digest
    other, _ = harness.run_result(scenario, seed=10)
    assert other.trace_digest != first.trace_digest


def test_trace_round_trips_through_the_oracle(tmp_path, short_scenario):
    scenario = short_scenario(cycles=5)
    result, _ = harness.run_result(scenario, seed=4, trace_path=tmp_path / "t.jsonl")
    events, _ = read_trace(tmp_path / "t.jsonl")
    assert harness.scenario_from_trace(events) == scenario
    assert [v.passed for v in harness.verify_trace(events)] == [v.passed for v in result.verdicts]


def test_trace_without_header():
    with pytest.raises(ConfigError):
        harness.scenario_from_trace([])


def test_cm_mode_baseline_stays_unassisted(short_scenario):
    scenario = short_scenario(policy={"mode": "cm"}, cycles=10)
    events, verdicts = harness.run(scenario)
    assert failed(verdicts) == []
    assert not [e for e in events if e.kind == "cm_certified"]
    assert {e.data["result"] for e in events if e.kind == "classify"} == {"UNASSISTED"}


def test_node_crash_keeps_the_rest_live():
    events, verdicts = harness.run(harness.shipped_scenario("f01_node_crash_round1"))
    assert failed(verdicts) == []
    fault = next(e for e in events if e.kind == "fault")
    assert fault.data["affected"] == ["BG1.SL2.N2"]
    assert not [e for e in events if e.kind == "commit" and e.actor == "BG1.SL2.N2" and e.tick > fault.tick]


def test_crashed_node_is_removed():
    events, _ = harness.run(harness.shipped_scenario("f01_node_crash_round1"))
    proposed = [e for e in events if e.kind == "removal_proposed" and e.peer == "BG1.SL2.N2"]
    removed = [e for e in events if e.kind == "node_removal" and e.peer == "BG1.SL2.N2"]
    assert proposed and removed
    assert proposed[0].tick < removed[0].tick
    assert any(e.kind == "removal_applied" and e.peer == "BG1.SL2.N2" for e in events)


@pytest.mark.parametrize("stem", ["f12_bg_crash", "f16_early_exit"])
def test_dead_bg_is_excluded(stem):
    events, verdicts = harness.run(harness.shipped_scenario(stem))
    assert failed(verdicts) == []
    assert any(e.kind == "exclusion" and e.peer == "BG3" for e in events)


def test_early_exit_fires_after_completion():
    events, _ = harness.run(harness.shipped_scenario("f16_early_exit"))
    fault = next(e for e in events if e.kind == "fault")
    assert fault.data["fault_class"] == "F16"
    assert len(fault.data["affected"]) == 12
    completed = [e for e in events if e.kind == "complete" and e.actor.startswith("BG3.") and e.data["cycle"] == 10]
    assert completed and completed[0].tick <= fault.tick
    # nobody committed cycle 10 before the dead BG had already gone
    assert all(e.tick > fault.tick for e in events if e.kind == "commit" and e.data["cycle"] == 10)


def test_ordering_is_neutral_to_claimed_numbers():
    """An SL claiming block number 0 every cycle lands in a uniform position"""
    rng = random.Random(2024)
    positions = Counter()
    for cycle in range(1, 201):
        proposals = {}
        for j in range(1, 5):
            sl = f"BG1.SL{j}"
            txs = [make_tx(f"C{j}", cycle, rng.getrandbits(64), rng.randbytes(16))]
            claimed = 0 if j == 1 else None
            proposals[sl] = [make_tb(f"{sl}.N1", sl, cycle, txs, claimed_number=claimed)]
        payload = build_payload("BG1", cycle, proposals, DedupBuffer(8))
        positions[next(i for i, tb in enumerate(payload.blocks) if tb.sl_id == "BG1.SL1")] += 1
    _, p = chisquare([positions[i] for i in range(4)])
    assert p > 0.01


# -- acceptance suites -----------------------------------------------------------

@pytest.mark.slow
def test_fault_matrix():
    rows = harness.run_matrix(seeds=5)
    assert len(rows) == 16
    assert [r.failures for r in rows if not r.passed] == []


@pytest.mark.slow
def test_every_scenario_is_deterministic():
    for name in harness.list_scenarios():
        scenario = harness.shipped_scenario(name)
        first, _ = harness.run_result(scenario)
        second, _ = harness.run_result(scenario)
        assert first.trace_digest == second.trace_digest, name


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100))
def test_early_exit_seeds(seed):
    _, verdicts = harness.run(harness.shipped_scenario("f16_early_exit"), seed=seed)
    by_name = {v.invariant: v for v in verdicts}
    assert by_name["safety"].passed
    assert by_name["proof_consistency"].passed
    assert by_name["commit_delay"].passed


def unreachability_scenario(seed):
    rng = random.Random(seed)
    bg = f"BG{rng.randint(1, 3)}"
    start = rng.randint(3, 8)
    return Scenario.model_validate(
        {
            "name": f"cm-unreachable-{seed}",
            "seed": seed,
            "cycles": 16,
            "clients": {"count": 3},
            "policy": {"mode": "cm"},
            "faults": [
                {"class": "F13", "target": bg, "cycle": start, "until_cycle": start + rng.randint(2, 6), "components": [[bg], ["*"]]}
            ],
            "min_commit_ratio": 0.5,
        }
    )


@pytest.mark.parametrize("seed", range(3))
def test_cm_bypass_classification(seed):
    _, verdicts = harness.run(unreachability_scenario(seed))
    by_name = {v.invariant: v for v in verdicts}
    for name in ("cm_reply_deny_exclusive", "cm_classification_agreement", "cm_assist_window", "safety"):
        assert by_name[name].passed, by_name[name].witness


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3, 200))
def test_cm_bypass_classification_many_seeds(seed):
    test_cm_bypass_classification(seed)


def assisted_cycles(events, bg):
    return {
        e.data["cycle"]
        for e in events
        if e.kind == "cm_certified" and e.data["command"] == "REPLY" and bg in e.data.get("fn", [])
    }


@pytest.mark.slow
def test_horizon_cuts_cm_interactions():
    scenario = harness.shipped_scenario("long_partition")
    events, verdicts = harness.run(scenario)
    assert failed(verdicts) == []
    with_horizon = assisted_cycles(events, "BG3")
    assert 1 <= len(with_horizon) <= math.ceil(50 / 16) + 1

    document = scenario.model_dump(mode="json", by_alias=True)
    document["timing"]["horizon"] = 0
    events, _ = harness.run(Scenario.model_validate(document))
    assert len(assisted_cycles(events, "BG3")) >= 4 * len(with_horizon)
