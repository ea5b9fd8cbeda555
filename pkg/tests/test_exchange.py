import pytest

from rcsim.errors import StateTransferRefused
from rcsim.models.messages import TransferBundle
from rcsim.services import harness
from rcsim.services.exchange import smoothed_rto
from rcsim.services.layout import sl_of


def run_shipped(stem):
    events, verdicts = harness.run(harness.shipped_scenario(stem))
    assert [f"{v.invariant}: {v.witness}" for v in verdicts if not v.passed] == []
    return events


@pytest.mark.parametrize(
    "stem",
    ["f02_emulator_crash", "f03_representative_crash", "f04_monitor_crash", "f05_tx_numbering_attack", "f09_sl_crash"],
)
def test_fault_is_masked(stem):
    events = run_shipped(stem)
    assert any(e.kind == "commit" for e in events)


def test_lying_emulators_are_caught_by_certificates():
    events = run_shipped("f08_emulator_lying")
    liars = [e for e in events if e.kind == "bad_state"]
    assert liars
    assert all(sl_of(e.peer) == "BG3.SL1" for e in liars)
    assert all(e.data["target"] == "BG3" for e in liars)


def test_silent_emulators_are_routed_around():
    events = run_shipped("f06_silent_emulators")
    assert not [e for e in events if e.kind == "exclusion"]
    decided = {(e.actor[3:], e.data["cycle"]): e.digest for e in events if e.kind == "bg_decide"}
    accepted = [e for e in events if e.kind == "accept_payload" and e.peer == "BG2"]
    assert accepted
    assert all(decided[(e.peer, e.data["cycle"])] == e.digest for e in accepted)


def test_forged_payloads_never_accepted():
    events = run_shipped("f11_sl_byzantine")
    decided = {(e.actor[3:], e.data["cycle"]): e.digest for e in events if e.kind == "bg_decide"}
    byzantine = {a for e in events if e.kind == "byzantine" for a in e.data["actors"]}
    for e in events:
        if e.kind == "accept_payload" and e.actor not in byzantine:
            assert decided[(e.peer, e.data["cycle"])] == e.digest


def test_ignored_clients_retry_elsewhere():
    events = run_shipped("f07_node_ignores_client")
    first_sl = {e.digest: sl_of(e.peer) for e in events if e.kind == "client_submit" and not e.data.get("twin")}
    retries = [e for e in events if e.kind == "client_retry"]
    assert any(first_sl[e.digest] == "BG1.SL1" for e in retries)
    for retry in retries:
        assert all(sl_of(t) != first_sl[retry.digest] for t in retry.data["targets"])


def test_cut_off_node_stays_silent():
    events = run_shipped("f10_sl_partition")
    partition = next(e for e in events if e.kind == "partition")
    heal = next(e for e in events if e.kind == "heal")
    late = partition.tick + 400
    assert not [
        e for e in events if e.kind == "commit" and e.actor == "BG1.SL1.N3" and late <= e.tick < heal.tick
    ]
    assert any(e.kind == "commit" and e.actor == "BG1.SL1.N1" and late <= e.tick < heal.tick for e in events)


def bundle_from(node, cycles):
    return TransferBundle(
        sender=node.actor_id,
        views=tuple(node.views[e] for e in sorted(node.views)),
        records=tuple(node.records[k] for k in sorted(node.records)),
        cycles=tuple(cycles),
    )


@pytest.fixture
def settled_simulation(short_scenario):
    simulation = harness.Simulation(short_scenario(cycles=6))
    simulation.run()
    return simulation


def test_complete_transfer_verifies(settled_simulation):
    sender = settled_simulation.nodes["BG2.SL1.N1"]
    receiver = settled_simulation.nodes["BG1.SL1.N1"]
    committed = [sender.committed[c] for c in sorted(sender.committed)]
    assert committed
    receiver.verify_bundle(bundle_from(sender, committed))


def test_transfer_with_an_omitted_payload_is_refused(settled_simulation):
    sender = settled_simulation.nodes["BG2.SL1.N1"]
    receiver = settled_simulation.nodes["BG1.SL1.N1"]
    cycle = min(sender.committed)
    full = sender.committed[cycle]
    assert len(full.decisions) == 3
    short = full.model_copy(update={"decisions": full.decisions[1:]})
    with pytest.raises(StateTransferRefused, match="missing") as exc:
        receiver.verify_bundle(bundle_from(sender, [short]))
    assert exc.value.cycle == cycle


def test_transfer_with_a_repeated_payload_is_refused(settled_simulation):
    sender = settled_simulation.nodes["BG2.SL1.N1"]
    receiver = settled_simulation.nodes["BG1.SL1.N1"]
    full = sender.committed[min(sender.committed)]
    padded = full.model_copy(update={"decisions": full.decisions + full.decisions[:1]})
    with pytest.raises(StateTransferRefused, match="inclusion set"):
        receiver.verify_bundle(bundle_from(sender, [padded]))


def test_fetch_timeout_tracks_response_times():
    assert smoothed_rto(400, 400, 50) == 400
    assert smoothed_rto(400, 0, 50) == 300
    assert smoothed_rto(400, 800, 50) == 500
    assert smoothed_rto(60, 0, 50) == 50
