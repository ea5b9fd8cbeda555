from rcsim.models.protocol import ExclusionRecord, MembershipView
from rcsim.services import harness
from rcsim.services.certs import make_gqc, make_qc, sign_qc_share
from rcsim.services.global_service import exclusion_root, record_valid, view_valid
from rcsim.services.layout import GLOBAL_ID


def make_view(layout, bgs, signers, epoch=1):
    quorum_sizes = {bg: layout.bg_quorum(bg) for bg in bgs}
    gqc = make_gqc(epoch, bgs, (epoch * 32 + 1, (epoch + 1) * 32), quorum_sizes, signers)
    return MembershipView(
        epoch=epoch,
        bgs=tuple(bgs),
        emulators={bg: tuple(layout.bg_nodes(bg)) for bg in bgs},
        quorum_sizes=quorum_sizes,
        gqc=gqc,
    )


def test_view_needs_a_global_quorum(layout):
    assert view_valid(make_view(layout, layout.all_bgs, ["BG1", "BG2"]), layout)
    assert not view_valid(make_view(layout, layout.all_bgs, ["BG1"]), layout)


def test_view_must_match_its_certificate(layout):
    view = make_view(layout, layout.all_bgs, layout.all_bgs)
    assert not view_valid(view.model_copy(update={"epoch": 2}), layout)
    assert not view_valid(view.model_copy(update={"bgs": ("BG1", "BG2")}), layout)


def make_record(layout, signers, bg="BG3", cycle=10):
    root = exclusion_root(bg, cycle)
    shares = [sign_qc_share(s, GLOBAL_ID, cycle, root, "exclusion") for s in signers]
    cert = make_qc(GLOBAL_ID, cycle, root, shares, len(signers), kind="exclusion")
    return ExclusionRecord(bg_id=bg, effective_cycle=cycle, epoch_limit=0, reporter="BG1", seq=1, cert=cert)


def test_exclusion_record_checks(layout):
    view = make_view(layout, layout.all_bgs, layout.all_bgs, epoch=0)
    record = make_record(layout, ["BG1", "BG2"])
    assert record_valid(record, view, layout)
    assert record.applies(10, 0)
    assert not record.applies(9, 0)
    assert not record.applies(40, 1)
    assert not record_valid(make_record(layout, ["BG1"]), view, layout)
    assert not record_valid(record.model_copy(update={"bg_id": "BG2"}), view, layout)


def test_bg_leader_failure_is_survived():
    events, verdicts = harness.run(harness.shipped_scenario("f14_bg_leader_failure"))
    assert [v.invariant for v in verdicts if not v.passed] == []
    fault = next(e for e in events if e.kind == "fault")
    (crashed,) = fault.data["affected"]
    successors = [e for e in events if e.kind == "bg_leader" and e.actor == "bg:BG2" and e.tick >= fault.tick]
    assert successors and all(e.peer != crashed for e in successors)
    assert any(e.kind == "commit" and e.actor.startswith("BG2.") and e.tick > fault.tick for e in events)


def test_minority_bg_is_excluded_then_rejoins():
    events, verdicts = harness.run(harness.shipped_scenario("f15_system_partition"))
    assert [v.invariant for v in verdicts if not v.passed] == []
    heal = next(e for e in events if e.kind == "heal")
    exclusion = next(e for e in events if e.kind == "exclusion")
    join = next(e for e in events if e.kind == "join")
    assert exclusion.peer == "BG4"
    assert join.peer == "BG4"
    assert exclusion.tick < heal.tick <= join.tick
    views = [e for e in events if e.kind == "view"]
    assert any("BG4" not in v.data["bgs"] for v in views)
    assert "BG4" in views[-1].data["bgs"]
    # nothing was committed by BG4 while it was cut off
    partition = next(e for e in events if e.kind == "partition")
    late = partition.tick + 2 * 200
    assert not [
        e for e in events if e.kind == "commit" and e.actor.startswith("BG4.") and late <= e.tick < heal.tick
    ]
