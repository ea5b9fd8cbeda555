from rcsim.services.bg_consensus import (
    DedupBuffer,
    bg_decide,
    build_payload,
    conflicting_keys,
    forge_decision,
    payload_root,
    tamper_decision,
    verify_decision,
)
from rcsim.services.client import make_tx
from rcsim.services.superleaf import make_tb


def tb(sl, cycle, txs, n=1):
    return make_tb(f"{sl}.N{n}", sl, cycle, txs)


def test_identical_blocks_collapse():
    txs = [make_tx("C1", 1, 1, b"a")]
    block = tb("BG1.SL1", 3, txs)
    payload = build_payload("BG1", 3, {"BG1.SL1": [block], "BG1.SL2": [block]}, DedupBuffer(8))
    assert len(payload.blocks) == 1
    assert payload.participating_sls == ("BG1.SL1", "BG1.SL2")


def test_blocks_sorted_by_root_and_keys_kept_once():
    a, b, c = (make_tx(f"C{i}", 1, i, b"x") for i in range(1, 4))
    proposals = {
        "BG1.SL1": [tb("BG1.SL1", 3, [a, b])],
        "BG1.SL2": [tb("BG1.SL2", 3, [b, c])],
    }
    payload = build_payload("BG1", 3, proposals, DedupBuffer(8))
    roots = [block.root for block in payload.blocks]
    assert roots == sorted(roots)
    keys = [tx.key for block in payload.blocks for tx in block.txs]
    assert sorted(keys) == sorted([a.key, b.key, c.key])
    assert payload.root == payload_root(payload.blocks)


def test_payload_independent_of_proposal_order():
    a, b = make_tx("C1", 1, 1, b"x"), make_tx("C2", 1, 2, b"y")
    first = {"BG1.SL1": [tb("BG1.SL1", 3, [a])], "BG1.SL2": [tb("BG1.SL2", 3, [b])]}
    second = dict(reversed(list(first.items())))
    assert build_payload("BG1", 3, first, DedupBuffer(8)) == build_payload("BG1", 3, second, DedupBuffer(8))


def test_equivocating_client_is_dropped():
    a = make_tx("C1", 1, 7, b"one")
    twin = make_tx("C1", 1, 7, b"two")
    honest = make_tx("C2", 1, 1, b"ok")
    blocks = [tb("BG1.SL1", 3, [a, honest]), tb("BG1.SL2", 3, [twin])]
    assert conflicting_keys(blocks) == {("C1", 7)}
    payload = build_payload("BG1", 3, {"BG1.SL1": blocks[:1], "BG1.SL2": blocks[1:]}, DedupBuffer(8))
    assert [tx.key for block in payload.blocks for tx in block.txs] == [("C2", 1)]


def test_dedup_window_drops_recent_repeats():
    dedup = DedupBuffer(window=2)
    tx = make_tx("C1", 1, 5, b"x")
    dedup.add(tx.key, 3)
    assert dedup.contains(tx.key, 4)
    assert dedup.contains(tx.key, 5)
    assert not dedup.contains(tx.key, 6)
    assert not dedup.contains(tx.key, 3)
    payload = build_payload("BG1", 4, {"BG1.SL1": [tb("BG1.SL1", 4, [tx])]}, dedup)
    assert payload.blocks == ()
    dedup.prune(10)
    assert dedup.seen == {}


def test_invalid_transactions_and_blocks_are_dropped():
    good = make_tx("C1", 1, 1, b"x")
    bad = make_tx("C2", 1, 2, b"y").model_copy(update={"payload": b"z"})
    broken = tb("BG1.SL2", 3, [good]).model_copy(update={"root": b"\x00" * 32})
    payload = build_payload(
        "BG1", 3, {"BG1.SL1": [tb("BG1.SL1", 3, [bad, good])], "BG1.SL2": [broken]}, DedupBuffer(8)
    )
    assert [tx.key for block in payload.blocks for tx in block.txs] == [("C1", 1)]


def _decision(layout, signers=None):
    txs = [make_tx("C1", i, i, b"p") for i in range(1, 3)]
    proposals = {"BG1.SL1": [tb("BG1.SL1", 2, txs[:1])], "BG1.SL2": [tb("BG1.SL2", 2, txs[1:])]}
    return bg_decide(
        "BG1", 2, proposals, DedupBuffer(8), signers or layout.sls["BG1"][:3], layout.bg_quorum("BG1")
    )


def test_certified_decision_verifies(layout):
    decision = _decision(layout)
    assert verify_decision(decision, layout, bg_id="BG1", cycle=2)
    assert not verify_decision(decision, layout, cycle=3)
    assert not verify_decision(decision, layout, bg_id="BG2")


def test_tampered_and_forged_decisions_fail(layout):
    decision = _decision(layout)
    assert not verify_decision(tamper_decision(decision), layout)
    assert not verify_decision(forge_decision(decision, layout, ["BG1.SL4"]), layout)


def test_decision_without_quorum_fails(layout):
    assert not verify_decision(_decision(layout, layout.sls["BG1"][:2]), layout)
