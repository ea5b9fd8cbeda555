from rcsim.services.certs import EMPTY_ROOT, merkle_root
from rcsim.services.client import make_tx
from rcsim.services.superleaf import elect_roles, make_tb, tb_valid


def test_block_root_covers_transactions_in_order():
    txs = [make_tx("C1", i, i, b"p") for i in range(3)]
    tb = make_tb("BG1.SL1.N1", "BG1.SL1", 2, txs)
    assert tb.root == merkle_root([tx.digest for tx in txs])
    assert tb_valid(tb)
    reordered = tb.model_copy(update={"txs": tuple(reversed(txs))})
    assert not tb_valid(reordered)


def test_empty_block_is_invalid():
    tb = make_tb("BG1.SL1.N1", "BG1.SL1", 2, [])
    assert tb.root == EMPTY_ROOT
    assert not tb_valid(tb)


def test_monitor_is_lowest_live_member():
    members = ["BG1.SL1.N1", "BG1.SL1.N2", "BG1.SL1.N3"]
    roles = elect_roles(members, ["BG1.SL1.N3", "BG1.SL1.N2"], k=2)
    assert roles.monitor == "BG1.SL1.N2"
    assert roles.representatives == ("BG1.SL1.N2", "BG1.SL1.N3")
    assert roles.monitor in roles.representatives


def test_roles_ignore_unknown_and_sort_naturally():
    members = [f"BG1.SL1.N{i}" for i in (1, 2, 10)]
    roles = elect_roles(members, ["BG1.SL1.N10", "BG1.SL1.N2", "BG9.SL1.N1"], k=1)
    assert roles.live == ("BG1.SL1.N2", "BG1.SL1.N10")
    assert roles.representatives == ("BG1.SL1.N2",)


def test_few_live_members_all_represent():
    members = ["BG1.SL1.N1", "BG1.SL1.N2", "BG1.SL1.N3"]
    assert elect_roles(members, ["BG1.SL1.N3"], k=2).representatives == ("BG1.SL1.N3",)
    assert elect_roles(members, members, k=0).representatives == ("BG1.SL1.N1",)
    empty = elect_roles(members, [], k=2)
    assert empty.monitor is None and empty.representatives == ()
