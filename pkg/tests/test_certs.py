import pytest

from rcsim.errors import EmptyInput
from rcsim.models.certs import Decision, FailureCertificate, Rejected, ValidityCertificate, VerifyResult
from rcsim.services.certs import (
    EMPTY_ROOT,
    DecisionLog,
    canonical,
    certify_decision,
    crypto,
    decision_digest,
    digest,
    failure_cert_verify,
    gqc_verify,
    leaf_hash,
    make_gqc,
    make_qc,
    merkle_build,
    merkle_prove,
    merkle_root,
    merkle_verify,
    order_blocks,
    qc_check,
    qc_message,
    qc_verify,
    sign_qc_share,
    suspicion_message,
    validity_verify,
)


def leaves(n):
    return [digest("leaf", i) for i in range(n)]


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 8])
def test_every_leaf_proves_membership(n):
    tree = merkle_build(leaves(n))
    for i, leaf in enumerate(leaves(n)):
        assert merkle_verify(tree.root, leaf, merkle_prove(tree, i))


def test_proof_rejects_other_leaf():
    tree = merkle_build(leaves(5))
    proof = merkle_prove(tree, 2)
    assert not merkle_verify(tree.root, digest("leaf", 3), proof)
    assert not merkle_verify(digest("other root"), digest("leaf", 2), proof)


def test_empty_tree_is_an_error():
    with pytest.raises(EmptyInput):
        merkle_build([])
    assert merkle_root([]) == EMPTY_ROOT


def test_leaf_and_node_hashes_are_separated():
    a, b = digest("a"), digest("b")
    two = merkle_root([a, b])
    # a leaf holding the two child hashes must not reproduce the internal node
    assert merkle_root([leaf_hash(a) + leaf_hash(b)]) != two


def test_prove_out_of_range():
    with pytest.raises(IndexError):
        merkle_prove(merkle_build(leaves(3)), 3)


def test_order_blocks_sorts_and_collapses_duplicates():
    r1, r2, r3 = b"\x01" * 32, b"\x02" * 32, b"\x03" * 32
    ordered = order_blocks([(r3, "c"), (r1, "a"), (r2, "b"), (r1, "dup")])
    assert ordered == [(r1, "a"), (r2, "b"), (r3, "c")]
    assert order_blocks([]) == []


def test_canonical_encoding_is_unambiguous():
    assert canonical("ab", "c") != canonical("a", "bc")
    assert canonical(1) != canonical("1")
    assert digest("x", 1) == digest("x", 1)


def _qc(layout, signers, cycle=3, kind="order"):
    root = digest("payload")
    shares = [sign_qc_share(sl, "BG1", cycle, root, kind) for sl in signers]
    return make_qc("BG1", cycle, root, shares, layout.bg_quorum("BG1"), kind=kind)


def test_qc_verifies_with_quorum(layout):
    qc = _qc(layout, layout.sls["BG1"][:3])
    assert qc_verify(qc, layout.bg_quorum("BG1"), layout.sl_directory("BG1"), bg_id="BG1", cycle=3)


def test_qc_rejections(layout):
    directory = layout.sl_directory("BG1")
    quorum = layout.bg_quorum("BG1")
    short = _qc(layout, layout.sls["BG1"][:2])
    assert qc_check(short, quorum, directory) is VerifyResult.TOO_FEW_SIGNATURES

    full = _qc(layout, layout.sls["BG1"][:3])
    assert qc_check(full, quorum, directory, cycle=4) is VerifyResult.CONTEXT_MISMATCH
    assert qc_check(full, quorum, directory, kind="report") is VerifyResult.CONTEXT_MISMATCH
    assert qc_check(full, quorum, layout.sl_directory("BG2")) is VerifyResult.UNKNOWN_SIGNER

    doubled = full.model_copy(update={"signatures": full.signatures + full.signatures[:1]})
    assert qc_check(doubled, quorum, directory) is VerifyResult.DUPLICATE_SIGNER

    moved = full.model_copy(update={"payload_root": digest("other")})
    assert qc_check(moved, quorum, directory) is VerifyResult.BAD_SIGNATURE


def test_ed25519_provider_round_trip(layout):
    crypto.use("ed25519")
    message = qc_message("BG1", 1, digest("p"))
    sig = crypto.sign("BG1.SL1", message)
    assert crypto.verify(sig, message, crypto.provider.public_key("BG1.SL1"))
    assert not crypto.verify(sig, message + b"x", crypto.provider.public_key("BG1.SL1"))
    assert not crypto.verify(sig, message, crypto.provider.public_key("BG1.SL2"))


def test_failure_certificate_needs_f_plus_one(layout):
    directory = layout.cm_directory()
    votes = [crypto.sign(f"CM.BG{i}", suspicion_message("BG2", 5)) for i in (1, 3)]
    cert = FailureCertificate(suspect_bg_id="BG2", cycle=5, signatures=tuple(votes))
    assert failure_cert_verify(cert, 1, directory)
    lone = cert.model_copy(update={"signatures": tuple(votes[:1])})
    assert not failure_cert_verify(lone, 1, directory)


def test_gqc_binds_membership(layout):
    sizes = {bg: layout.bg_quorum(bg) for bg in layout.all_bgs}
    gqc = make_gqc(1, layout.all_bgs, (33, 64), sizes, layout.all_bgs[:2])
    assert gqc_verify(gqc, 2, layout.bg_directory())
    assert not gqc_verify(gqc, 3, layout.bg_directory())
    widened = gqc.model_copy(update={"committed_cycle_range": (33, 65)})
    assert not gqc_verify(widened, 2, layout.bg_directory())


def _decision_qc(layout, decision, signers):
    root = decision_digest(decision)
    shares = [crypto.sign(s, qc_message("cm", decision.cycle, root, "decision")) for s in signers]
    return make_qc("cm", decision.cycle, root, shares, len(signers), kind="decision")


def test_first_valid_decision_wins(layout):
    replicas = [f"CM.{bg}" for bg in layout.all_bgs]
    directory = layout.cm_directory()
    log = DecisionLog()
    first = Decision(scope="cm", cycle=4, kind="REPLY", body_digest=digest("reply"))
    result = certify_decision(first, _decision_qc(layout, first, replicas[:2]), log, replicas, 1, 2, directory)
    assert isinstance(result, ValidityCertificate)
    log.record(first, True)
    assert validity_verify(result, first, 2, 1, directory)

    second = Decision(scope="cm", cycle=4, kind="DENY", body_digest=digest("deny", 4))
    rejected = certify_decision(second, _decision_qc(layout, second, replicas[:2]), log, replicas, 1, 2, directory)
    assert isinstance(rejected, Rejected)
    assert rejected.reason == "DuplicateDecision"


def test_rule_and_certificate_failures_reject(layout):
    replicas = [f"CM.{bg}" for bg in layout.all_bgs]
    directory = layout.cm_directory()
    decision = Decision(scope="cm", cycle=2, kind="REPLY", body_digest=digest("reply"))
    qc = _decision_qc(layout, decision, replicas)
    refused = certify_decision(decision, qc, DecisionLog(), replicas, 1, 2, directory, rule=lambda d, log: False)
    assert refused.reason == "InvalidDecision"

    other = decision.model_copy(update={"body_digest": digest("something else")})
    assert certify_decision(other, qc, DecisionLog(), replicas, 1, 2, directory).reason == "InvalidDecision"

    cert = certify_decision(decision, qc, DecisionLog(), replicas, 1, 2, directory)
    assert not validity_verify(cert, other, 2, 1, directory)
