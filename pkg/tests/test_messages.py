"""Canonical codec: roundtrips, determinism, pinned bytes, malformed input."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teebft.crypto import Ciphertext, Share, digest
from teebft.messages import (
    AnchorCert, CodecError, Commit, CounterValue, Decide, FetchProposals,
    LogProof, NewView, Prepare, Proposal, ProposalKind, ProposalRef, Proposals,
    QCKind, QuorumCert, Reply, ReplyKind, Request, RequestViewChange,
    SignedCounter, TransitionRecord, ViewChange, VoteForCommit, VoteForDecide,
    VoteForNewView, decode, encode, proposal_digest, qc_digest, request_digest,
)

CV = CounterValue(3, 1)
REF = ProposalRef(digest(b"ref"), CV)
SC = SignedCounter(digest(b"sc"), CV, 2, b"\x11" * 32)
PROOF = LogProof(REF, CV, 1, b"\x22" * 32)
PROOF_NONE = LogProof(None, CounterValue(0, 1), 1, b"\x23" * 32)
ANCHOR = AnchorCert(REF, 2, 1, CV, 0, b"\x33" * 32)
ANCHOR_NONE = AnchorCert(None, 2, 1, CV, 0, b"\x34" * 32)
QC = QuorumCert(QCKind.COMMIT, 123456789, CV)
CT = Ciphertext(b"\x00" * 12, b"\xaa" * 40)
SHARE = Share(2, (1 << 126) + 17)
P_MIN = Proposal(ProposalKind.REQUEST, CV, b"payload", 7, 9)
P_FULL = Proposal(
    ProposalKind.RESULT, CV, b"", 7, 9,
    prepare_ref=CounterValue(1, 1), res_digest=digest(b"res"),
    parent=digest(b"parent"), commitment=SC, leader_sig=SC,
)
NV = NewView(ANCHOR, QC)

SAMPLES = [
    Request(7, 9, b"op-bytes"),
    Prepare(P_MIN, CT, None),
    Prepare(P_FULL, CT, NV),
    VoteForCommit(CV, SHARE, 2),
    Commit(QC, P_FULL, CT),
    VoteForDecide(CV, SHARE, 0),
    Decide(QC),
    RequestViewChange(2, 1, SC, PROOF, 4),
    RequestViewChange(3, 1, None, PROOF_NONE, 4),
    ViewChange(ANCHOR, P_MIN, CT),
    VoteForNewView(CV, SHARE, 1),
    NewView(ANCHOR_NONE, QC),
    FetchProposals(3, 17),
    Proposals(2, (P_MIN, P_FULL), (TransitionRecord(ANCHOR, P_FULL, QC, (P_MIN,)),)),
    Proposals(3, (), (TransitionRecord(ANCHOR, P_MIN, None, ()),)),
    Proposals(2, (), ()),
    Reply(7, 9, ReplyKind.EXECUTION, QC, SC, b"result", 2, 1),
]


@pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
def test_roundtrip(msg):
    data = encode(msg)
    assert decode(data) == msg
    assert encode(decode(data)) == data


def test_encoding_is_deterministic():
    for msg in SAMPLES:
        assert encode(msg) == encode(msg)
    # structurally equal values built independently encode identically
    a = Request(7, 9, b"x" * 100)
    b = Request(7, 9, bytes(bytearray(b"x" * 100)))
    assert encode(a) == encode(b)


def test_pinned_wire_bytes():
    assert encode(Request(7, 9, b"op-bytes")).hex() == (
        "0107000000000000000900000000000000080000006f702d6279746573")
    assert proposal_digest(P_MIN).hex() == (
        "ffbcc2e2fc5a169c7de7539c5c59b1fcb769a7a56e75fa35afabea067306ccd7")
    assert qc_digest(QC).hex() == (
        "9872e258b8057a5ba137bc9fb757ebbd0e999d850c688e3a846c3e3b00bd9cea")
    assert request_digest(7, 9, b"op-bytes").hex() == (
        "ef7a2b299bb5a2723ff2771deb9a27e3c7787ff07fc80bc80186d62b705f20bd")


def test_proposal_digest_covers_commitment_value_not_signature():
    other_sig = SignedCounter(SC.digest, SC.counter, SC.signer, b"\x77" * 32)
    resigned = Proposal(
        P_FULL.kind, P_FULL.counter, P_FULL.payload, P_FULL.client_id,
        P_FULL.request_id, P_FULL.prepare_ref, P_FULL.res_digest,
        P_FULL.parent, commitment=other_sig, leader_sig=None,
    )
    assert proposal_digest(resigned) == proposal_digest(P_FULL)
    changed = Proposal(
        P_FULL.kind, P_FULL.counter, b"different", P_FULL.client_id,
        P_FULL.request_id, P_FULL.prepare_ref, P_FULL.res_digest,
        P_FULL.parent, commitment=SC, leader_sig=SC,
    )
    assert proposal_digest(changed) != proposal_digest(P_FULL)


@pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
def test_truncation_always_rejected(msg):
    data = encode(msg)
    for cut in range(len(data)):
        with pytest.raises(CodecError):
            decode(data[:cut])


def test_bad_tags_rejected():
    body = encode(SAMPLES[0])[1:]
    for tag in (0, 14, 99, 255):
        with pytest.raises(CodecError):
            decode(bytes([tag]) + body)
    with pytest.raises(CodecError):
        decode(b"")


def test_bad_enum_values_rejected():
    data = bytearray(encode(Decide(QC)))
    data[1] = 9          # QCKind out of range
    with pytest.raises(CodecError):
        decode(bytes(data))


def test_single_byte_mutations_never_misparse_silently():
    """A flipped byte either fails to decode or decodes to a different value.

    Equality with the original would mean the codec ignored input bytes,
    which would let tampering slip past signature checks downstream.
    """
    for msg in SAMPLES:
        data = encode(msg)
        step = max(1, len(data) // 48)
        for pos in range(0, len(data), step):
            mutated = bytearray(data)
            mutated[pos] ^= 0x01
            try:
                out = decode(bytes(mutated))
            except CodecError:
                continue
            assert out != msg


def test_trailing_garbage_rejected():
    for msg in SAMPLES[:4]:
        with pytest.raises(CodecError):
            decode(encode(msg) + b"\x00")


def test_implausible_counts_rejected():
    w = bytearray(encode(Proposals(2, (), ())))
    # proposal count field sits right after tag + for_view
    w[9:17] = (1 << 32).to_bytes(8, "little")
    with pytest.raises(CodecError):
        decode(bytes(w))


@settings(max_examples=80, deadline=None)
@given(client=st.integers(0, 2**64 - 1), rid=st.integers(0, 2**64 - 1),
       op=st.binary(max_size=200))
def test_request_roundtrip_property(client, rid, op):
    msg = Request(client, rid, op)
    assert decode(encode(msg)) == msg


@settings(max_examples=80, deadline=None)
@given(c=st.integers(0, 2**32), v=st.integers(0, 2**16),
       idx=st.integers(1, 64), val=st.integers(0, (1 << 127) - 2),
       voter=st.integers(0, 63))
def test_vote_roundtrip_property(c, v, idx, val, voter):
    msg = VoteForCommit(CounterValue(c, v), Share(idx, val), voter)
    assert decode(encode(msg)) == msg
