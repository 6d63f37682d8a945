"""Protocol data types and the canonical wire encoding.

Every message has one binary form: fixed field order, little-endian
integers, length-prefixed byte strings.  Signatures cover these canonical
bytes, so any single-bit mutation is detectable, and traces of identical
runs are byte-identical.

Signing inputs are domain-tagged.  A proposal counter signature, a secret
commitment, a log proof and a merge anchor can never be confused for one
another even when they carry the same counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from functools import total_ordering
from typing import Optional

from .crypto import Ciphertext, Share, digest, SECRET_LEN


class CodecError(Exception):
    """Message bytes could not be decoded."""


@total_ordering
@dataclass(frozen=True)
class CounterValue:
    """Monotonic counter c within view v.  Ordering compares v first."""

    c: int
    v: int

    def _key(self) -> tuple[int, int]:
        return (self.v, self.c)

    def __lt__(self, other: "CounterValue") -> bool:
        return self._key() < other._key()

    def next(self) -> "CounterValue":
        return CounterValue(self.c + 1, self.v)


@dataclass(frozen=True)
class ProposalRef:
    digest: bytes
    counter: CounterValue


@dataclass(frozen=True)
class SignedCounter:
    """An enclave signature binding a digest to one counter value."""

    digest: bytes
    counter: CounterValue
    signer: int
    sig: bytes


@dataclass(frozen=True)
class LogProof:
    """Enclave attestation of the highest proposal this replica voted for.

    highest is None for a replica that voted for nothing in the view.
    """

    highest: Optional[ProposalRef]
    counter: CounterValue
    signer: int
    sig: bytes


@dataclass(frozen=True)
class AnchorCert:
    """Next leader's enclave signature over the merged global-highest vote."""

    ref: Optional[ProposalRef]
    target_view: int
    from_view: int
    counter: CounterValue
    signer: int
    sig: bytes


class QCKind(IntEnum):
    COMMIT = 1
    EXECUTE = 2
    NEW_VIEW = 3


@dataclass(frozen=True)
class QuorumCert:
    """A reconstructed sharing secret; knowing it proves f+1 released shares."""

    kind: QCKind
    secret: int
    counter: CounterValue


class ProposalKind(IntEnum):
    REQUEST = 1    # carries a client operation
    RESULT = 2     # binds the execution result of an earlier REQUEST slot
    NEW_VIEW = 3   # view transition control slot


@dataclass(frozen=True)
class Proposal:
    kind: ProposalKind
    counter: CounterValue
    payload: bytes
    client_id: int = 0
    request_id: int = 0
    prepare_ref: Optional[CounterValue] = None   # RESULT: slot being finalized
    res_digest: Optional[bytes] = None           # result binding, where applicable
    parent: Optional[bytes] = None               # chained mode: digest at counter-1
    commitment: Optional[SignedCounter] = None   # leader-signed hash of the secret
    leader_sig: Optional[SignedCounter] = None


# ---------------------------------------------------------------------------
# Wire messages

@dataclass(frozen=True)
class Request:
    client_id: int
    request_id: int
    op: bytes


@dataclass(frozen=True)
class Prepare:
    proposal: Proposal
    share_ct: Ciphertext
    nv: Optional["NewView"] = None   # piggybacked view transition evidence


@dataclass(frozen=True)
class VoteForCommit:
    counter: CounterValue
    share: Share
    voter: int


@dataclass(frozen=True)
class Commit:
    qc: QuorumCert
    proposal: Proposal
    share_ct: Ciphertext


@dataclass(frozen=True)
class VoteForDecide:
    counter: CounterValue
    share: Share
    voter: int


@dataclass(frozen=True)
class Decide:
    qc: QuorumCert


@dataclass(frozen=True)
class RequestViewChange:
    target_view: int
    from_view: int
    highest: Optional[SignedCounter]   # leader signature of the highest voted proposal
    proof: LogProof
    requester: int


@dataclass(frozen=True)
class ViewChange:
    anchor: AnchorCert
    proposal: Proposal
    share_ct: Ciphertext


@dataclass(frozen=True)
class VoteForNewView:
    counter: CounterValue
    share: Share
    voter: int


@dataclass(frozen=True)
class NewView:
    anchor: AnchorCert
    qc: QuorumCert


@dataclass(frozen=True)
class TransitionRecord:
    """Everything a lagging replica needs to replay one view transition.

    nv_qc is absent when the serving replica entered the view by voting
    but never saw the entry quorum complete; the anchor alone authorizes
    the transition.
    """

    anchor: AnchorCert
    nv_proposal: Proposal             # the counter-0 proposal opening the view
    nv_qc: Optional[QuorumCert]
    proposals: tuple[Proposal, ...]   # missing prefix of the old view


@dataclass(frozen=True)
class FetchProposals:
    view: int           # requester's current view
    next_counter: int   # first in-view counter the requester lacks


@dataclass(frozen=True)
class Proposals:
    for_view: int
    proposals: tuple[Proposal, ...]
    transitions: tuple[TransitionRecord, ...]


class ReplyKind(IntEnum):
    COMMITMENT = 1
    EXECUTION = 2


@dataclass(frozen=True)
class Reply:
    client_id: int
    request_id: int
    kind: ReplyKind
    qc: QuorumCert
    commitment: SignedCounter
    result: bytes
    view: int
    leader: int


MESSAGE_TYPES = (
    Request, Prepare, VoteForCommit, Commit, VoteForDecide, Decide,
    RequestViewChange, ViewChange, VoteForNewView, NewView,
    FetchProposals, Proposals, Reply,
)
_TAGS = {cls: i + 1 for i, cls in enumerate(MESSAGE_TYPES)}
_BY_TAG = {i: cls for cls, i in _TAGS.items()}


# ---------------------------------------------------------------------------
# Signing byte builders (domain separated)

def counter_sign_bytes(signer: int, x: bytes, counter: CounterValue) -> bytes:
    return b"ctr|" + _u64(signer) + _u64(counter.c) + _u64(counter.v) + x


def commitment_sign_bytes(signer: int, h: bytes, counter: CounterValue) -> bytes:
    return b"cmt|" + _u64(signer) + _u64(counter.c) + _u64(counter.v) + h


def proof_sign_bytes(signer: int, highest: Optional[ProposalRef],
                     counter: CounterValue) -> bytes:
    ref = b"\x00" if highest is None else (
        b"\x01" + highest.digest + _u64(highest.counter.c) + _u64(highest.counter.v)
    )
    return b"prf|" + _u64(signer) + _u64(counter.c) + _u64(counter.v) + ref


def anchor_sign_bytes(signer: int, ref: Optional[ProposalRef], target_view: int,
                      from_view: int, counter: CounterValue) -> bytes:
    body = b"\x00" if ref is None else (
        b"\x01" + ref.digest + _u64(ref.counter.c) + _u64(ref.counter.v)
    )
    return (b"anc|" + _u64(signer) + _u64(target_view) + _u64(from_view)
            + _u64(counter.c) + _u64(counter.v) + body)


def share_plaintext(share: Share, counter: CounterValue, h: bytes) -> bytes:
    return (_u64(share.index) + share.value.to_bytes(SECRET_LEN, "big")
            + _u64(counter.c) + _u64(counter.v) + h)


def parse_share_plaintext(raw: bytes) -> tuple[Share, CounterValue, bytes]:
    if len(raw) != 8 + SECRET_LEN + 16 + 32:
        raise CodecError("bad share plaintext length")
    idx = struct.unpack_from("<Q", raw, 0)[0]
    val = int.from_bytes(raw[8:8 + SECRET_LEN], "big")
    c, v = struct.unpack_from("<QQ", raw, 8 + SECRET_LEN)
    return Share(idx, val), CounterValue(c, v), raw[8 + SECRET_LEN + 16:]


def request_digest(client_id: int, request_id: int, op: bytes) -> bytes:
    return digest(b"req|" + _u64(client_id) + _u64(request_id) + op)


def proposal_digest(p: Proposal) -> bytes:
    """Digest covering all semantic proposal fields, commitment included."""
    w = _Writer()
    w.u8(int(p.kind))
    w.counter(p.counter)
    w.blob(p.payload)
    w.u64(p.client_id)
    w.u64(p.request_id)
    w.opt_counter(p.prepare_ref)
    w.opt_blob(p.res_digest)
    w.opt_blob(p.parent)
    if p.commitment is None:
        w.u8(0)
    else:
        w.u8(1)
        w.blob(p.commitment.digest)
        w.counter(p.commitment.counter)
    return digest(b"prp|" + w.take())


def qc_digest(qc: QuorumCert) -> bytes:
    return digest(b"qc|" + bytes([int(qc.kind)])
                  + qc.secret.to_bytes(SECRET_LEN, "big")
                  + _u64(qc.counter.c) + _u64(qc.counter.v))


# ---------------------------------------------------------------------------
# Codec internals

def _u64(x: int) -> bytes:
    return struct.pack("<Q", x)


class _Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, x: int):
        self._parts.append(struct.pack("<B", x))

    def u64(self, x: int):
        self._parts.append(struct.pack("<Q", x))

    def blob(self, b: bytes):
        self._parts.append(struct.pack("<I", len(b)))
        self._parts.append(b)

    def counter(self, cv: CounterValue):
        self.u64(cv.c)
        self.u64(cv.v)

    def opt_counter(self, cv: Optional[CounterValue]):
        if cv is None:
            self.u8(0)
        else:
            self.u8(1)
            self.counter(cv)

    def opt_blob(self, b: Optional[bytes]):
        if b is None:
            self.u8(0)
        else:
            self.u8(1)
            self.blob(b)

    def take(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _need(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CodecError("truncated message")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._need(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._need(8))[0]

    def blob(self) -> bytes:
        n = struct.unpack("<I", self._need(4))[0]
        if n > len(self._data):
            raise CodecError("blob length exceeds message")
        return self._need(n)

    def counter(self) -> CounterValue:
        c = self.u64()
        v = self.u64()
        return CounterValue(c, v)

    def opt_counter(self) -> Optional[CounterValue]:
        return self.counter() if self.u8() else None

    def opt_blob(self) -> Optional[bytes]:
        return self.blob() if self.u8() else None

    def done(self):
        if self._pos != len(self._data):
            raise CodecError("trailing bytes")


def _w_share(w: _Writer, s: Share):
    w.u64(s.index)
    w.blob(s.value.to_bytes(SECRET_LEN, "big"))


def _r_share(r: _Reader) -> Share:
    idx = r.u64()
    val = int.from_bytes(r.blob(), "big")
    return Share(idx, val)


def _w_ct(w: _Writer, ct: Ciphertext):
    w.blob(ct.nonce)
    w.blob(ct.body)


def _r_ct(r: _Reader) -> Ciphertext:
    return Ciphertext(r.blob(), r.blob())


def _w_signed_counter(w: _Writer, sc: SignedCounter):
    w.blob(sc.digest)
    w.counter(sc.counter)
    w.u64(sc.signer)
    w.blob(sc.sig)


def _r_signed_counter(r: _Reader) -> SignedCounter:
    return SignedCounter(r.blob(), r.counter(), r.u64(), r.blob())


def _w_opt_signed_counter(w: _Writer, sc: Optional[SignedCounter]):
    if sc is None:
        w.u8(0)
    else:
        w.u8(1)
        _w_signed_counter(w, sc)


def _r_opt_signed_counter(r: _Reader) -> Optional[SignedCounter]:
    return _r_signed_counter(r) if r.u8() else None


def _w_ref(w: _Writer, ref: Optional[ProposalRef]):
    if ref is None:
        w.u8(0)
    else:
        w.u8(1)
        w.blob(ref.digest)
        w.counter(ref.counter)


def _r_ref(r: _Reader) -> Optional[ProposalRef]:
    if not r.u8():
        return None
    return ProposalRef(r.blob(), r.counter())


def _w_proof(w: _Writer, p: LogProof):
    _w_ref(w, p.highest)
    w.counter(p.counter)
    w.u64(p.signer)
    w.blob(p.sig)


def _r_proof(r: _Reader) -> LogProof:
    return LogProof(_r_ref(r), r.counter(), r.u64(), r.blob())


def _w_anchor(w: _Writer, a: AnchorCert):
    _w_ref(w, a.ref)
    w.u64(a.target_view)
    w.u64(a.from_view)
    w.counter(a.counter)
    w.u64(a.signer)
    w.blob(a.sig)


def _r_anchor(r: _Reader) -> AnchorCert:
    return AnchorCert(_r_ref(r), r.u64(), r.u64(), r.counter(), r.u64(), r.blob())


def _w_qc(w: _Writer, qc: QuorumCert):
    w.u8(int(qc.kind))
    w.blob(qc.secret.to_bytes(SECRET_LEN, "big"))
    w.counter(qc.counter)


def _r_qc(r: _Reader) -> QuorumCert:
    kind = QCKind(r.u8())
    secret = int.from_bytes(r.blob(), "big")
    return QuorumCert(kind, secret, r.counter())


def _w_proposal(w: _Writer, p: Proposal):
    w.u8(int(p.kind))
    w.counter(p.counter)
    w.blob(p.payload)
    w.u64(p.client_id)
    w.u64(p.request_id)
    w.opt_counter(p.prepare_ref)
    w.opt_blob(p.res_digest)
    w.opt_blob(p.parent)
    _w_opt_signed_counter(w, p.commitment)
    _w_opt_signed_counter(w, p.leader_sig)


def _r_proposal(r: _Reader) -> Proposal:
    return Proposal(
        kind=ProposalKind(r.u8()),
        counter=r.counter(),
        payload=r.blob(),
        client_id=r.u64(),
        request_id=r.u64(),
        prepare_ref=r.opt_counter(),
        res_digest=r.opt_blob(),
        parent=r.opt_blob(),
        commitment=_r_opt_signed_counter(r),
        leader_sig=_r_opt_signed_counter(r),
    )


def _w_transition(w: _Writer, t: TransitionRecord):
    _w_anchor(w, t.anchor)
    _w_proposal(w, t.nv_proposal)
    if t.nv_qc is None:
        w.u8(0)
    else:
        w.u8(1)
        _w_qc(w, t.nv_qc)
    w.u64(len(t.proposals))
    for p in t.proposals:
        _w_proposal(w, p)


def _r_transition(r: _Reader) -> TransitionRecord:
    anchor = _r_anchor(r)
    nv_proposal = _r_proposal(r)
    nv_qc = _r_qc(r) if r.u8() else None
    n = r.u64()
    if n > 1 << 20:
        raise CodecError("transition proposal count implausible")
    return TransitionRecord(anchor, nv_proposal, nv_qc,
                            tuple(_r_proposal(r) for _ in range(n)))


def encode(msg) -> bytes:
    """Canonical bytes for any wire message."""
    w = _Writer()
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise CodecError(f"not a wire message: {type(msg).__name__}")
    w.u8(tag)
    if isinstance(msg, Request):
        w.u64(msg.client_id)
        w.u64(msg.request_id)
        w.blob(msg.op)
    elif isinstance(msg, Prepare):
        _w_proposal(w, msg.proposal)
        _w_ct(w, msg.share_ct)
        if msg.nv is None:
            w.u8(0)
        else:
            w.u8(1)
            _w_anchor(w, msg.nv.anchor)
            _w_qc(w, msg.nv.qc)
    elif isinstance(msg, (VoteForCommit, VoteForDecide, VoteForNewView)):
        w.counter(msg.counter)
        _w_share(w, msg.share)
        w.u64(msg.voter)
    elif isinstance(msg, Commit):
        _w_qc(w, msg.qc)
        _w_proposal(w, msg.proposal)
        _w_ct(w, msg.share_ct)
    elif isinstance(msg, Decide):
        _w_qc(w, msg.qc)
    elif isinstance(msg, RequestViewChange):
        w.u64(msg.target_view)
        w.u64(msg.from_view)
        _w_opt_signed_counter(w, msg.highest)
        _w_proof(w, msg.proof)
        w.u64(msg.requester)
    elif isinstance(msg, ViewChange):
        _w_anchor(w, msg.anchor)
        _w_proposal(w, msg.proposal)
        _w_ct(w, msg.share_ct)
    elif isinstance(msg, NewView):
        _w_anchor(w, msg.anchor)
        _w_qc(w, msg.qc)
    elif isinstance(msg, FetchProposals):
        w.u64(msg.view)
        w.u64(msg.next_counter)
    elif isinstance(msg, Proposals):
        w.u64(msg.for_view)
        w.u64(len(msg.proposals))
        for p in msg.proposals:
            _w_proposal(w, p)
        w.u64(len(msg.transitions))
        for t in msg.transitions:
            _w_transition(w, t)
    elif isinstance(msg, Reply):
        w.u64(msg.client_id)
        w.u64(msg.request_id)
        w.u8(int(msg.kind))
        _w_qc(w, msg.qc)
        _w_signed_counter(w, msg.commitment)
        w.blob(msg.result)
        w.u64(msg.view)
        w.u64(msg.leader)
    return w.take()


def decode(data: bytes):
    """Parse canonical bytes; raises CodecError on any malformation."""
    r = _Reader(data)
    try:
        tag = r.u8()
        cls = _BY_TAG.get(tag)
        if cls is None:
            raise CodecError(f"unknown message tag {tag}")
        if cls is Request:
            msg = Request(r.u64(), r.u64(), r.blob())
        elif cls is Prepare:
            proposal = _r_proposal(r)
            ct = _r_ct(r)
            nv = None
            if r.u8():
                nv = NewView(_r_anchor(r), _r_qc(r))
            msg = Prepare(proposal, ct, nv)
        elif cls in (VoteForCommit, VoteForDecide, VoteForNewView):
            msg = cls(r.counter(), _r_share(r), r.u64())
        elif cls is Commit:
            msg = Commit(_r_qc(r), _r_proposal(r), _r_ct(r))
        elif cls is Decide:
            msg = Decide(_r_qc(r))
        elif cls is RequestViewChange:
            msg = RequestViewChange(r.u64(), r.u64(),
                                    _r_opt_signed_counter(r), _r_proof(r), r.u64())
        elif cls is ViewChange:
            msg = ViewChange(_r_anchor(r), _r_proposal(r), _r_ct(r))
        elif cls is NewView:
            msg = NewView(_r_anchor(r), _r_qc(r))
        elif cls is FetchProposals:
            msg = FetchProposals(r.u64(), r.u64())
        elif cls is Proposals:
            for_view = r.u64()
            np = r.u64()
            if np > 1 << 20:
                raise CodecError("proposal count implausible")
            props = tuple(_r_proposal(r) for _ in range(np))
            nt = r.u64()
            if nt > 1 << 16:
                raise CodecError("transition count implausible")
            trans = tuple(_r_transition(r) for _ in range(nt))
            msg = Proposals(for_view, props, trans)
        elif cls is Reply:
            msg = Reply(r.u64(), r.u64(), ReplyKind(r.u8()), _r_qc(r),
                        _r_signed_counter(r), r.blob(), r.u64(), r.u64())
        else:  # pragma: no cover
            raise CodecError("unhandled tag")
        r.done()
        return msg
    except CodecError:
        raise
    except (ValueError, struct.error) as exc:
        raise CodecError(str(exc)) from exc
