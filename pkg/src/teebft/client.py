"""Protocol client: submits operations and verifies replication proofs.

A client needs no trusted hardware.  A reply proves a committed quorum
with one signature verification (the leader enclave's commitment to the
sharing secret) and one hash comparison (the reconstructed secret
against that commitment).  Requests run sequentially; a timed-out
request is rebroadcast to every replica, which forwards it and starts
watching the leader.
"""

from __future__ import annotations

from typing import Optional

from .crypto import digest, secret_to_bytes
from .messages import (
    Reply, ReplyKind, Request, commitment_sign_bytes,
)

RESEND_BASE = 8     # in deltas, doubles per resend
RESEND_CAP = 64


def verify_proof(pks: dict, provider, reply: Reply) -> bool:
    cmt = reply.commitment
    if cmt.signer not in pks or cmt.counter != reply.qc.counter:
        return False
    if digest(secret_to_bytes(reply.qc.secret)) != cmt.digest:
        return False
    return provider.verify(
        pks[cmt.signer],
        commitment_sign_bytes(cmt.signer, cmt.digest, cmt.counter), cmt.sig)


class Client:
    def __init__(self, cid: int, n: int, pks: dict, provider,
                 ops: list[bytes], subscription: ReplyKind = ReplyKind.COMMITMENT,
                 leader_hint: Optional[int] = None, delta: int = 10):
        self.id = cid
        self.n = n
        self.pks = pks
        self.provider = provider
        self.ops = ops
        self.subscription = subscription
        self.leader = leader_hint
        self.delta = delta
        self.net = None
        self.rid = 0
        self.resends = 0
        self.proof_ticks: dict[int, int] = {}
        self.proofs: dict[int, Reply] = {}

    @property
    def done(self) -> bool:
        return self.rid >= len(self.ops)

    def on_timer(self, now: int, name: str) -> None:
        if self.done:
            return
        if name == "go":
            self._send(broadcast=False)
        elif name == "resend":
            self.resends += 1
            self._send(broadcast=True)

    def _send(self, broadcast: bool) -> None:
        req = Request(self.id, self.rid, self.ops[self.rid])
        if broadcast:
            for peer in range(self.n):
                self.net.send(peer, req)
        else:
            target = self.leader if self.leader is not None else 0
            self.net.send(target, req)
        self.net.trace("client_send", None, None,
                       {"rid": self.rid, "broadcast": int(broadcast)})
        scale = min(RESEND_BASE << self.resends, RESEND_CAP)
        self.net.set_timer("resend", scale * self.delta)

    def on_message(self, now: int, src: int, msg) -> None:
        if not isinstance(msg, Reply) or self.done:
            return
        if msg.client_id != self.id or msg.request_id != self.rid:
            return
        if not verify_proof(self.pks, self.provider, msg):
            self.net.trace("client_reject", msg.qc.counter, None,
                           {"rid": self.rid})
            return
        self.leader = msg.leader
        self.net.trace("client_proof", msg.qc.counter, msg.commitment.digest,
                       {"rid": self.rid, "kind": int(msg.kind)})
        if msg.kind != self.subscription:
            return                          # recorded, but not what we await
        self.proofs[self.rid] = msg
        self.proof_ticks[self.rid] = now
        self.rid += 1
        self.resends = 0
        if self.done:
            self.net.cancel_timer("resend")
        else:
            self._send(broadcast=False)
