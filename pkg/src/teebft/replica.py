"""Replica host: drives an attested counter enclave through replication.

The host is untrusted in the protocol model; everything here is best
effort.  Safety rests on the enclave refusing to sign, vote or anchor
outside its rules, and on quorum certificates being reconstructed
sharing secrets that only form when f+1 enclaves released their shares.

Two execution modes share one class.  Basic mode spends two voting
rounds per request: a REQUEST slot whose quorum certificate commits the
operation, then a RESULT slot whose certificate proves execution.
Pipelined mode chains REQUEST slots; the certificate formed at slot k
simultaneously acknowledges k, commits k-1 and finalizes k-2, so one
round per request suffices in steady state.
"""

from __future__ import annotations

from dataclasses import replace
from itertools import combinations, islice
from typing import Optional

from .crypto import Share, digest, reconstruct, secret_to_bytes
from .enclave import (
    EnclaveError, InsufficientQuorum, InvalidMessage, StaleBinding,
)
from .messages import (
    AnchorCert, Commit, CounterValue, Decide, FetchProposals, NewView,
    Prepare, Proposal, ProposalKind, Proposals, QCKind, QuorumCert, Reply,
    ReplyKind, Request, RequestViewChange, SignedCounter, TransitionRecord,
    ViewChange, VoteForCommit, VoteForDecide, VoteForNewView,
    commitment_sign_bytes, counter_sign_bytes, proposal_digest,
)

BUFFER_WINDOW = 64          # max counters ahead worth holding on to
FUTURE_CAP = 256            # cross-view stash bound
VC_TIMER_BASE = 16          # in deltas; doubles per failed attempt
VC_TIMER_CAP = 64           # in deltas; keeps retry cadence bounded
RECONSTRUCT_BUDGET = 512    # subset attempts before giving up on a round
SERVE_CAP = 4096            # proposals served per fetch


def apply_op(kv: dict, op: bytes) -> bytes:
    """Deterministic state machine: put / get / noop over a byte kv store."""
    if len(op) >= 1:
        tag = op[:1]
        if tag == b"P" and len(op) >= 3:
            klen = int.from_bytes(op[1:3], "big")
            if 3 + klen <= len(op):
                key, value = op[3:3 + klen], op[3 + klen:]
                kv[key] = value
                return b"ok"
        elif tag == b"G":
            return b"=" + kv.get(op[1:], b"")
        elif tag == b"N":
            return digest(op[1:])[:16]
    return b"err:badop"


def put_op(key: bytes, value: bytes) -> bytes:
    return b"P" + len(key).to_bytes(2, "big") + key + value


def get_op(key: bytes) -> bytes:
    return b"G" + key


def noop_op(payload: bytes) -> bytes:
    return b"N" + payload


class Replica:
    def __init__(self, rid: int, n: int, f: int, enclave, pks: dict,
                 genesis: bytes, provider, mode: str = "basic",
                 reply_commit: bool = True, reply_exec: bool = False):
        self.id = rid
        self.n, self.f = n, f
        self.enclave = enclave
        self.pks = pks
        self.genesis = genesis
        self.provider = provider
        self.mode = mode
        self.reply_commit = reply_commit
        self.reply_exec = reply_exec
        self.net = None                      # NodeHandle, wired by the world
        self.delta = 10

        self.view = 0
        self.r2 = genesis                    # election digest for this view
        self.leader = enclave.elect_leader(0, genesis)

        # log and certificates
        self.proposals: dict[int, dict[int, Proposal]] = {0: {}}
        self.commit_qcs: dict[CounterValue, QuorumCert] = {}
        self.execute_qcs: dict[CounterValue, QuorumCert] = {}
        self.nv_qcs: dict[int, QuorumCert] = {}
        self.transitions: dict[int, TransitionRecord] = {}   # by target view

        # execution state
        self.kv: dict[bytes, bytes] = {}
        self.applied: dict[tuple[int, int], bytes] = {}      # request dedup
        self.executed: set[CounterValue] = set()
        self.results: dict[CounterValue, bytes] = {}
        self.proofs: dict[tuple[int, int], Reply] = {}       # commitment
        self.proofs_exec: dict[tuple[int, int], Reply] = {}  # execution

        # leader round state
        self.pending: list[tuple[int, int, bytes]] = []
        self.pending_keys: set[tuple[int, int]] = set()
        self.inflight_keys: set[tuple[int, int]] = set()
        self.open_rounds: dict[CounterValue, QCKind] = {}
        self.round_shares: dict[CounterValue, dict[int, Share]] = {}
        self.first_nv: Optional[NewView] = None              # piggyback once
        self.chain_qcs: dict[int, QuorumCert] = {}           # pipelined, by c
        self.flushed_to = -1                                 # pipelined tail

        # follower state
        self.buffered: dict[int, object] = {}                # in-view, by c
        self.future: dict[tuple[int, int], object] = {}      # (view, c)
        self.watch: dict[tuple[int, int], int] = {}
        self.stash_ops: dict[tuple[int, int], bytes] = {}    # unserved payloads
        self.last_vote_ctx: Optional[tuple[SignedCounter, object]] = None
        self.last_voted_sc: Optional[SignedCounter] = None

        # view change state
        self.vc_attempt = 0
        self.vc_reqs: dict[int, dict[int, tuple]] = {}
        self.proof_cache: Optional[tuple] = None             # (view, lv, sc, proof)
        self.pending_anchor: Optional[tuple[int, AnchorCert]] = None
        self.pending_vc: dict[int, ViewChange] = {}
        self.stashed_reqs: list[RequestViewChange] = []
        self.current_anchor: Optional[AnchorCert] = None
        self._last_fetch = -10**9
        self._vc_fetched: set[tuple[int, int, int]] = set()

    # ------------------------------------------------------------------ util

    def is_leader(self) -> bool:
        return self.leader == self.id

    def _others(self):
        return [i for i in range(self.n) if i != self.id]

    def _trace(self, kind: str, counter=None, dg=None, note=None) -> None:
        self.net.trace(kind, counter, dg, note or {})

    def _refuse(self, why: str, counter=None) -> None:
        self._trace("refuse", counter, None, {"why": why})

    def _host_valid_proposal(self, p: Proposal, signer: int) -> bool:
        """Checks a host can do without the enclave: signatures and shape."""
        if p.leader_sig is None or p.commitment is None:
            return False
        sig, cmt = p.leader_sig, p.commitment
        if sig.signer != signer or cmt.signer != signer:
            return False
        if sig.counter != p.counter or cmt.counter != p.counter:
            return False
        if sig.digest != proposal_digest(p):
            return False
        if not self.provider.verify(
                self.pks[signer],
                counter_sign_bytes(signer, sig.digest, sig.counter), sig.sig):
            return False
        return self.provider.verify(
            self.pks[signer],
            commitment_sign_bytes(signer, cmt.digest, cmt.counter), cmt.sig)

    def _admit(self, p: Proposal) -> None:
        self.proposals.setdefault(p.counter.v, {})[p.counter.c] = p
        if p.kind == ProposalKind.REQUEST and p.client_id != 0:
            key = (p.client_id, p.request_id)
            self.inflight_keys.add(key)
            if key not in self.applied:
                self.watch.setdefault(key, self.net.now)

    # ------------------------------------------------------------- dispatch

    def on_message(self, now: int, src: int, msg) -> None:
        handler = self._HANDLERS.get(type(msg))
        if handler is None:
            return
        try:
            handler(self, now, src, msg)
        except EnclaveError as exc:
            self._refuse(type(exc).__name__)

    def on_timer(self, now: int, name: str) -> None:
        if name != "vc":
            return
        if not self._busy():
            self.vc_attempt = 0
            return
        try:
            self.request_view_change("timeout")
        except EnclaveError as exc:
            self._refuse(type(exc).__name__)
            self._arm_vc_timer()

    def _busy(self) -> bool:
        return bool(self.watch or self.pending or self.open_rounds
                    or self.pending_anchor or self.pending_vc)

    def _arm_vc_timer(self) -> None:
        scale = min(VC_TIMER_BASE << self.vc_attempt, VC_TIMER_CAP)
        self.net.set_timer("vc", scale * self.delta)

    def _settle_timer(self) -> None:
        if self._busy():
            self._arm_vc_timer()
        else:
            self.net.cancel_timer("vc")
            self.vc_attempt = 0

    # ------------------------------------------------------------- requests

    def _on_request(self, now, src, msg: Request) -> None:
        key = (msg.client_id, msg.request_id)
        stored = self.proofs_exec.get(key) if self.reply_exec else None
        stored = stored or self.proofs.get(key)
        if stored is not None:
            self.net.send(msg.client_id, stored)
            return
        if self.is_leader():
            if key in self.pending_keys or key in self.inflight_keys:
                return
            self.pending.append((msg.client_id, msg.request_id, msg.op))
            self.pending_keys.add(key)
            self._drive_leader()
            self._arm_vc_timer()
        else:
            fresh = key not in self.watch
            self.watch.setdefault(key, now)
            if len(self.stash_ops) < FUTURE_CAP:
                self.stash_ops.setdefault(key, msg.op)
            if self.leader is not None and self.leader != self.id:
                self.net.send(self.leader, msg)
            if fresh:
                self._arm_vc_timer()

    # ---------------------------------------------------------- leader side

    def _drive_leader(self) -> None:
        if not self.is_leader():
            return
        if self.mode == "pipelined":
            self._drive_pipeline()
            return
        if any(k == QCKind.COMMIT for k in self.open_rounds.values()):
            return
        if any(k == QCKind.NEW_VIEW for k in self.open_rounds.values()):
            return
        if not self.pending:
            return
        cid, rid, op = self.pending.pop(0)
        self.pending_keys.discard((cid, rid))
        self._propose(ProposalKind.REQUEST, op, cid, rid)

    def _propose(self, kind: ProposalKind, payload: bytes, cid: int, rid: int,
                 prepare_ref=None, res_digest=None, parent=None,
                 via_commit: Optional[QuorumCert] = None) -> Proposal:
        c, v = self.enclave.counter, self.view
        cv = CounterValue(c, v)
        env = self.enclave.generate_secret(c, v)
        p0 = Proposal(kind, cv, payload, cid, rid, prepare_ref, res_digest,
                      parent, env.commitment, None)
        sc = self.enclave.create_counter(proposal_digest(p0))
        p = replace(p0, leader_sig=sc)
        self._admit(p)
        self.last_voted_sc = sc
        round_kind = {ProposalKind.REQUEST: QCKind.COMMIT,
                      ProposalKind.RESULT: QCKind.EXECUTE,
                      ProposalKind.NEW_VIEW: QCKind.NEW_VIEW}[kind]
        self.open_rounds[cv] = round_kind
        self.round_shares[cv] = {self.id: env.own_share}
        for peer in self._others():
            ct = env.shares_ct[peer]
            if via_commit is not None:
                self.net.send(peer, Commit(via_commit, p, ct))
            else:
                self.net.send(peer, Prepare(p, ct, self.first_nv))
        self.first_nv = None
        self._arm_vc_timer()
        return p

    def _collect_share(self, src: int, counter: CounterValue, share: Share,
                       expect: QCKind) -> None:
        if not self.is_leader() or counter.v != self.view:
            return
        if self.open_rounds.get(counter) != expect:
            return
        if share.index != src + 1:
            return
        shares = self.round_shares[counter]
        if src in shares:
            return
        shares[src] = share
        if len(shares) >= self.f + 1:
            self._try_qc(counter, expect)

    def _on_vote_commit(self, now, src, msg: VoteForCommit) -> None:
        self._collect_share(src, msg.counter, msg.share, QCKind.COMMIT)

    def _on_vote_decide(self, now, src, msg: VoteForDecide) -> None:
        self._collect_share(src, msg.counter, msg.share, QCKind.EXECUTE)

    def _on_vote_new_view(self, now, src, msg: VoteForNewView) -> None:
        self._collect_share(src, msg.counter, msg.share, QCKind.NEW_VIEW)

    def _try_qc(self, cv: CounterValue, kind: QCKind) -> None:
        shares = list(self.round_shares[cv].values())
        h = self.proposals[cv.v][cv.c].commitment.digest
        secret = None
        for combo in islice(combinations(shares, self.f + 1),
                            RECONSTRUCT_BUDGET):
            cand = reconstruct(list(combo), self.f + 1)
            if digest(secret_to_bytes(cand)) == h:
                secret = cand
                break
        if secret is None:
            return                          # forged share somewhere: wait
        qc = QuorumCert(kind, secret, cv)
        del self.open_rounds[cv]
        del self.round_shares[cv]
        self._trace("qc", cv, digest(secret_to_bytes(secret)),
                    {"kind": int(kind)})
        if self.mode == "pipelined" and kind != QCKind.EXECUTE:
            self._pipeline_qc(cv, qc)
        elif kind == QCKind.COMMIT:
            self._leader_committed(cv, qc)
        elif kind == QCKind.EXECUTE:
            self._leader_decided(cv, qc)
        else:
            self._leader_nv_done(cv, qc)

    def _make_reply(self, p_req: Proposal, qc: QuorumCert,
                    cmt: SignedCounter, kind: ReplyKind,
                    result: bytes) -> Reply:
        return Reply(p_req.client_id, p_req.request_id, kind, qc, cmt,
                     result, self.view, self.leader)

    def _leader_committed(self, cv: CounterValue, qc: QuorumCert) -> None:
        self.commit_qcs[cv] = qc
        p_req = self.proposals[cv.v][cv.c]
        result = self._execute_slot(p_req)
        reply = self._make_reply(p_req, qc, p_req.commitment,
                                 ReplyKind.COMMITMENT, result)
        self.proofs[(p_req.client_id, p_req.request_id)] = reply
        self._propose(ProposalKind.RESULT, b"", p_req.client_id,
                      p_req.request_id, prepare_ref=cv,
                      res_digest=digest(result),
                      via_commit=qc)
        if self.reply_commit and p_req.client_id:
            self.net.send(p_req.client_id, reply)
        self._drive_leader()

    def _leader_decided(self, cv: CounterValue, qc: QuorumCert) -> None:
        self.execute_qcs[cv] = qc
        for peer in self._others():
            self.net.send(peer, Decide(qc))
        p2 = self.proposals[cv.v][cv.c]
        p_req = self.proposals[p2.prepare_ref.v].get(p2.prepare_ref.c)
        if p_req is not None and p_req.client_id:
            reply = self._make_reply(p_req, qc, p2.commitment,
                                     ReplyKind.EXECUTION,
                                     self.results.get(p2.prepare_ref, b""))
            self.proofs_exec[(p_req.client_id, p_req.request_id)] = reply
            if self.reply_exec:
                self.net.send(p_req.client_id, reply)
        self._settle_timer()

    # ------------------------------------------------------- follower, basic

    def _expected(self) -> int:
        return self.enclave.counter

    def _cast_vote(self, p: Proposal, share_ct, reply_cls, dst: int) -> bool:
        """Host checks then an enclave vote; True when the vote was sent."""
        if not self._host_valid_proposal(p, self.leader):
            self._refuse("bad-proposal", p.counter)
            return False
        try:
            share = self.enclave.verify_counter(p.leader_sig, share_ct)
        except EnclaveError as exc:
            self._refuse(type(exc).__name__, p.counter)
            return False
        self._admit(p)
        self.last_vote_ctx = (p.leader_sig, share_ct)
        self.last_voted_sc = p.leader_sig
        self.net.send(dst, reply_cls(p.counter, share, self.id))
        self._arm_vc_timer()
        return True

    def _buffer_ahead(self, c: int, msg) -> bool:
        if self._expected() < c <= self._expected() + BUFFER_WINDOW:
            self.buffered.setdefault(c, msg)
            return True
        return False

    def _stash_future(self, v: int, c: int, msg) -> None:
        if len(self.future) < FUTURE_CAP:
            self.future.setdefault((v, c), msg)

    def _on_prepare(self, now, src, msg: Prepare) -> None:
        if msg.nv is not None:
            self._absorb_new_view(src, msg.nv)
        p = msg.proposal
        cv = p.counter
        if cv.v != self.view:
            if cv.v > self.view:
                self._stash_future(cv.v, cv.c, msg)
                self._start_catchup(src)
            return
        if self.is_leader() or cv.c in self.proposals.get(cv.v, {}):
            return
        if cv.c != self._expected():
            if not self._buffer_ahead(cv.c, msg):
                self._refuse("out-of-window", cv)
            return
        if self.mode == "pipelined" and not self._chain_ok(p):
            return
        if self._cast_vote(p, msg.share_ct, VoteForCommit, self.leader):
            self._drain()

    def _on_commit(self, now, src, msg: Commit) -> None:
        if self.mode == "pipelined":
            self._on_commit_pipelined(now, src, msg)
            return
        qc, p2 = msg.qc, msg.proposal
        cv, cv2 = qc.counter, p2.counter
        if cv2.v != self.view:
            if cv2.v > self.view:
                self._stash_future(cv2.v, cv2.c, msg)
                self._start_catchup(src)
            return
        if self.is_leader():
            return
        if qc.kind != QCKind.COMMIT or cv.v != self.view or cv2 != cv.next():
            self._refuse("bad-commit-shape", cv2)
            return
        if cv2.c in self.proposals.get(self.view, {}):
            return
        if cv2.c != self._expected():
            if not self._buffer_ahead(cv2.c, msg):
                self._refuse("out-of-window", cv2)
            return
        p_req = self.proposals[self.view].get(cv.c)
        if p_req is None:
            self._refuse("missing-request-slot", cv)
            return
        if not self._host_valid_proposal(p2, self.leader):
            self._refuse("bad-proposal", cv2)
            return
        if digest(secret_to_bytes(qc.secret)) != p_req.commitment.digest:
            # a leader-signed round carrying a secret that does not match
            # the commitment: provable leader fault
            self.request_view_change("bad-qc")
            return
        self.commit_qcs[cv] = qc
        result = self._execute_slot(p_req)
        key = (p_req.client_id, p_req.request_id)
        if p_req.client_id:
            self.proofs[key] = self._make_reply(
                p_req, qc, p_req.commitment, ReplyKind.COMMITMENT, result)
        if digest(result) != p2.res_digest:
            self.request_view_change("result-divergence")
            return
        if self._cast_vote(p2, msg.share_ct, VoteForDecide, self.leader):
            self._drain()

    def _on_decide(self, now, src, msg: Decide) -> None:
        qc = msg.qc
        cv = qc.counter
        if cv.v != self.view:
            if cv.v > self.view:
                self._start_catchup(src)
            return
        if self.mode == "pipelined":
            self._pipeline_evidence(cv.c, qc)
            return
        p2 = self.proposals.get(cv.v, {}).get(cv.c)
        if p2 is None or qc.kind != QCKind.EXECUTE:
            return
        if digest(secret_to_bytes(qc.secret)) != p2.commitment.digest:
            self._refuse("stale-decide", cv)
            return
        self.execute_qcs[cv] = qc
        if p2.prepare_ref is not None:
            p_req = self.proposals.get(p2.prepare_ref.v, {}).get(p2.prepare_ref.c)
            if p_req is not None and p_req.client_id:
                self.proofs_exec[(p_req.client_id, p_req.request_id)] = \
                    self._make_reply(p_req, qc, p2.commitment,
                                     ReplyKind.EXECUTION,
                                     self.results.get(p2.prepare_ref, b""))
        self._settle_timer()

    def _drain(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            msg = self.buffered.pop(self._expected(), None)
            if msg is None:
                break
            before = self._expected()
            if isinstance(msg, Prepare):
                self._on_prepare(self.net.now, self.leader, msg)
            else:
                self._on_commit(self.net.now, self.leader, msg)
            progressed = self._expected() > before

    # ------------------------------------------------------------ execution

    def _execute_slot(self, p: Proposal) -> bytes:
        if p.counter in self.executed:
            return self.results[p.counter]
        key = (p.client_id, p.request_id)
        if p.client_id and key in self.applied:
            result = self.applied[key]           # exactly-once re-proposal
        else:
            result = apply_op(self.kv, p.payload)
            if p.client_id:
                self.applied[key] = result
        self.executed.add(p.counter)
        self.results[p.counter] = result
        self.watch.pop(key, None)
        self.stash_ops.pop(key, None)
        dg = p.leader_sig.digest if p.leader_sig else None
        self._trace("execute", p.counter, dg,
                    {"res": digest(result).hex()[:16], "client": p.client_id,
                     "rid": p.request_id})
        return result

    def _execute_prefix(self, anchor: AnchorCert) -> None:
        """Adopt the decided prefix of the view being left."""
        if anchor.ref is None:
            return
        view_log = self.proposals.get(anchor.from_view, {})
        for c in range(anchor.ref.counter.c + 1):
            p = view_log.get(c)
            if p is not None and p.kind == ProposalKind.REQUEST:
                self._execute_slot(p)

    # ----------------------------------------------------------- view change

    def request_view_change(self, reason: str) -> None:
        if self.vc_attempt > 0 and reason != "timeout":
            return                          # an attempt is already running
        self.vc_attempt += 1
        target = self.view + self.vc_attempt
        nl = self.enclave.elect_leader(target, self.r2)
        self._trace("elect", None, None,
                    {"target": target, "leader": nl, "from": self.view})
        entry = self._current_proof()
        if entry is None:
            self._refuse("no-attestable-vote")
            self._arm_vc_timer()
            return
        highest_sc, proof = entry
        self._trace("vc_request", proof.counter, None,
                    {"target": target, "why": reason})
        req = RequestViewChange(target, self.view, highest_sc, proof, self.id)
        if nl == self.id:
            self._vc_collect(target, self.id, highest_sc, proof)
        else:
            self.net.send(nl, req)
        self._arm_vc_timer()

    def _current_proof(self) -> Optional[tuple[Optional[SignedCounter], object]]:
        """Attested (highest vote, log proof) pair, or None if unattestable.

        The enclave only proves the exact counter it pinned at the last
        vote.  A host that cannot produce that proposal's signed counter
        (burned counters, or the record aged out) has no valid entry to
        contribute and must abstain.
        """
        lv = self.enclave.last_validated
        if self.proof_cache is not None:
            c_view, c_lv, c_sc, c_proof = self.proof_cache
            if c_view == self.view and c_lv == lv:
                return c_sc, c_proof
        highest_sc = None
        if lv is not None:
            rec = self.proposals.get(lv.v, {}).get(lv.c)
            highest_sc = rec.leader_sig if rec is not None else self.last_voted_sc
            if highest_sc is None or highest_sc.counter != lv:
                return None
        try:
            proof = self.enclave.get_highest_message(highest_sc)
        except EnclaveError:
            return None
        self.proof_cache = (self.view, lv, highest_sc, proof)
        return highest_sc, proof

    def _on_request_view_change(self, now, src, msg: RequestViewChange) -> None:
        if msg.from_view > self.view:
            if len(self.stashed_reqs) < 64:
                self.stashed_reqs.append(msg)
            self._start_catchup(src)
            return
        if msg.from_view < self.view:
            self._serve(src, msg.from_view, 0)
            return
        if msg.target_view <= self.view:
            return
        nl = self.enclave.elect_leader(msg.target_view, self.r2)
        if nl != self.id:
            return
        self._vc_collect(msg.target_view, msg.requester, msg.highest, msg.proof)

    def _vc_collect(self, target: int, requester: int,
                    highest: Optional[SignedCounter], proof) -> None:
        bucket = self.vc_reqs.setdefault(target, {})
        bucket.setdefault(requester, (highest, proof))
        if self.id not in bucket:
            own = self._current_proof()
            if own is not None:
                bucket[self.id] = own
        self._try_merge(target)

    def _try_merge(self, target: int) -> None:
        """Merge once f+1 entries have their referenced prefixes in hand.

        A byzantine requester can attest a reference sitting above counters
        it burned without proposing; those slots are unfillable, so waiting
        for them would wedge the transition.  Entries only join the merge
        once every old-view slot at or below their reference is held, which
        keeps committed slots retrievable (any f+1 valid entries intersect
        every release quorum) while unfillable references are simply left
        out.
        """
        if target <= self.view or target in self.transitions:
            return
        bucket = self.vc_reqs.get(target, {})
        eligible, blocked = [], []
        for requester, (highest, proof) in bucket.items():
            gap = (None if highest is None
                   else self._missing_below(highest.counter.c))
            if gap is None:
                eligible.append((highest, proof))
            else:
                blocked.append((requester, gap))
        if len(eligible) < self.f + 1:
            for requester, gap in blocked:
                self._fetch_slot(target, requester, gap)
            return
        try:
            anchor = self.enclave.merge_highest_messages(eligible, target)
        except (InsufficientQuorum, InvalidMessage, StaleBinding):
            return
        self._anchor_ready(target, anchor)

    def _fetch_slot(self, target: int, requester: int, gap: int) -> None:
        if requester == self.id:
            return
        key = (target, requester, gap)
        if key in self._vc_fetched:
            return
        self._vc_fetched.add(key)
        self.net.send(requester, FetchProposals(self.view, gap))

    def _missing_below(self, limit_c: int) -> Optional[int]:
        view_log = self.proposals.get(self.view, {})
        for c in range(limit_c + 1):
            if c not in view_log:
                return c
        return None

    def _anchor_ready(self, target: int, anchor: AnchorCert) -> None:
        if anchor.ref is not None:
            missing = self._missing_below(anchor.ref.counter.c)
            if missing is not None:
                self.pending_anchor = (target, anchor)
                self._fetch_from_quorum(target, missing)
                return
        self._complete_leader_transition(target, anchor)

    def _fetch_from_quorum(self, target: int, missing: int) -> None:
        for requester in self.vc_reqs.get(target, {}):
            if requester != self.id:
                self.net.send(requester, FetchProposals(self.view, missing))
                return

    def _old_view_requests(self, old_view: int) -> list[Proposal]:
        log = self.proposals.get(old_view, {})
        return [log[c] for c in sorted(log)
                if log[c].kind == ProposalKind.REQUEST and log[c].client_id]

    def _complete_leader_transition(self, target: int,
                                    anchor: AnchorCert) -> None:
        old_view = self.view
        self._execute_prefix(anchor)
        self.enclave.sync_with_highest(anchor)
        for _ in range(target - old_view):
            self.enclave.update_view()
        carry = self._old_view_requests(old_view)
        prefix = self._prefix_tuple(old_view, anchor)
        self._enter_view(target, self.id, None)
        env_p = self._propose_new_view(anchor)
        self.r2 = env_p.commitment.digest
        self.current_anchor = anchor
        self.transitions[target] = TransitionRecord(
            anchor, env_p, None, prefix)
        for p_old in carry:
            key = (p_old.client_id, p_old.request_id)
            if key not in self.pending_keys:
                self.pending.append((p_old.client_id, p_old.request_id,
                                     p_old.payload))
                self.pending_keys.add(key)
        self._arm_vc_timer()

    def _prefix_tuple(self, old_view: int, anchor: AnchorCert):
        if anchor.ref is None:
            return ()
        log = self.proposals.get(old_view, {})
        return tuple(log[c] for c in range(anchor.ref.counter.c + 1)
                     if c in log)

    def _propose_new_view(self, anchor: AnchorCert) -> Proposal:
        c, v = self.enclave.counter, self.view
        cv = CounterValue(c, v)
        env = self.enclave.generate_secret(c, v)
        p0 = Proposal(ProposalKind.NEW_VIEW, cv, anchor.sig,
                      commitment=env.commitment)
        sc = self.enclave.create_counter(proposal_digest(p0))
        p = replace(p0, leader_sig=sc)
        self._admit(p)
        self.last_voted_sc = sc
        self.open_rounds[cv] = QCKind.NEW_VIEW
        self.round_shares[cv] = {self.id: env.own_share}
        for peer in self._others():
            self.net.send(peer, ViewChange(anchor, p, env.shares_ct[peer]))
        return p

    def _leader_nv_done(self, cv: CounterValue, qc: QuorumCert) -> None:
        self.nv_qcs[self.view] = qc
        self.chain_qcs[cv.c] = qc
        rec = self.transitions.get(self.view)
        if rec is not None:
            self.transitions[self.view] = replace(rec, nv_qc=qc)
        nv = NewView(self.current_anchor, qc)
        for peer in self._others():
            self.net.send(peer, nv)
        self.first_nv = nv
        self._drive_leader()
        self._settle_timer()

    def _on_view_change(self, now, src, msg: ViewChange) -> None:
        anchor, p = msg.anchor, msg.proposal
        target = anchor.target_view
        if target <= self.view:
            return
        if anchor.from_view != self.view:
            if anchor.from_view > self.view:
                self.pending_vc.setdefault(target, msg)
                self._start_catchup(src)
            return
        nl = self.enclave.elect_leader(target, self.r2)
        if nl != anchor.signer:
            self._refuse("anchor-not-from-elected-leader")
            return
        if (p.kind != ProposalKind.NEW_VIEW
                or p.counter != CounterValue(0, target)
                or not self._host_valid_proposal(p, nl)):
            self._refuse("bad-nv-proposal", p.counter)
            return
        if anchor.ref is not None:
            missing = self._missing_below(anchor.ref.counter.c)
            if missing is not None:
                self.pending_vc[target] = msg
                self._start_catchup(src, missing)
                return
        self.pending_vc.pop(target, None)
        old_view = self.view
        self._execute_prefix(anchor)
        try:
            self.enclave.sync_with_highest(anchor)
        except EnclaveError as exc:
            self._refuse(type(exc).__name__, p.counter)
            return
        for _ in range(target - old_view):
            self.enclave.update_view()
        prefix = self._prefix_tuple(old_view, anchor)
        self._enter_view(target, nl, p.commitment.digest)
        self.transitions[target] = TransitionRecord(
            anchor, p, None, prefix)
        self.current_anchor = anchor
        self._cast_vote(p, msg.share_ct, VoteForNewView, nl)
        self._retry_future()

    def _enter_view(self, target: int, leader: int, r2: Optional[bytes]):
        from_view = self.view
        self.view = target
        self.leader = leader
        if r2 is not None:
            self.r2 = r2
        self.vc_attempt = 0
        self.vc_reqs.clear()
        self.proof_cache = None
        self.pending_anchor = None
        self.buffered.clear()
        self.open_rounds.clear()
        self.round_shares.clear()
        self.chain_qcs.clear()
        # uncommitted proposals of dead views are void: a request admitted
        # there must be proposable again or it starves under the new leader
        self.inflight_keys.clear()
        self.proposals.setdefault(target, {})
        for v in [v for v in self.proposals if v not in (from_view, target)]:
            del self.proposals[v]
        # keep pending_vc[target]: the share ciphertext for the opening vote
        # travels only in the ViewChange, which may land after the entry
        for t in [t for t in self.pending_vc if t < target]:
            del self.pending_vc[t]
        self._rehome_stashed()
        self._trace("view", None, None, {"view": target, "leader": leader})
        self._settle_timer()

    def _rehome_stashed(self) -> None:
        """Requests seen but never served chase the new leader."""
        for key, op in list(self.stash_ops.items()):
            if key in self.applied:
                del self.stash_ops[key]
            elif self.is_leader():
                if key not in self.pending_keys:
                    self.pending.append((key[0], key[1], op))
                    self.pending_keys.add(key)
            else:
                self.net.send(self.leader, Request(key[0], key[1], op))

    def _retry_future(self) -> None:
        keys = sorted(k for k in self.future if k[0] == self.view)
        for key in keys:
            msg = self.future.pop(key)
            self.on_message(self.net.now, self.leader, msg)
        for key in [k for k in self.future if k[0] < self.view]:
            del self.future[key]
        reqs, self.stashed_reqs = self.stashed_reqs, []
        for req in reqs:
            self.on_message(self.net.now, req.requester, req)

    def _vote_pending_nv(self) -> None:
        """Vote for the current view's opening proposal after a late entry.

        A replica can enter the target view through a transition record
        before handling the ViewChange itself; its share ciphertext only
        travels in the ViewChange, so the opening vote is cast here once
        both sides have arrived.
        """
        msg = self.pending_vc.get(self.view)
        if msg is None:
            return
        del self.pending_vc[self.view]
        p = msg.proposal
        if (msg.anchor.signer != self.leader
                or p.kind != ProposalKind.NEW_VIEW
                or p.counter != CounterValue(0, self.view)
                or not self._host_valid_proposal(p, self.leader)):
            return
        if p.counter.c not in self.proposals.get(self.view, {}):
            self._admit(p)
        self._cast_vote(p, msg.share_ct, VoteForNewView, self.leader)

    def _absorb_new_view(self, src: int, nv: NewView) -> None:
        target = nv.anchor.target_view
        if target < self.view:
            return
        if target > self.view:
            self._start_catchup(src)
            return
        if self.view in self.nv_qcs:
            return
        p = self.proposals.get(self.view, {}).get(0)
        if p is None or p.kind != ProposalKind.NEW_VIEW:
            return
        qc = nv.qc
        if (qc.kind == QCKind.NEW_VIEW and qc.counter == CounterValue(0, target)
                and digest(secret_to_bytes(qc.secret)) == p.commitment.digest):
            self.nv_qcs[target] = qc
            self.chain_qcs[0] = qc
            rec = self.transitions.get(target)
            if rec is not None and rec.nv_qc is None:
                self.transitions[target] = replace(rec, nv_qc=qc)
            self._settle_timer()

    def _on_new_view(self, now, src, msg: NewView) -> None:
        self._absorb_new_view(src, msg)

    # ------------------------------------------------------------- catch-up

    def _start_catchup(self, src: int, missing: Optional[int] = None) -> None:
        if self.net.now - self._last_fetch < self.delta:
            return
        self._last_fetch = self.net.now
        if missing is None:
            missing = self._missing_below(
                max(self.proposals.get(self.view, {}), default=-1))
            if missing is None:
                missing = len(self.proposals.get(self.view, {}))
        self.net.send(src, FetchProposals(self.view, missing))

    def _serve(self, dst: int, for_view: int, next_counter: int) -> None:
        log = self.proposals.get(for_view, {})
        props = tuple(log[c] for c in sorted(log)
                      if c >= next_counter)[:SERVE_CAP]
        trans = tuple(self.transitions[t] for t in sorted(self.transitions)
                      if self.transitions[t].anchor.from_view >= for_view)
        self.net.send(dst, Proposals(for_view, props, trans))

    def _on_fetch_proposals(self, now, src, msg: FetchProposals) -> None:
        self._serve(src, msg.view, msg.next_counter)

    def _on_proposals(self, now, src, msg: Proposals) -> None:
        if msg.for_view == self.view:
            for p in msg.proposals:
                self._adopt_foreign(p)
        for rec in sorted(msg.transitions,
                          key=lambda r: r.anchor.from_view):
            if rec.anchor.from_view == self.view:
                self._apply_transition(src, rec)
        target = self.view
        if self.pending_anchor is not None and self.pending_anchor[0] > target:
            t, anchor = self.pending_anchor
            self.pending_anchor = None
            self._anchor_ready(t, anchor)
        for open_target in sorted(self.vc_reqs):
            if open_target > self.view:
                self._try_merge(open_target)
        vc = self.pending_vc.get(min(self.pending_vc), None) \
            if self.pending_vc else None
        if vc is not None and vc.anchor.from_view == self.view:
            self._on_view_change(now, src, vc)
        self._vote_pending_nv()
        self._retry_future()
        self._drain()

    def _adopt_foreign(self, p: Proposal) -> None:
        cv = p.counter
        if cv.v != self.view or cv.c in self.proposals.get(cv.v, {}):
            return
        if self._host_valid_proposal(p, self.leader):
            self._admit(p)

    def _apply_transition(self, src: int, rec: TransitionRecord) -> None:
        anchor = rec.anchor
        target = anchor.target_view
        if target <= self.view or anchor.from_view != self.view:
            return
        nl = self.enclave.elect_leader(target, self.r2)
        if nl != anchor.signer:
            self._refuse("transition-wrong-leader")
            return
        nvp = rec.nv_proposal
        if (nvp.kind != ProposalKind.NEW_VIEW
                or nvp.counter != CounterValue(0, target)
                or not self._host_valid_proposal(nvp, nl)):
            self._refuse("transition-bad-proposal")
            return
        cmt = nvp.commitment
        if rec.nv_qc is not None:
            qc = rec.nv_qc
            if (qc.kind != QCKind.NEW_VIEW
                    or qc.counter != CounterValue(0, target)
                    or digest(secret_to_bytes(qc.secret)) != cmt.digest):
                self._refuse("transition-bad-qc")
                return
        for p in rec.proposals:
            if p.counter.v == self.view \
                    and p.counter.c not in self.proposals.get(self.view, {}) \
                    and self._host_valid_proposal(p, self.leader):
                self._admit(p)
        if anchor.ref is not None \
                and self._missing_below(anchor.ref.counter.c) is not None:
            self._start_catchup(src)
            return
        old_view = self.view
        self._execute_prefix(anchor)
        try:
            self.enclave.sync_with_highest(anchor)
        except EnclaveError as exc:
            self._refuse(type(exc).__name__)
            return
        for _ in range(target - old_view):
            self.enclave.update_view()
        self._enter_view(target, nl, cmt.digest)
        if 0 not in self.proposals.get(target, {}):
            self._admit(nvp)
        self.transitions[target] = rec
        if rec.nv_qc is not None:
            self.nv_qcs[target] = rec.nv_qc
            self.chain_qcs[0] = rec.nv_qc
        self.current_anchor = anchor
        self._vote_pending_nv()

    # ------------------------------------------------------------- pipelined

    def _chain_ok(self, p: Proposal) -> bool:
        if p.counter.c == 0:
            return p.parent is None
        prev = self.proposals.get(self.view, {}).get(p.counter.c - 1)
        if prev is None or p.parent != proposal_digest(prev):
            self._refuse("chain-break", p.counter)
            return False
        return True

    def _drive_pipeline(self) -> None:
        while True:
            c = self.enclave.counter
            if c > 0 and (c - 1) not in self.chain_qcs:
                return                      # wait for the tip certificate
            parent = None
            if c > 0:
                parent = proposal_digest(self.proposals[self.view][c - 1])
            ref, res_dg = self._pipeline_binding(c)
            if self.pending:
                cid, rid, op = self.pending.pop(0)
                self.pending_keys.discard((cid, rid))
            elif self._tail_needs_flush(c):
                cid, rid, op = 0, c, noop_op(b"fill")
            else:
                return
            via = self.chain_qcs.get(c - 1) if c > 0 else None
            self._propose(ProposalKind.REQUEST, op, cid, rid,
                          prepare_ref=ref, res_digest=res_dg, parent=parent,
                          via_commit=via)

    def _pipeline_binding(self, c: int):
        """Result binding carried by slot c: the slot finalized at qc(c-1)."""
        if c < 3:
            return None, None
        ref = CounterValue(c - 3, self.view)
        ref_p = self.proposals.get(self.view, {}).get(ref.c)
        if ref_p is None or ref_p.kind != ProposalKind.REQUEST:
            return None, None
        return ref, digest(self.results.get(ref, b""))

    def _tail_needs_flush(self, c: int) -> bool:
        log = self.proposals.get(self.view, {})
        for back in (1, 2):
            p = log.get(c - back)
            if p is not None and p.client_id:
                key = (p.client_id, p.request_id)
                if key not in self.proofs_exec:
                    return True
        return False

    def _pipeline_qc(self, cv: CounterValue, qc: QuorumCert) -> None:
        """Leader side: one chained certificate advances three slots."""
        self.chain_qcs[cv.c] = qc
        if cv.c == 0 and self.view > 0:
            self._leader_nv_done(cv, qc)
            return
        self._pipeline_apply(cv.c, qc, leader=True)
        self._drive_pipeline()
        if self.enclave.counter == cv.c + 1 and not self.pending:
            # nothing chained on top: ship the tip certificate bare
            for peer in self._others():
                self.net.send(peer, Decide(qc))
        self._settle_timer()

    def _pipeline_apply(self, c: int, qc: QuorumCert, leader: bool) -> None:
        log = self.proposals.get(self.view, {})
        p_now = log.get(c)
        p_commit = log.get(c - 1)
        if p_commit is not None and p_commit.kind == ProposalKind.REQUEST \
                and p_commit.client_id:
            cvp = p_commit.counter
            if cvp not in self.commit_qcs:
                self.commit_qcs[cvp] = qc
                key = (p_commit.client_id, p_commit.request_id)
                reply = self._make_reply(p_commit, qc, p_now.commitment,
                                         ReplyKind.COMMITMENT, b"")
                self.proofs[key] = reply
                self.watch.pop(key, None)
                self.stash_ops.pop(key, None)
                if leader and self.reply_commit:
                    self.net.send(p_commit.client_id, reply)
        p_exec = log.get(c - 2)
        if p_exec is not None and p_exec.kind == ProposalKind.REQUEST:
            cve = p_exec.counter
            result = self._execute_slot(p_exec)
            if cve not in self.execute_qcs:
                self.execute_qcs[cve] = qc
                if p_exec.client_id:
                    key = (p_exec.client_id, p_exec.request_id)
                    reply = self._make_reply(p_exec, qc, p_now.commitment,
                                             ReplyKind.EXECUTION, result)
                    self.proofs_exec[key] = reply
                    if leader and self.reply_exec:
                        self.net.send(p_exec.client_id, reply)

    def _pipeline_evidence(self, c: int, qc: QuorumCert) -> bool:
        """Follower side: accept a chained certificate for slot c."""
        p = self.proposals.get(self.view, {}).get(c)
        if p is None:
            return False
        if digest(secret_to_bytes(qc.secret)) != p.commitment.digest:
            self._refuse("bad-chain-qc", CounterValue(c, self.view))
            return False
        self.chain_qcs[c] = qc
        self._pipeline_apply(c, qc, leader=False)
        self._settle_timer()
        return True

    def _on_commit_pipelined(self, now, src, msg: Commit) -> None:
        qc, p = msg.qc, msg.proposal
        cv = p.counter
        if cv.v != self.view:
            if cv.v > self.view:
                self._stash_future(cv.v, cv.c, msg)
                self._start_catchup(src)
            return
        if self.is_leader():
            return
        if qc.counter != CounterValue(cv.c - 1, cv.v):
            self._refuse("bad-commit-shape", cv)
            return
        if cv.c in self.proposals.get(self.view, {}):
            return
        if cv.c != self._expected():
            if not self._buffer_ahead(cv.c, msg):
                self._refuse("out-of-window", cv)
            return
        if not self._host_valid_proposal(p, self.leader):
            self._refuse("bad-proposal", cv)
            return
        if not self._chain_ok(p):
            return
        prev = self.proposals[self.view][cv.c - 1]
        if digest(secret_to_bytes(qc.secret)) != prev.commitment.digest:
            self.request_view_change("bad-qc")
            return
        # result binding: the slot this proposal claims was finalized
        if p.prepare_ref is not None:
            expect = self.results.get(p.prepare_ref)
            if expect is None:
                ref_p = self.proposals[self.view].get(p.prepare_ref.c)
                if ref_p is not None and ref_p.kind == ProposalKind.REQUEST:
                    expect = self._execute_slot(ref_p)
            if expect is not None and digest(expect) != p.res_digest:
                self.request_view_change("result-divergence")
                return
        self._pipeline_evidence(cv.c - 1, qc)
        if self._cast_vote(p, msg.share_ct, VoteForCommit, self.leader):
            self._drain()

    # ---------------------------------------------------------------- table

    _HANDLERS = {}


Replica._HANDLERS = {
    Request: Replica._on_request,
    Prepare: Replica._on_prepare,
    VoteForCommit: Replica._on_vote_commit,
    Commit: Replica._on_commit,
    VoteForDecide: Replica._on_vote_decide,
    Decide: Replica._on_decide,
    RequestViewChange: Replica._on_request_view_change,
    ViewChange: Replica._on_view_change,
    VoteForNewView: Replica._on_vote_new_view,
    NewView: Replica._on_new_view,
    FetchProposals: Replica._on_fetch_proposals,
    Proposals: Replica._on_proposals,
}
