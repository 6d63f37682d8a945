"""Deterministic discrete-event network simulator.

Single-threaded event loop over integer ticks.  Events are ordered by
(tick, sequence number); the sequence number is assigned at insertion, so
same-tick events run in FIFO order and a given (config, seed) pair always
replays the exact same schedule.

The wire carries canonical bytes.  Handlers receive decoded messages;
anything that fails to decode is dropped and recorded.  All sends pass
through an optional adversary hook, but after the global stabilization
time the original bytes of any message between two correct nodes are
delivered within delta ticks no matter what the hook returns.

Every observable event is appended to a trace: one JSON object per line
with the fixed key order (tick, seq, kind, src, dst, counter, digest,
note).  Metrics and safety checks are folds over this trace.
"""

from __future__ import annotations

import heapq
import json
from typing import Any, Callable, Optional

from .crypto import Prg, digest, secret_to_bytes
from .messages import (
    CodecError, Commit, CounterValue, Decide, FetchProposals, NewView,
    Prepare, Proposals, Reply, Request, RequestViewChange, ViewChange,
    VoteForCommit, VoteForDecide, VoteForNewView, decode, encode,
    request_digest,
)

TRACE_KEYS = ("tick", "seq", "kind", "src", "dst", "counter", "digest", "note")

NOBODY = -1


class Trace:
    """Ordered event records with a canonical line encoding."""

    def __init__(self, records: Optional[list[dict]] = None):
        self.records: list[dict] = records if records is not None else []

    def append(self, tick: int, kind: str, src: int, dst: int,
               counter: Optional[CounterValue], dg: Optional[bytes],
               note: dict) -> None:
        self.records.append({
            "tick": tick,
            "seq": len(self.records),
            "kind": kind,
            "src": src,
            "dst": dst,
            "counter": None if counter is None else [counter.c, counter.v],
            "digest": None if dg is None else dg.hex()[:16],
            "note": json.dumps(note, sort_keys=True, separators=(",", ":")),
        })

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(rec, separators=(",", ":")) + "\n"
            for rec in self.records
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        records = []
        for line in text.splitlines():
            if line.strip():
                records.append(json.loads(line))
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class DelayLaw:
    """Per-message network delay: fixed value or uniform integer range."""

    def __init__(self, law: str = "fixed", value: int = 10,
                 lo: int = 0, hi: int = 0):
        if law not in ("fixed", "uniform"):
            raise ValueError(f"unknown delay law {law!r}")
        self.law = law
        self.value = value
        self.lo, self.hi = lo, hi

    def sample(self, rng: Prg) -> int:
        if self.law == "fixed":
            return self.value
        return self.lo + rng.randrange(self.hi - self.lo + 1)


def message_meta(msg) -> tuple[Optional[CounterValue], Optional[bytes], dict]:
    """Counter, digest and note fields for tracing one wire message."""
    name = type(msg).__name__
    if isinstance(msg, Request):
        return None, request_digest(msg.client_id, msg.request_id, msg.op), \
            {"msg": name, "client": msg.client_id, "rid": msg.request_id}
    if isinstance(msg, Prepare):
        dg = msg.proposal.leader_sig.digest if msg.proposal.leader_sig else None
        return msg.proposal.counter, dg, {"msg": name}
    if isinstance(msg, (VoteForCommit, VoteForDecide, VoteForNewView)):
        return msg.counter, None, {"msg": name}
    if isinstance(msg, Commit):
        dg = msg.proposal.leader_sig.digest if msg.proposal.leader_sig else None
        return msg.qc.counter, dg, {"msg": name}
    if isinstance(msg, Decide):
        return msg.qc.counter, digest(secret_to_bytes(msg.qc.secret)), \
            {"msg": name}
    if isinstance(msg, RequestViewChange):
        return msg.proof.counter, None, \
            {"msg": name, "target": msg.target_view, "from": msg.from_view}
    if isinstance(msg, ViewChange):
        dg = msg.proposal.leader_sig.digest if msg.proposal.leader_sig else None
        return msg.proposal.counter, dg, \
            {"msg": name, "target": msg.anchor.target_view}
    if isinstance(msg, NewView):
        return msg.qc.counter, digest(secret_to_bytes(msg.qc.secret)), \
            {"msg": name, "target": msg.anchor.target_view}
    if isinstance(msg, FetchProposals):
        return None, None, {"msg": name, "view": msg.view,
                            "from_counter": msg.next_counter}
    if isinstance(msg, Proposals):
        return None, None, {"msg": name, "view": msg.for_view,
                            "count": len(msg.proposals),
                            "transitions": len(msg.transitions)}
    if isinstance(msg, Reply):
        return msg.qc.counter, msg.commitment.digest, \
            {"msg": name, "client": msg.client_id, "rid": msg.request_id,
             "kind": int(msg.kind)}
    return None, None, {"msg": name}


class NodeHandle:
    """A node's capability to reach the network: bound to its own id."""

    def __init__(self, net: "Network", node_id: int):
        self._net = net
        self.node_id = node_id

    @property
    def now(self) -> int:
        return self._net.now

    def send(self, dst: int, msg) -> None:
        self._net.send(self.node_id, dst, msg)

    def set_timer(self, name: str, delay: int) -> None:
        self._net.set_timer(self.node_id, name, delay)

    def cancel_timer(self, name: str) -> None:
        self._net.cancel_timer(self.node_id, name)

    def trace(self, kind: str, counter=None, dg=None, note=None) -> None:
        self._net.trace.append(self._net.now, kind, self.node_id,
                               self.node_id, counter, dg, note or {})


class Network:
    """Event queue, links, timers and the trace for one simulated world."""

    def __init__(self, delta: int, gst: Optional[int], law: DelayLaw,
                 seed: bytes, corrupt: Optional[set[int]] = None):
        self.delta = delta
        self.gst = gst                      # None means "never" (asynchronous)
        self.law = law
        self.trace = Trace()
        self.corrupt = corrupt or set()
        self.adversary = None               # optional on_send/on_tick hook
        self.nodes: dict[int, Any] = {}
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self._timer_gen: dict[tuple[int, str], int] = {}
        self._rng = Prg(seed + b"/net")
        self.liveness_timeout = False

    # -- wiring ---------------------------------------------------------------

    def add_node(self, node_id: int, node) -> NodeHandle:
        self.nodes[node_id] = node
        return NodeHandle(self, node_id)

    def _push(self, tick: int, entry) -> None:
        heapq.heappush(self._heap, (tick, self._seq, entry))
        self._seq += 1

    # -- sending --------------------------------------------------------------

    def send(self, src: int, dst: int, msg) -> None:
        data = encode(msg)
        depart = self.now + 1               # one tick of processing latency
        counter, dg, note = message_meta(msg)
        self.trace.append(depart, "send", src, dst, counter, dg, note)
        plan = None
        if self.adversary is not None:
            plan = self.adversary.on_send(depart, src, dst, msg, data)
        if plan is None:
            plan = [(depart + self._sample_delay(), data)]
        self._enforce_and_schedule(depart, src, dst, data, plan)

    def _sample_delay(self) -> int:
        return max(0, self.law.sample(self._rng))

    def _honest_pair(self, src: int, dst: int) -> bool:
        return src not in self.corrupt and dst not in self.corrupt

    def _enforce_and_schedule(self, depart: int, src: int, dst: int,
                              data: bytes, plan: list[tuple[int, bytes]]):
        """Apply the partial-synchrony bound, then queue deliveries."""
        bound_applies = (self.gst is not None and depart >= self.gst
                         and self._honest_pair(src, dst))
        deadline = depart + self.delta
        scheduled_original = False
        for tick, payload in plan:
            if bound_applies and payload == data:
                tick = min(tick, deadline)
            if payload == data and tick <= deadline:
                scheduled_original = True
            self._push(max(tick, depart), ("deliver", src, dst, payload, False))
        if bound_applies and not scheduled_original:
            self._push(deadline, ("deliver", src, dst, data, False))

    def inject(self, tick: int, src: int, dst: int, data: bytes) -> None:
        """Adversary-fabricated delivery; tagged in the trace."""
        self._push(max(tick, self.now), ("deliver", src, dst, data, True))

    # -- timers ---------------------------------------------------------------

    def set_timer(self, owner: int, name: str, delay: int) -> None:
        key = (owner, name)
        gen = self._timer_gen.get(key, 0) + 1
        self._timer_gen[key] = gen
        self._push(self.now + max(1, delay), ("timer", owner, name, gen))

    def cancel_timer(self, owner: int, name: str) -> None:
        key = (owner, name)
        self._timer_gen[key] = self._timer_gen.get(key, 0) + 1

    # -- the loop -------------------------------------------------------------

    def run(self, max_ticks: int,
            stop: Optional[Callable[[], bool]] = None) -> None:
        while self._heap:
            if stop is not None and stop():
                return
            tick, _seq, entry = heapq.heappop(self._heap)
            if tick > max_ticks:
                self.liveness_timeout = True
                self.trace.append(max_ticks, "liveness_timeout", NOBODY,
                                  NOBODY, None, None, {})
                return
            self.now = tick
            if self.adversary is not None:
                self.adversary.on_tick(tick)
            kind = entry[0]
            if kind == "deliver":
                self._deliver(entry)
            elif kind == "timer":
                self._fire_timer(entry)
            else:                           # ("call", fn) adversary action
                entry[1]()

    def schedule_call(self, tick: int, fn: Callable[[], None]) -> None:
        self._push(max(tick, self.now), ("call", fn))

    def _deliver(self, entry) -> None:
        _, src, dst, payload, fabricated = entry
        node = self.nodes.get(dst)
        if node is None:
            return
        try:
            msg = decode(payload)
        except CodecError as exc:
            self.trace.append(self.now, "malformed", src, dst, None, None,
                              {"error": str(exc)[:60]})
            return
        counter, dg, note = message_meta(msg)
        if fabricated:
            note["fabricated"] = 1
        self.trace.append(self.now, "deliver", src, dst, counter, dg, note)
        node.on_message(self.now, src, msg)

    def _fire_timer(self, entry) -> None:
        _, owner, name, gen = entry
        if self._timer_gen.get((owner, name)) != gen:
            return                          # cancelled or superseded
        node = self.nodes.get(owner)
        if node is None:
            return
        self.trace.append(self.now, "timer", owner, owner, None, None,
                          {"name": name})
        node.on_timer(self.now, name)
