"""Scripted byzantine behavior.

Two capability classes, both bounded by the fault assumption:

* network rules intercept messages at send time and may drop, delay,
  duplicate, reorder, tamper, replay or partition (the post-GST delivery
  bound for correct pairs is enforced by the network and cannot be
  scripted away);
* enclave scripts run against the enclaves of corrupt replicas only,
  invoking the real attested interface out of protocol order or killing
  it outright.  The hardware keeps its own rules, so these scripts model
  a compromised host, not a compromised enclave.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .crypto import SHARE_PRIME, Prg, Share, digest
from .enclave import EnclaveError
from .messages import (
    MESSAGE_TYPES, Commit, VoteForCommit, encode,
)

NETWORK_ACTIONS = ("drop", "delay", "duplicate", "modify", "reorder",
                   "replay", "partition", "corrupt_qc")
SCRIPT_ACTIONS = ("terminate_enclave", "equivocate_attempt",
                  "double_vote_attempt", "log_rollback_attempt")

_TYPE_BY_NAME = {cls.__name__: cls for cls in MESSAGE_TYPES}


class DeadEnclave:
    """Stands in for a terminated enclave: every use raises."""

    def __getattr__(self, name):
        raise EnclaveError("enclave terminated")


def _resolve(who, world):
    if who == "leader0":
        return world.leader0
    return int(who)


class Rule:
    def __init__(self, spec: dict, world):
        self.action = spec["action"]
        self.params = dict(spec.get("params", {}))
        match = dict(spec.get("match", {}))
        self.types = None
        if "type" in match:
            self.types = tuple(_TYPE_BY_NAME[t] for t in match["type"])
        self.srcs = self._id_set(match.get("src"), world)
        self.dsts = self._id_set(match.get("dst"), world)
        self.from_tick = match.get("from_tick", 0)
        to = match.get("to_tick")
        self.to_tick = float("inf") if to in (None, "inf") else to
        self.groups = None
        if self.action == "partition":
            named = [frozenset(_resolve(x, world) for x in g)
                     for g in self.params["groups"] if g != "others"]
            rest = frozenset(range(world.cfg.n)) - frozenset().union(*named)
            self.groups = [rest if g == "others"
                           else frozenset(_resolve(x, world) for x in g)
                           for g in self.params["groups"]]

    @staticmethod
    def _id_set(spec, world) -> Optional[frozenset]:
        if spec is None or spec == "any":
            return None
        if spec == "leader0":
            return frozenset([world.leader0])
        if spec == "corrupt":
            return frozenset(world.corrupt)
        return frozenset(_resolve(x, world) for x in spec)

    def matches(self, tick: int, src: int, dst: int, msg) -> bool:
        if not (self.from_tick <= tick < self.to_tick):
            return False
        if self.types is not None and not isinstance(msg, self.types):
            return False
        if self.srcs is not None and src not in self.srcs:
            return False
        if self.dsts is not None and dst not in self.dsts:
            return False
        if self.groups is not None:
            side = [i for i, g in enumerate(self.groups) if src in g]
            other = [i for i, g in enumerate(self.groups) if dst in g]
            if not side or not other or side == other:
                return False
        return True


class Adversary:
    """First matching rule wins; unmatched messages take the default path."""

    def __init__(self, specs: list[dict], net, world, seed: bytes):
        self.net = net
        self.world = world
        self.rng = Prg(seed + b"/adversary")
        self.rules = [Rule(s, world) for s in specs
                      if s["action"] in NETWORK_ACTIONS]
        self.scripts = [s for s in specs if s["action"] in SCRIPT_ACTIONS]
        self.replayed: list[tuple[int, int, bytes]] = []

    def install(self) -> None:
        for spec in self.scripts:
            rid = _resolve(spec["rid"], self.world)
            tick = spec["at_tick"]
            self.net.schedule_call(
                tick, lambda s=spec, r=rid: self._run_script(s, r))

    def on_tick(self, tick: int) -> None:
        pass

    # -- network interception --------------------------------------------

    def on_send(self, depart, src, dst, msg, data) -> Optional[list]:
        for rule in self.rules:
            if rule.matches(depart, src, dst, msg):
                return self._apply(rule, depart, src, dst, msg, data)
        return None

    def _note(self, action, src, dst, extra=None) -> None:
        note = {"action": action}
        if extra:
            note.update(extra)
        self.net.trace.append(self.net.now, "adv", src, dst, None, None, note)

    def _apply(self, rule, depart, src, dst, msg, data) -> list:
        act, p = rule.action, rule.params
        if act in ("drop", "partition"):
            self._note(act, src, dst)
            return []
        if act == "delay":
            self._note(act, src, dst, {"ticks": p["ticks"]})
            return [(depart + p["ticks"], data)]
        if act == "duplicate":
            copies, gap = p.get("copies", 2), p.get("gap", 1)
            self._note(act, src, dst, {"copies": copies})
            base = depart + self.net.delta
            return [(base + i * gap, data) for i in range(copies)]
        if act == "reorder":
            jitter = self.rng.randrange(p.get("jitter", 4) + 1)
            return [(depart + self.net.delta + jitter, data)]
        if act == "modify":
            pos = self.rng.randrange(len(data))
            bad = data[:pos] + bytes([data[pos] ^ 0xFF]) + data[pos + 1:]
            self._note(act, src, dst, {"pos": pos})
            return [(depart + self.net.delta, bad)]
        if act == "replay":
            at = p["replay_at"]
            self.net.inject(at + len(self.replayed), src, dst, data)
            self.replayed.append((src, dst, at))
            self._note(act, src, dst, {"replay_at": at})
            return [(depart + self.net.delta, data)]
        if act == "corrupt_qc":
            if isinstance(msg, Commit):
                fake = self.rng.randrange(SHARE_PRIME)
                forged = replace(msg, qc=replace(msg.qc, secret=fake))
                self._note(act, src, dst)
                return [(depart + self.net.delta, encode(forged))]
            return [(depart + self.net.delta, data)]
        raise AssertionError(f"unhandled action {act}")

    # -- enclave scripts ---------------------------------------------------

    def _run_script(self, spec: dict, rid: int) -> None:
        act = spec["action"]
        replica = self.world.replicas[rid]
        self._note(act, rid, rid)
        if act == "terminate_enclave":
            replica.enclave = DeadEnclave()
            return
        enclave = replica.enclave
        try:
            if act == "equivocate_attempt":
                enclave.create_counter(digest(b"equivocation/a"))
                enclave.create_counter(digest(b"equivocation/b"))
            elif act == "double_vote_attempt":
                ctx = replica.last_vote_ctx
                if ctx is not None:
                    try:
                        enclave.verify_counter(*ctx)
                    except EnclaveError:
                        self._note(act + "_refused", rid, rid)
                    forged = VoteForCommit(
                        ctx[0].counter,
                        Share(rid + 1, self.rng.randrange(SHARE_PRIME)), rid)
                    self.net.inject(self.net.now + 1, rid, replica.leader,
                                    encode(forged))
            elif act == "log_rollback_attempt":
                lv = enclave.last_validated
                sc = None
                if lv is not None:
                    sc = replica.proposals[lv.v][lv.c].leader_sig
                enclave.get_highest_message(sc)
                ctx = replica.last_vote_ctx
                if ctx is not None:
                    try:
                        enclave.verify_counter(*ctx)
                    except EnclaveError:
                        self._note(act + "_refused", rid, rid)
        except EnclaveError:
            self._note(act + "_refused", rid, rid)
