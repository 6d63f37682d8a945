"""Trace-level safety checking.

Every run leaves a full event trace; these checks fold it back into the
core guarantees.  Enclave events are trusted for every replica, corrupt
or not, because the hardware emits them.  Host-level agreement checks
(execution, view entry, election) are restricted to honest replicas:
a corrupt host may claim anything, and the protocol only promises
agreement among the honest.

Rules checked:

* equivocation      same enclave signs two digests for one counter
* double_release    same enclave releases two shares for one counter
* anchor_dup        same enclave anchors one target view twice
* qc_split          two reconstructions of one counter disagree
* qc_unbacked       a reconstruction lacks f+1 prior share releases
* exec_divergence   two honest replicas execute one slot differently
* exec_replay       one replica executes one slot twice
* exec_order        a replica executes slots out of (view, counter) order
* election_split    honest replicas in one view elect different leaders
* view_split        honest replicas enter one view under different leaders
"""

from __future__ import annotations

import json
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .simnet import Trace


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.detail}"


@dataclass
class SafetyReport:
    violations: list[Violation] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, detail: str) -> None:
        self.violations.append(Violation(rule, detail))

    def bump(self, key: str, by: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + by


def _note(rec: dict) -> dict:
    return json.loads(rec["note"]) if rec["note"] else {}


def _cv(rec: dict) -> Optional[tuple[int, int]]:
    c = rec["counter"]
    return None if c is None else (c[0], c[1])


def check_safety(trace: Trace, n: int, f: int,
                 corrupt: Iterable[int] = ()) -> SafetyReport:
    """Fold one trace into a pass/fail report over the safety rules."""
    corrupt = set(corrupt)
    honest = set(range(n)) - corrupt
    rep = SafetyReport()

    signs: dict[tuple[int, tuple[int, int]], str] = {}
    releases: dict[tuple[int, tuple[int, int]], int] = {}
    release_at: dict[tuple[tuple[int, int], str], set[int]] = {}
    anchors: dict[tuple[int, int], int] = {}
    qcs: dict[tuple[int, int], str] = {}
    execs: dict[tuple[int, int], tuple[str, str]] = {}
    exec_seen: dict[int, set[tuple[int, int]]] = {}
    exec_last: dict[int, tuple[int, int]] = {}
    elections: dict[tuple[int, int], int] = {}
    view_leaders: dict[int, int] = {}

    for rec in trace.records:
        kind, src = rec["kind"], rec["src"]

        if kind == "enclave.sign":
            rep.bump("sign")
            key = (src, _cv(rec))
            prev = signs.setdefault(key, rec["digest"])
            if prev != rec["digest"]:
                rep.add("equivocation",
                        f"replica {src} signed {prev} then {rec['digest']} "
                        f"at counter {key[1]}")

        elif kind == "enclave.release":
            rep.bump("release")
            key = (src, _cv(rec))
            releases[key] = releases.get(key, 0) + 1
            if releases[key] > 1:
                rep.add("double_release",
                        f"replica {src} released {releases[key]} shares "
                        f"at counter {key[1]}")
            release_at.setdefault((_cv(rec), rec["digest"]), set()).add(src)

        elif kind == "enclave.anchor":
            rep.bump("anchor")
            key = (src, _note(rec)["target"])
            anchors[key] = anchors.get(key, 0) + 1
            if anchors[key] > 1:
                rep.add("anchor_dup",
                        f"replica {src} anchored target view {key[1]} "
                        f"{anchors[key]} times")

        elif kind == "qc":
            rep.bump("qc")
            cv = _cv(rec)
            prev = qcs.setdefault(cv, rec["digest"])
            if prev != rec["digest"]:
                rep.add("qc_split",
                        f"counter {cv} reconstructed as {prev} "
                        f"and {rec['digest']}")
            backers = release_at.get((cv, rec["digest"]), set())
            if len(backers) < f + 1:
                rep.add("qc_unbacked",
                        f"counter {cv} reconstructed with only "
                        f"{len(backers)} prior releases, need {f + 1}")

        elif kind == "execute":
            rep.bump("execute")
            cv = _cv(rec)
            seen = exec_seen.setdefault(src, set())
            if cv in seen:
                rep.add("exec_replay",
                        f"replica {src} executed slot {cv} twice")
            seen.add(cv)
            last = exec_last.get(src)
            order = (cv[1], cv[0])
            if last is not None and order <= last:
                rep.add("exec_order",
                        f"replica {src} executed {cv} after (c,v)="
                        f"{(last[1], last[0])}")
            exec_last[src] = order
            if src in honest:
                body = (rec["digest"], _note(rec)["res"])
                prev = execs.setdefault(cv, body)
                if prev != body:
                    rep.add("exec_divergence",
                            f"slot {cv}: {prev} vs {body} (replica {src})")

        elif kind == "elect" and src in honest:
            rep.bump("elect")
            note = _note(rec)
            key = (note["from"], note["target"])
            prev = elections.setdefault(key, note["leader"])
            if prev != note["leader"]:
                rep.add("election_split",
                        f"view {key[0]} target {key[1]}: leaders "
                        f"{prev} and {note['leader']}")

        elif kind == "view" and src in honest:
            rep.bump("view")
            note = _note(rec)
            prev = view_leaders.setdefault(note["view"], note["leader"])
            if prev != note["leader"]:
                rep.add("view_split",
                        f"view {note['view']}: leaders {prev} "
                        f"and {note['leader']}")

    return rep


def check_partial_synchrony(trace: Trace, delta: int, gst: Optional[int],
                            corrupt: Iterable[int] = ()) -> SafetyReport:
    """Verify the delivery bound the network promises after stabilization.

    Every message sent between honest nodes at or after gst must arrive
    unmodified within delta ticks.  Sends and delivers are matched by
    (src, dst, message name, counter, digest); each delivery satisfies
    at most one send.  Sends whose deadline falls past the end of the
    trace were still in flight when the run stopped and are not judged.
    """
    corrupt = set(corrupt)
    rep = SafetyReport()
    if gst is None:
        return rep
    horizon = max((rec["tick"] for rec in trace.records), default=0)

    delivers: dict[tuple, list[int]] = {}
    sends: list[tuple[int, tuple]] = []
    for rec in trace.records:
        if rec["src"] in corrupt or rec["dst"] in corrupt:
            continue
        note = _note(rec)
        key = (rec["src"], rec["dst"], note.get("msg"),
               tuple(rec["counter"] or ()), rec["digest"])
        if (rec["kind"] == "send" and rec["tick"] >= gst
                and rec["tick"] + delta < horizon):
            sends.append((rec["tick"], key))
        elif rec["kind"] == "deliver" and not note.get("fabricated"):
            insort(delivers.setdefault(key, []), rec["tick"])

    sends.sort(key=lambda s: s[0])
    for depart, key in sends:
        rep.bump("bounded_send")
        ticks = delivers.get(key, [])
        i = bisect_left(ticks, depart)
        if i < len(ticks) and ticks[i] <= depart + delta:
            ticks.pop(i)
        else:
            rep.add("late_delivery",
                    f"{key[2]} {key[0]}->{key[1]} sent at {depart} "
                    f"not delivered by {depart + delta}")
    return rep
