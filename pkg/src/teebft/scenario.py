"""Scenario files: strict schema, deterministic semantics.

A scenario is a JSON document that fixes everything a run depends on:
replica count, fault budget, timing model, client workload, corrupt set
and adversary script.  Validation is strict; unknown fields are rejected
so a typo cannot silently weaken a test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .adversary import NETWORK_ACTIONS, SCRIPT_ACTIONS

SCHEMA_VERSION = 1

_SUBSCRIPTIONS = ("commitment", "execution", "both")
_OPS = ("put", "noop")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ClientSpec:
    count: int = 1
    requests: int = 5
    op: str = "put"
    payload_bytes: int = 32
    subscription: str = "commitment"
    know_leader: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n: int
    f: int
    seed: int
    delta: int = 10
    gst: Optional[int] = 0            # None means asynchrony forever
    max_ticks: int = 20_000
    mode: str = "basic"
    crypto: str = "sim"
    delay: dict = field(default_factory=dict)
    clients: ClientSpec = field(default_factory=ClientSpec)
    corrupt: tuple = ()
    adversary: tuple = ()
    expect_liveness: bool = True

    def reseeded(self, seed: int) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, seed=seed)

    def resized(self, n: int) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, n=n, f=(n - 1) // 2)

    def with_mode(self, mode: str) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, mode=mode)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(f"scenario: {msg}")


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    extra = set(obj) - allowed
    _require(not extra, f"unknown fields in {where}: {sorted(extra)}")


def _check_int(obj, name, lo=0) -> int:
    _require(isinstance(obj, int) and not isinstance(obj, bool) and obj >= lo,
             f"{name} must be an integer >= {lo}")
    return obj


def _check_delay(d: dict) -> dict:
    _require(isinstance(d, dict), "delay must be an object")
    law = d.get("law")
    if law == "fixed":
        _check_keys(d, {"law", "value"}, "delay")
        _check_int(d.get("value"), "delay.value", 1)
    elif law == "uniform":
        _check_keys(d, {"law", "lo", "hi"}, "delay")
        lo = _check_int(d.get("lo"), "delay.lo", 1)
        hi = _check_int(d.get("hi"), "delay.hi", 1)
        _require(lo <= hi, "delay.lo must not exceed delay.hi")
    else:
        raise ScenarioError("scenario: delay.law must be 'fixed' or 'uniform'")
    return dict(d)


def _check_clients(d: dict) -> ClientSpec:
    _require(isinstance(d, dict), "clients must be an object")
    _check_keys(d, {"count", "requests", "op", "payload_bytes",
                    "subscription", "know_leader"}, "clients")
    spec = ClientSpec(
        count=_check_int(d.get("count", 1), "clients.count", 1),
        requests=_check_int(d.get("requests", 5), "clients.requests", 1),
        op=d.get("op", "put"),
        payload_bytes=_check_int(d.get("payload_bytes", 32),
                                 "clients.payload_bytes", 0),
        subscription=d.get("subscription", "commitment"),
        know_leader=d.get("know_leader", True),
    )
    _require(spec.op in _OPS, f"clients.op must be one of {_OPS}")
    _require(spec.subscription in _SUBSCRIPTIONS,
             f"clients.subscription must be one of {_SUBSCRIPTIONS}")
    _require(isinstance(spec.know_leader, bool),
             "clients.know_leader must be a boolean")
    return spec


def _check_corrupt(raw, n: int, f: int) -> tuple:
    _require(isinstance(raw, list), "corrupt must be a list")
    out = []
    for item in raw:
        if item == "leader0":
            out.append(item)
        else:
            rid = _check_int(item, "corrupt entry", 0)
            _require(rid < n, f"corrupt replica id {rid} out of range")
            out.append(rid)
    _require(len(set(out)) == len(out), "corrupt entries must be distinct")
    _require(len(out) <= f, f"at most f={f} corrupt replicas allowed")
    return tuple(out)


def _check_match(m: dict) -> None:
    _check_keys(m, {"type", "src", "dst", "from_tick", "to_tick"},
                "adversary match")
    if "type" in m:
        from .messages import MESSAGE_TYPES
        names = {cls.__name__ for cls in MESSAGE_TYPES}
        _require(isinstance(m["type"], list) and
                 all(t in names for t in m["type"]),
                 f"adversary match.type entries must be in {sorted(names)}")
    for side in ("src", "dst"):
        if side in m and m[side] not in ("any", "leader0", "corrupt"):
            _require(isinstance(m[side], list),
                     f"adversary match.{side} must be a list or a role token")
    if "from_tick" in m:
        _check_int(m["from_tick"], "match.from_tick")
    if "to_tick" in m and m["to_tick"] not in (None, "inf"):
        _check_int(m["to_tick"], "match.to_tick")


def _check_rule(r: dict, idx: int, corrupt: tuple) -> None:
    where = f"adversary[{idx}]"
    _require(isinstance(r, dict), f"{where} must be an object")
    action = r.get("action")
    if action in NETWORK_ACTIONS:
        _check_keys(r, {"action", "match", "params"}, where)
        _check_match(r.get("match", {}))
        params = r.get("params", {})
        _require(isinstance(params, dict), f"{where}.params must be an object")
        if action == "delay":
            _check_int(params.get("ticks"), f"{where}.params.ticks", 1)
        if action == "partition":
            groups = params.get("groups")
            _require(isinstance(groups, list) and len(groups) >= 2,
                     f"{where}.params.groups needs at least two groups")
            _require(all(g == "others" or isinstance(g, list)
                         for g in groups),
                     f"{where}.params.groups entries must be lists "
                     f"or 'others'")
            _require(groups.count("others") <= 1,
                     f"{where}.params.groups allows one 'others' group")
        if action == "replay":
            _check_int(params.get("replay_at"), f"{where}.params.replay_at")
    elif action in SCRIPT_ACTIONS:
        _check_keys(r, {"action", "rid", "at_tick"}, where)
        rid = r.get("rid")
        _require(rid == "leader0" or isinstance(rid, int),
                 f"{where}.rid must be an id or 'leader0'")
        _require(rid in corrupt,
                 f"{where}.rid must be listed in the corrupt set")
        _check_int(r.get("at_tick"), f"{where}.at_tick")
    else:
        raise ScenarioError(
            f"scenario: {where}.action must be one of "
            f"{NETWORK_ACTIONS + SCRIPT_ACTIONS}")


def parse_scenario(doc: dict) -> ScenarioConfig:
    _require(isinstance(doc, dict), "document must be a JSON object")
    _check_keys(doc, {"version", "name", "n", "f", "seed", "delta", "gst",
                      "max_ticks", "mode", "crypto", "delay", "clients",
                      "corrupt", "adversary", "expect"}, "scenario")
    _require(doc.get("version") == SCHEMA_VERSION,
             f"version must be {SCHEMA_VERSION}")
    _require(isinstance(doc.get("name"), str) and doc["name"],
             "name must be a nonempty string")

    n = _check_int(doc.get("n"), "n", 3)
    f = _check_int(doc.get("f"), "f", 1)
    _require(n == 2 * f + 1, "n must equal 2f+1")
    seed = _check_int(doc.get("seed"), "seed")
    delta = _check_int(doc.get("delta", 10), "delta", 1)

    gst_raw = doc.get("gst", 0)
    if gst_raw == "inf":
        gst: Optional[int] = None
    else:
        gst = _check_int(gst_raw, "gst")

    max_ticks = _check_int(doc.get("max_ticks", 20_000), "max_ticks", 1)
    mode = doc.get("mode", "basic")
    _require(mode in ("basic", "pipelined"),
             "mode must be 'basic' or 'pipelined'")
    crypto = doc.get("crypto", "sim")
    _require(crypto in ("sim", "real"), "crypto must be 'sim' or 'real'")

    delay = _check_delay(doc.get("delay", {"law": "fixed", "value": delta}))
    clients = _check_clients(doc.get("clients", {}))
    corrupt = _check_corrupt(doc.get("corrupt", []), n, f)

    adversary = doc.get("adversary", [])
    _require(isinstance(adversary, list), "adversary must be a list")
    for i, rule in enumerate(adversary):
        _check_rule(rule, i, corrupt)

    expect = doc.get("expect", {})
    _require(isinstance(expect, dict), "expect must be an object")
    _check_keys(expect, {"liveness", "description"}, "expect")
    liveness = expect.get("liveness", gst is not None)
    _require(isinstance(liveness, bool), "expect.liveness must be a boolean")

    return ScenarioConfig(
        name=doc["name"], n=n, f=f, seed=seed, delta=delta, gst=gst,
        max_ticks=max_ticks, mode=mode, crypto=crypto, delay=delay,
        clients=clients, corrupt=corrupt,
        adversary=tuple(dict(r) for r in adversary),
        expect_liveness=liveness)


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(json.load(fh))


def bundled(name: str) -> ScenarioConfig:
    """Load one of the scenarios shipped inside the package."""
    ref = resources.files("teebft.scenarios").joinpath(f"{name}.json")
    return parse_scenario(json.loads(ref.read_text(encoding="utf-8")))


def bundled_names() -> list[str]:
    out = []
    for entry in resources.files("teebft.scenarios").iterdir():
        if entry.name.endswith(".json"):
            out.append(entry.name[:-5])
    return sorted(out)
