"""Assemble one runnable deployment from a scenario config.

The world owns everything a run touches: the trusted setup, one enclave
per replica, the simulated network, replica hosts, clients and the
adversary.  All randomness descends from the scenario seed, so a config
replays to a byte-identical trace.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adversary import Adversary
from .client import Client
from .crypto import Prg, get_provider
from .enclave import Enclave, trusted_setup
from .messages import ReplyKind
from .replica import Replica, noop_op, put_op
from .scenario import ScenarioConfig
from .simnet import DelayLaw, Network, Trace

CLIENT_BASE = 1000

_SUB_KIND = {"commitment": ReplyKind.COMMITMENT,
             "execution": ReplyKind.EXECUTION,
             "both": ReplyKind.EXECUTION}


@dataclass
class RunResult:
    trace: Trace
    completed: bool
    liveness_timeout: bool
    final_tick: int


def _client_ops(cfg: ScenarioConfig, idx: int, rng: Prg) -> list[bytes]:
    ops = []
    for r in range(cfg.clients.requests):
        payload = rng.next_bytes(cfg.clients.payload_bytes)
        if cfg.clients.op == "put":
            key = f"c{idx}/r{r}".encode()
            ops.append(put_op(key, payload))
        else:
            ops.append(noop_op(payload))
    return ops


class World:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        seed = b"world/" + cfg.seed.to_bytes(8, "little")
        provider = get_provider(cfg.crypto)
        chains, pks, genesis = trusted_setup(cfg.n, cfg.f,
                                             seed + b"/setup", provider)
        self.genesis = genesis
        self.pks = pks
        self.provider = provider

        self.enclaves = [
            Enclave(chains[i], provider, Prg(seed + b"/enclave/%d" % i))
            for i in range(cfg.n)
        ]
        self.leader0 = self.enclaves[0].proposer
        self.corrupt = {self.leader0 if c == "leader0" else c
                        for c in cfg.corrupt}

        law = DelayLaw(**cfg.delay)
        self.net = Network(cfg.delta, cfg.gst, law, seed + b"/net",
                           corrupt=self.corrupt)

        sub = cfg.clients.subscription
        reply_commit = sub in ("commitment", "both")
        reply_exec = sub in ("execution", "both")
        self.replicas: list[Replica] = []
        for i in range(cfg.n):
            r = Replica(i, cfg.n, cfg.f, self.enclaves[i], pks, genesis,
                        provider, mode=cfg.mode,
                        reply_commit=reply_commit, reply_exec=reply_exec)
            r.net = self.net.add_node(i, r)
            r.delta = cfg.delta
            self.enclaves[i]._trace = self._enclave_hook(i)
            self.replicas.append(r)

        self.clients: list[Client] = []
        for idx in range(cfg.clients.count):
            cid = CLIENT_BASE + idx
            ops = _client_ops(cfg, idx, Prg(seed + b"/ops/%d" % idx))
            hint = self.leader0 if cfg.clients.know_leader else None
            c = Client(cid, cfg.n, pks, provider, ops,
                       subscription=_SUB_KIND[sub], leader_hint=hint,
                       delta=cfg.delta)
            c.net = self.net.add_node(cid, c)
            self.clients.append(c)

        self.adversary = None
        if cfg.adversary:
            self.adversary = Adversary(list(cfg.adversary), self.net, self,
                                       seed + b"/rules")
            self.net.adversary = self.adversary
            self.adversary.install()

    def _enclave_hook(self, rid: int):
        trace = self.net.trace

        def hook(kind, counter, dg, note):
            trace.append(self.net.now, "enclave." + kind, rid, rid,
                         counter, dg, note)
        return hook

    # -- driving ------------------------------------------------------------

    def start(self) -> None:
        for c in self.clients:
            self.net.set_timer(c.id, "go", 1)

    def all_done(self) -> bool:
        return all(c.done for c in self.clients)

    def run(self) -> RunResult:
        self.start()
        self.net.run(self.cfg.max_ticks, stop=self.all_done)
        return RunResult(
            trace=self.net.trace,
            completed=self.all_done(),
            liveness_timeout=self.net.liveness_timeout,
            final_tick=self.net.now,
        )


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    return World(cfg).run()
