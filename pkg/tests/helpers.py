"""Shared fixtures for enclave-level tests: a tiny trusted-setup world."""

import copy
from collections import deque

from teebft.crypto import Prg, digest, get_provider
from teebft.enclave import Enclave, EnclaveError, trusted_setup
from teebft.messages import CounterValue, ProposalRef, proof_sign_bytes


class EnclaveWorld:
    def __init__(self, n=3, f=1, seed=b"enclave-tests", provider="sim"):
        self.n, self.f = n, f
        self.provider = get_provider(provider)
        chains, pks, genesis = trusted_setup(n, f, seed, self.provider)
        self.pks = pks
        self.genesis = genesis
        self.enclaves = [
            Enclave(chains[rid], self.provider, Prg(seed + b"/rng%d" % rid))
            for rid in range(n)
        ]
        self.leader0 = self.enclaves[0].proposer

    @property
    def leader(self) -> Enclave:
        return self.enclaves[self.leader0]

    def followers(self):
        return [e for e in self.enclaves if e.replica_id != self.leader0]

    def propose(self, leader: Enclave, payload_digest: bytes):
        """generate_secret + create_counter at the leader's current counter."""
        env = leader.generate_secret(leader.counter, leader.view)
        sc = leader.create_counter(payload_digest)
        return sc, env


def search_vote_omission(max_depth: int = 8, n_proposals: int = 8,
                         seed: bytes = b"omission-search") -> dict:
    """Breadth-first search over hostile host call sequences on one enclave.

    Explores every sequence of up to max_depth public-API calls (votes on
    each of n_proposals leader proposals, log proofs for every candidate
    argument, secret generation, rogue counter creation) modulo enclave
    state, and checks each emitted log proof against every prefix of the
    proposal chain.  A counterexample is a proof that a downstream merge
    would accept for a log prefix ending below the enclave's own highest
    contribution, i.e. a proof that hides a vote.

    Memoization on the visible enclave state is sound: the abstract
    transition relation and all signatures are functions of that state,
    never of the secret-sharing randomness.

    Returns {"states", "edges", "proofs", "matches", "counterexample"}.
    """
    world = EnclaveWorld(seed=seed)
    provider = world.provider
    leader = world.leader
    props = [world.propose(leader, digest(b"chain-%d" % i))
             for i in range(n_proposals)]
    target = world.followers()[0]
    pk = world.pks[target.replica_id]
    rogue = digest(b"rogue-payload")

    def valid_against(proof, j: int) -> bool:
        """Would this proof pass downstream log validation for prefix j?"""
        if proof.counter != CounterValue(j, 0):
            return False
        ref = None if j == 0 else ProposalRef(props[j - 1][0].digest,
                                              props[j - 1][0].counter)
        if proof.highest != ref:
            return False
        return provider.verify(
            pk, proof_sign_bytes(proof.signer, ref, proof.counter), proof.sig)

    actions = ([("vote", k) for k in range(n_proposals)]
               + [("proof", k) for k in range(n_proposals)]
               + [("proof", None), ("gen", None), ("create", None)])

    def state_key(e, votes, own, signed):
        return (e.view, e.counter, e.last_validated, e.locked,
                votes, own, signed)

    root = (target, frozenset(), frozenset(), frozenset())
    seen = {state_key(*root)}
    queue = deque([root + ((), 0)])
    stats = {"states": 1, "edges": 0, "proofs": 0, "matches": 0,
             "counterexample": None}
    while queue:
        enclave, votes, own, signed, path, depth = queue.popleft()
        if depth == max_depth:
            continue
        for act in actions:
            e2 = copy.deepcopy(enclave)
            v2, o2, s2 = votes, own, signed
            emitted = None
            kind, k = act
            try:
                if kind == "vote":
                    sc, env = props[k]
                    e2.verify_counter(sc, env.shares_ct[e2.replica_id])
                    v2 = votes | {k}
                elif kind == "proof":
                    emitted = e2.get_highest_message(
                        None if k is None else props[k][0])
                elif kind == "gen":
                    c = e2.counter
                    e2.generate_secret(c, e2.view)
                    o2 = own | {c}
                else:
                    s2 = signed | {e2.create_counter(rogue).counter.c}
            except EnclaveError:
                continue
            stats["edges"] += 1
            if emitted is not None:
                stats["proofs"] += 1
                contributed = v2 | (o2 & s2)
                floor = max(contributed) if contributed else -1
                matches = [j for j in range(n_proposals + 1)
                           if valid_against(emitted, j)]
                stats["matches"] += len(matches)
                if len(matches) > 1 or any(j - 1 < floor for j in matches):
                    stats["counterexample"] = {
                        "path": path + (act,), "proof_counter": emitted.counter,
                        "claimed": emitted.highest, "floor": floor,
                        "matches": matches,
                    }
                    return stats
            key = state_key(e2, v2, o2, s2)
            if key not in seen:
                seen.add(key)
                stats["states"] += 1
                queue.append((e2, v2, o2, s2, path + (act,), depth + 1))
    return stats
