"""Adversarial searches over the enclave API.

The bounded exhaustive search is the strong result: within its horizon no
call sequence yields a log proof that downstream validation would accept
for a prefix below the enclave's own contributions.  The random walk
pushes far past the horizon with weaker, per-event invariants.
"""

from teebft.crypto import Prg, digest
from teebft.enclave import EnclaveError

from helpers import EnclaveWorld, search_vote_omission


def test_no_reachable_proof_hides_a_contribution():
    result = search_vote_omission(max_depth=6, n_proposals=6)
    assert result["counterexample"] is None
    assert result["states"] > 100      # the horizon was actually explored
    assert result["proofs"] > 0
    assert result["matches"] > 0       # some proofs do validate somewhere


def test_proof_validates_against_at_most_one_prefix():
    # the search flags multi-prefix proofs as counterexamples too; a clean
    # run plus at least one match means every usable proof pinned down a
    # unique log length
    result = search_vote_omission(max_depth=5, n_proposals=4)
    assert result["counterexample"] is None
    assert result["matches"] <= result["proofs"]


def test_random_walk_keeps_counters_unique():
    events = []
    world = EnclaveWorld(seed=b"walk")
    leader = world.leader
    proposals = [world.propose(leader, digest(b"w%d" % i)) for i in range(12)]
    target = world.followers()[0]
    target._trace = lambda kind, cv, dg, note: events.append(
        (kind, cv, dg, dict(note)))
    rng = Prg(b"walk-driver")
    for step in range(3000):
        roll = rng.randrange(100)
        try:
            if roll < 40:
                sc, env = proposals[rng.randrange(12)]
                target.verify_counter(sc, env.shares_ct[target.replica_id])
            elif roll < 55:
                k = rng.randrange(13)
                target.get_highest_message(
                    None if k == 12 else proposals[k][0])
            elif roll < 70:
                target.generate_secret(target.counter, target.view)
            elif roll < 85:
                target.create_counter(digest(b"s%d" % step))
            elif roll < 95:
                target.elect_leader(target.view + 1 + rng.randrange(3),
                                    digest(b"qc%d" % step))
            else:
                target.update_view()
        except EnclaveError:
            pass

    signed = [(cv, dg) for kind, cv, dg, _ in events if kind == "sign"]
    assert len({cv for cv, _ in signed}) == len(signed)
    released = [cv for kind, cv, _, _ in events if kind == "release"]
    assert len(set(released)) == len(released)
    # a proof locks voting in its view; own-share releases are exempt since
    # a fresh secret never backs another proposer's quorum
    locked_view = None
    for kind, cv, dg, note in events:
        if kind == "proof":
            locked_view = cv.v
        elif kind == "release" and "own" not in note:
            assert locked_view is None or cv.v > locked_view
