"""Message log validation.

A replica's log for a view is the ordered list of proposals it voted for.
A log with proof is valid when every proposal signature checks out, the
counters run contiguously from zero, and the proof's own counter sits
exactly one above the highest vote (zero for an empty log).  The enclave
guarantees that no replica, honest or not, can produce a valid log that
hides one of its votes.
"""

from __future__ import annotations

from typing import Optional

from .messages import (
    CounterValue, LogProof, Proposal, ProposalRef,
    counter_sign_bytes, proof_sign_bytes, proposal_digest,
)


def validate_log(proposals: list[Proposal], proof: LogProof, view: int,
                 proposer_ids: set[int], pks: dict[int, bytes], provider,
                 ) -> tuple[bool, str]:
    """Check a (log, proof) pair against the validity rules.

    Returns (ok, reason); reason names the first failed rule.
    """
    for i, p in enumerate(proposals):
        sc = p.leader_sig
        if sc is None or sc.signer not in proposer_ids:
            return False, f"proposal {i}: unsigned or wrong proposer"
        if sc.counter != p.counter or p.counter != CounterValue(i, view):
            return False, f"proposal {i}: counters not contiguous from zero"
        if sc.digest != proposal_digest(p):
            return False, f"proposal {i}: digest mismatch"
        pk = pks.get(sc.signer)
        if pk is None or not provider.verify(
                pk, counter_sign_bytes(sc.signer, sc.digest, sc.counter), sc.sig):
            return False, f"proposal {i}: bad signature"

    expected_ref: Optional[ProposalRef] = None
    if proposals:
        last = proposals[-1]
        expected_ref = ProposalRef(proposal_digest(last), last.counter)
    if proof.highest != expected_ref:
        return False, "proof does not reference the log head"
    want_c = proposals[-1].counter.c + 1 if proposals else 0
    if proof.counter != CounterValue(want_c, view):
        return False, (f"proof counter {proof.counter}, "
                       f"expected ({want_c},{view})")
    pk = pks.get(proof.signer)
    if pk is None or not provider.verify(
            pk, proof_sign_bytes(proof.signer, proof.highest, proof.counter),
            proof.sig):
        return False, "bad proof signature"
    return True, "ok"
