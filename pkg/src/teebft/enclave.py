"""Software-emulated trusted enclave for counter-based BFT replication.

Each replica hosts one enclave.  The host is untrusted: it may call the
public operations in any order with any arguments, but it can never make
the enclave sign two different payloads for one counter value, release
two voting shares for one counter value, or emit a usable log proof that
hides a vote.  All secrets (signing key, symmetric keys, the election
seed, generated sharing secrets) stay inside.

The guarantees rest on three pieces of state: a signing watermark that
never decreases within a view, a lifetime set of counters at which a
share has been released, and a lock flag raised whenever a log proof is
emitted and cleared only by a verified sync or a view change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .crypto import Ciphertext, Prg, Share
from .messages import (
    AnchorCert, CounterValue, LogProof, ProposalRef, SignedCounter,
    anchor_sign_bytes, commitment_sign_bytes, counter_sign_bytes,
    parse_share_plaintext, proof_sign_bytes, share_plaintext,
)


class EnclaveError(Exception):
    """Base class; every instance carries context for view-change requests."""


class InvalidMessage(EnclaveError):
    """Signature or ciphertext failed authentication."""


class InvalidCounter(EnclaveError):
    """Counter mismatch: replay, gap, wrong view, or already-used counter."""


class VotingLocked(EnclaveError):
    """A log proof was emitted this view; voting disabled until sync."""


class StaleBinding(EnclaveError):
    """generate_secret called for a counter that is not current or was used."""


class NotLatestVote(EnclaveError):
    """get_highest_message argument is not the last validated proposal."""


class InsufficientQuorum(EnclaveError):
    """merge_highest_messages received fewer than f+1 valid entries."""


@dataclass(frozen=True)
class Keychain:
    """Material installed during trusted setup, sealed from the host."""

    replica_id: int
    n: int
    f: int
    sk: bytes
    pks: dict[int, bytes]
    symkeys: dict[int, bytes]
    r1: bytes        # shared election seed
    genesis: bytes   # stand-in QC digest for the first two elections


@dataclass(frozen=True)
class SecretEnvelope:
    """Output of generate_secret: commitment plus per-replica ciphertexts.

    own_share is returned in the clear: the proposer's own vote.  The
    secret itself never leaves the enclave.
    """

    commitment: SignedCounter
    shares_ct: dict[int, Ciphertext]
    own_share: Share


TraceHook = Callable[[str, Optional[CounterValue], Optional[bytes], dict], None]


def trusted_setup(n: int, f: int, seed: bytes, provider,
                  ) -> tuple[list[Keychain], dict[int, bytes], bytes]:
    """Derive all per-replica key material from one setup seed.

    Models the attested provisioning step: every enclave receives its own
    signing key, the full public-key directory, all symmetric keys and the
    shared election seed.  Hosts receive only the public directory.
    Returns (keychains, public_keys, genesis_digest).
    """
    r1 = crypto.digest(seed + b"/r1")[:16]
    genesis = crypto.digest(seed + b"/genesis")
    pks: dict[int, bytes] = {}
    sks: dict[int, bytes] = {}
    symkeys: dict[int, bytes] = {}
    for rid in range(n):
        sk, pk = provider.keygen(seed + b"/replica" + rid.to_bytes(4, "little"))
        sks[rid], pks[rid] = sk, pk
        symkeys[rid] = crypto.digest(
            seed + b"/sym" + rid.to_bytes(4, "little"))[:16]
    chains = [
        Keychain(rid, n, f, sks[rid], dict(pks), dict(symkeys), r1, genesis)
        for rid in range(n)
    ]
    return chains, pks, genesis


class Enclave:
    def __init__(self, keys: Keychain, provider, rng: Prg,
                 trace: Optional[TraceHook] = None):
        self._keys = keys
        self._provider = provider
        self._rng = rng
        self._trace = trace or (lambda *a: None)
        self._v = 0
        self._next_c = 0                      # signing watermark, monotone per view
        self._last_validated: Optional[CounterValue] = None
        self._locked = False
        self._released: set[CounterValue] = set()
        self._anchored: set[int] = set()      # target views, lifetime guard
        self._next_leader: Optional[tuple[int, int]] = None   # (view, id)
        leader0 = self._election(0, keys.genesis)
        self._proposer: Optional[int] = leader0
        self._view_proposers: set[int] = {leader0}

    # -- read-only host view -------------------------------------------------

    @property
    def replica_id(self) -> int:
        return self._keys.replica_id

    @property
    def view(self) -> int:
        return self._v

    @property
    def counter(self) -> int:
        return self._next_c

    @property
    def last_validated(self) -> Optional[CounterValue]:
        return self._last_validated

    @property
    def locked(self) -> bool:
        return self._locked

    @property
    def proposer(self) -> Optional[int]:
        return self._proposer

    # -- internals -----------------------------------------------------------

    def _sign(self, data: bytes) -> bytes:
        return self._provider.sign(self._keys.sk, data)

    def _check_sig(self, signer: int, data: bytes, sig: bytes) -> bool:
        pk = self._keys.pks.get(signer)
        return pk is not None and self._provider.verify(pk, data, sig)

    def _expected_vote(self) -> CounterValue:
        if self._last_validated is None:
            return CounterValue(0, self._v)
        return self._last_validated.next()

    def _election(self, v_next: int, qc_digest: bytes) -> int:
        seed = self._keys.r1 + qc_digest + v_next.to_bytes(8, "little")
        return Prg(seed).next_u64() % self._keys.n

    # -- operations ----------------------------------------------------------

    def create_counter(self, x: bytes) -> SignedCounter:
        """Sign payload digest x at the current counter, then advance.

        The signed counter is also recorded as self-validated so the
        proposer's own log stays continuous through its proposals.
        """
        cv = CounterValue(self._next_c, self._v)
        sig = self._sign(counter_sign_bytes(self.replica_id, x, cv))
        self._next_c += 1
        self._last_validated = cv
        self._trace("sign", cv, x, {})
        return SignedCounter(x, cv, self.replica_id, sig)

    def generate_secret(self, c: int, v: int) -> SecretEnvelope:
        """Fresh sharing secret bound to (c, v); must be the current counter."""
        cv = CounterValue(c, v)
        if (c, v) != (self._next_c, self._v):
            raise StaleBinding(f"bound {cv}, current ({self._next_c},{self._v})")
        if cv in self._released:
            raise StaleBinding(f"counter {cv} already carries a released share")
        secret = crypto.random_secret(self._rng)
        h = crypto.digest(crypto.secret_to_bytes(secret))
        shares = crypto.share_secret(secret, self._keys.f, self._keys.n, self._rng)
        cts: dict[int, Ciphertext] = {}
        own: Optional[Share] = None
        for rid in range(self._keys.n):
            share = shares[rid]   # replica rid holds evaluation point rid+1
            if rid == self.replica_id:
                own = share
                continue
            cts[rid] = self._provider.encrypt(
                self._keys.symkeys[rid], share_plaintext(share, cv, h), self._rng
            )
        sig = self._sign(commitment_sign_bytes(self.replica_id, h, cv))
        self._released.add(cv)   # the proposer's own share is its vote
        self._trace("secretgen", cv, h, {})
        self._trace("release", cv, h, {"own": 1})
        return SecretEnvelope(SignedCounter(h, cv, self.replica_id, sig), cts, own)

    def verify_counter(self, sc: SignedCounter, ct: Ciphertext) -> Share:
        """Validate a proposal and release this replica's share: one vote."""
        if self._proposer is None or sc.signer != self._proposer:
            raise InvalidMessage(f"signer {sc.signer} is not the proposer")
        if not self._check_sig(sc.signer,
                               counter_sign_bytes(sc.signer, sc.digest, sc.counter),
                               sc.sig):
            raise InvalidMessage("bad proposal signature")
        try:
            raw = self._provider.decrypt(
                self._keys.symkeys[self.replica_id], ct)
            share, embedded, h = parse_share_plaintext(raw)
        except Exception as exc:
            raise InvalidMessage(f"share ciphertext rejected: {exc}") from exc
        if embedded != sc.counter:
            raise InvalidCounter(
                f"envelope bound to {embedded}, proposal at {sc.counter}")
        if share.index != self.replica_id + 1:
            raise InvalidCounter("share addressed to a different replica")
        if self._locked:
            raise VotingLocked(f"log proof emitted in view {self._v}")
        expected = self._expected_vote()
        if sc.counter != expected:
            raise InvalidCounter(f"expected {expected}, got {sc.counter}")
        if sc.counter in self._released:
            raise InvalidCounter(f"share already released at {sc.counter}")
        self._released.add(sc.counter)
        self._last_validated = sc.counter
        self._next_c = max(self._next_c, sc.counter.c + 1)
        self._trace("release", sc.counter, h, {"prop": sc.digest.hex()[:16]})
        return share

    def get_highest_message(self, highest: Optional[SignedCounter]) -> LogProof:
        """Attest the latest vote; consumes a counter and locks voting.

        Pass None if this enclave voted for nothing in the current view.
        """
        if highest is None:
            if self._last_validated is not None:
                raise NotLatestVote("log is not empty")
            ref = None
        else:
            if self._last_validated != highest.counter:
                raise NotLatestVote(
                    f"latest vote is {self._last_validated}, got {highest.counter}")
            if highest.signer not in self._view_proposers or not self._check_sig(
                    highest.signer,
                    counter_sign_bytes(highest.signer, highest.digest, highest.counter),
                    highest.sig):
                raise InvalidMessage("highest proposal signature rejected")
            ref = ProposalRef(highest.digest, highest.counter)
        cv = CounterValue(self._next_c, self._v)
        sig = self._sign(proof_sign_bytes(self.replica_id, ref, cv))
        self._next_c += 1
        self._locked = True
        self._trace("proof", cv, ref.digest if ref else None, {})
        return LogProof(ref, cv, self.replica_id, sig)

    def merge_highest_messages(
        self,
        entries: list[tuple[Optional[SignedCounter], LogProof]],
        target_view: int,
    ) -> AnchorCert:
        """Select the global highest vote from f+1 valid proofs and sign it.

        Only callable by the elected next leader for target_view.
        """
        if self._next_leader != (target_view, self.replica_id):
            raise InvalidMessage("caller is not the next leader for this view")
        if target_view in self._anchored:
            raise StaleBinding("anchor already issued for this target view")
        best: Optional[ProposalRef] = None
        seen: set[int] = set()
        for highest, proof in entries:
            if not self._valid_entry(highest, proof) or proof.signer in seen:
                continue
            seen.add(proof.signer)
            if highest is not None:
                ref = ProposalRef(highest.digest, highest.counter)
                if best is None or ref.counter > best.counter:
                    best = ref
        if len(seen) < self._keys.f + 1:
            raise InsufficientQuorum(
                f"{len(seen)} valid entries, need {self._keys.f + 1}")
        cv = CounterValue(self._next_c, self._v)
        sig = self._sign(anchor_sign_bytes(
            self.replica_id, best, target_view, self._v, cv))
        self._next_c += 1
        self._locked = True
        self._anchored.add(target_view)
        self._trace("anchor", cv, best.digest if best else None,
                    {"target": target_view})
        return AnchorCert(best, target_view, self._v, cv, self.replica_id, sig)

    def _valid_entry(self, highest: Optional[SignedCounter],
                     proof: LogProof) -> bool:
        if proof.counter.v != self._v:
            return False
        if highest is None:
            ref = None
            if proof.counter.c != 0:
                return False   # an empty log supports only a counter-0 proof
        else:
            if highest.counter.v != self._v:
                return False
            if proof.counter.c != highest.counter.c + 1:
                return False   # proof must sit right above the highest vote
            if highest.signer not in self._view_proposers:
                return False
            if not self._check_sig(
                    highest.signer,
                    counter_sign_bytes(highest.signer, highest.digest,
                                       highest.counter),
                    highest.sig):
                return False
            ref = ProposalRef(highest.digest, highest.counter)
        if proof.highest != ref:
            return False
        return self._check_sig(
            proof.signer, proof_sign_bytes(proof.signer, ref, proof.counter),
            proof.sig)

    def sync_with_highest(self, anchor: AnchorCert) -> None:
        """Adopt the merged highest vote; clears any log-proof lock."""
        if anchor.from_view != self._v:
            raise InvalidCounter(
                f"anchor for view {anchor.from_view}, enclave in {self._v}")
        if self._next_leader != (anchor.target_view, anchor.signer):
            raise InvalidMessage("anchor signer is not the elected next leader")
        if not self._check_sig(
                anchor.signer,
                anchor_sign_bytes(anchor.signer, anchor.ref, anchor.target_view,
                                  anchor.from_view, anchor.counter),
                anchor.sig):
            raise InvalidMessage("bad anchor signature")
        if anchor.ref is None:
            self._last_validated = None
        else:
            self._last_validated = anchor.ref.counter
            self._next_c = max(self._next_c, anchor.ref.counter.c + 1)
        self._locked = False
        self._proposer = anchor.signer
        self._view_proposers.add(anchor.signer)

    def update_view(self) -> None:
        """Advance to the next view; counters restart at zero."""
        self._v += 1
        self._next_c = 0
        self._last_validated = None
        self._locked = False
        if self._next_leader is not None and self._next_leader[0] == self._v:
            self._proposer = self._next_leader[1]
        else:
            self._proposer = None
        self._view_proposers = set() if self._proposer is None else {self._proposer}

    def elect_leader(self, v_next: int, last_qc_digest: bytes) -> int:
        """Deterministic, unpredictable leader for v_next.

        last_qc_digest is the digest of the QC that sealed the last
        completed view transition (the genesis digest before any).
        """
        rid = self._election(v_next, last_qc_digest)
        if v_next > self._v:
            self._next_leader = (v_next, rid)
        return rid
