"""TEE-backed BFT replication with secret-shared quorum certificates.

The package couples a software-emulated trusted enclave (monotonic
counters, sealed secret sharing, verifiable leader election) with a
linear-message replication protocol, a deterministic discrete-event
network simulator, a scriptable Byzantine adversary, and a measurement
harness that turns the protocol's safety and complexity claims into
executable checks.
"""

__version__ = "0.1.0"
