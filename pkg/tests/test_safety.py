"""Detector sanity: every safety rule must fire on a synthetic bad trace
and stay silent on the equivalent good one."""

import json

from teebft.safety import check_partial_synchrony, check_safety
from teebft.simnet import Trace


def t(*events):
    tr = Trace()
    for tick, kind, src, dst, counter, dg, note in events:
        tr.append(tick, kind, src, dst, counter, dg, note)
    return tr


class CV:
    """Minimal counter stand-in: trace only needs .c and .v."""

    def __init__(self, c, v):
        self.c, self.v = c, v


def rules(trace, n=3, f=1, corrupt=()):
    return [v.rule for v in check_safety(trace, n, f, corrupt).violations]


def test_clean_trace_passes():
    tr = t(
        (1, "enclave.sign", 0, 0, CV(0, 0), b"a" * 32, {}),
        (1, "enclave.release", 0, 0, CV(0, 0), b"h" * 32, {"own": 1}),
        (2, "enclave.release", 1, 1, CV(0, 0), b"h" * 32, {"prop": "aa"}),
        (3, "qc", 0, 0, CV(0, 0), b"h" * 32, {"kind": 1}),
        (4, "execute", 0, 0, CV(0, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 1, 1, CV(0, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
    )
    assert check_safety(tr, 3, 1).ok


def test_equivocation_detected():
    tr = t(
        (1, "enclave.sign", 0, 0, CV(2, 0), b"a" * 32, {}),
        (2, "enclave.sign", 0, 0, CV(2, 0), b"b" * 32, {}),
    )
    assert rules(tr) == ["equivocation"]


def test_equivocation_needs_same_signer_and_counter():
    tr = t(
        (1, "enclave.sign", 0, 0, CV(2, 0), b"a" * 32, {}),
        (2, "enclave.sign", 1, 1, CV(2, 0), b"b" * 32, {}),
        (3, "enclave.sign", 0, 0, CV(3, 0), b"b" * 32, {}),
    )
    assert check_safety(tr, 3, 1).ok


def test_double_release_detected():
    tr = t(
        (1, "enclave.release", 2, 2, CV(4, 1), b"h" * 32, {"own": 1}),
        (9, "enclave.release", 2, 2, CV(4, 1), b"h" * 32, {"prop": "aa"}),
    )
    assert rules(tr) == ["double_release"]


def test_unbacked_qc_detected():
    tr = t(
        (1, "enclave.release", 0, 0, CV(0, 0), b"h" * 32, {"own": 1}),
        (2, "qc", 0, 0, CV(0, 0), b"h" * 32, {"kind": 1}),
    )
    assert rules(tr, f=1) == ["qc_unbacked"]


def test_qc_split_detected():
    base = [
        (1, "enclave.release", 0, 0, CV(0, 0), b"h" * 32, {"own": 1}),
        (1, "enclave.release", 1, 1, CV(0, 0), b"h" * 32, {"prop": "x"}),
        (1, "enclave.release", 2, 2, CV(0, 0), b"g" * 32, {"prop": "x"}),
        (1, "enclave.release", 0, 0, CV(0, 0), b"g" * 32, {"own": 1}),
        (2, "qc", 0, 0, CV(0, 0), b"h" * 32, {"kind": 1}),
        (3, "qc", 1, 1, CV(0, 0), b"g" * 32, {"kind": 1}),
    ]
    got = rules(t(*base))
    assert "qc_split" in got
    # the duplicated release is independently flagged too
    assert "double_release" in got


def test_exec_divergence_detected():
    tr = t(
        (4, "execute", 0, 0, CV(1, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 1, 1, CV(1, 0), b"a" * 32, {"res": "r2", "client": 9, "rid": 0}),
    )
    assert rules(tr) == ["exec_divergence"]


def test_exec_divergence_ignores_corrupt_claims():
    tr = t(
        (4, "execute", 0, 0, CV(1, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 1, 1, CV(1, 0), b"a" * 32, {"res": "r2", "client": 9, "rid": 0}),
    )
    assert check_safety(tr, 3, 1, corrupt={1}).ok


def test_exec_replay_detected():
    tr = t(
        (4, "execute", 0, 0, CV(1, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 0, 0, CV(1, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
    )
    assert "exec_replay" in rules(tr)


def test_exec_order_detected():
    tr = t(
        (4, "execute", 0, 0, CV(3, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 0, 0, CV(1, 0), b"b" * 32, {"res": "r2", "client": 9, "rid": 1}),
    )
    assert rules(tr) == ["exec_order"]


def test_exec_order_allows_new_view_restart():
    tr = t(
        (4, "execute", 0, 0, CV(3, 0), b"a" * 32, {"res": "r1", "client": 9, "rid": 0}),
        (5, "execute", 0, 0, CV(1, 1), b"b" * 32, {"res": "r2", "client": 9, "rid": 1}),
    )
    assert check_safety(tr, 3, 1).ok


def test_election_split_detected():
    tr = t(
        (4, "elect", 0, 0, None, None, {"from": 0, "target": 1, "leader": 1}),
        (5, "elect", 1, 1, None, None, {"from": 0, "target": 1, "leader": 2}),
    )
    assert rules(tr) == ["election_split"]


def test_view_split_detected():
    tr = t(
        (4, "view", 0, 0, None, None, {"view": 1, "leader": 1}),
        (5, "view", 1, 1, None, None, {"view": 1, "leader": 2}),
    )
    assert rules(tr) == ["view_split"]


def test_anchor_dup_detected():
    tr = t(
        (4, "enclave.anchor", 0, 0, CV(5, 0), b"a" * 32, {"target": 1}),
        (5, "enclave.anchor", 0, 0, CV(6, 0), b"a" * 32, {"target": 1}),
    )
    assert rules(tr) == ["anchor_dup"]


# -- partial synchrony -------------------------------------------------------


def _sent_and_delivered(deliver_tick):
    return t(
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (deliver_tick, "deliver", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (500, "timer", 0, 0, None, None, {"name": "pad"}),
    )


def test_sync_compliant_trace_passes():
    rep = check_partial_synchrony(_sent_and_delivered(110), delta=10, gst=0)
    assert rep.ok and rep.counts["bounded_send"] == 1


def test_sync_late_delivery_fails():
    rep = check_partial_synchrony(_sent_and_delivered(111), delta=10, gst=0)
    assert [v.rule for v in rep.violations] == ["late_delivery"]


def test_sync_missing_delivery_fails():
    tr = t(
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (500, "timer", 0, 0, None, None, {"name": "pad"}),
    )
    assert not check_partial_synchrony(tr, delta=10, gst=0).ok


def test_sync_ignores_pre_gst_and_corrupt_and_tail():
    tr = t(
        # pre-GST send may vanish
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        # corrupt endpoint send may vanish
        (300, "send", 2, 1, None, b"d" * 32, {"msg": "Prepare"}),
        # still in flight when the trace ends
        (495, "send", 0, 1, None, b"e" * 32, {"msg": "Commit"}),
        (500, "timer", 0, 0, None, None, {"name": "pad"}),
    )
    assert check_partial_synchrony(tr, delta=10, gst=200, corrupt={2}).ok


def test_sync_two_sends_need_two_deliveries():
    tr = t(
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (105, "deliver", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (500, "timer", 0, 0, None, None, {"name": "pad"}),
    )
    assert not check_partial_synchrony(tr, delta=10, gst=0).ok


def test_fabricated_deliveries_do_not_count():
    tr = t(
        (100, "send", 0, 1, None, b"d" * 32, {"msg": "Prepare"}),
        (105, "deliver", 0, 1, None, b"d" * 32,
         {"msg": "Prepare", "fabricated": 1}),
        (500, "timer", 0, 0, None, None, {"name": "pad"}),
    )
    assert not check_partial_synchrony(tr, delta=10, gst=0).ok


def test_trace_roundtrip_preserves_verdict():
    tr = _sent_and_delivered(111)
    back = Trace.from_jsonl(tr.to_jsonl())
    assert json.dumps(back.records) == json.dumps(tr.records)
    assert not check_partial_synchrony(back, delta=10, gst=0).ok
