"""Trace-derived metrics and the statistical fits built on them."""

import json

import pytest

from teebft.metrics import (
    chi_square_uniform, complexity_fit, compute_metrics, linear_fit,
)
from teebft.scenario import bundled
from teebft.simnet import Trace
from teebft.world import World


def hand_trace(events):
    tr = Trace()
    for tick, kind, src, dst, counter, dg, note in events:
        tr.append(tick, kind, src, dst, counter, dg, note)
    return tr


def test_metrics_are_recomputable_from_the_line_encoding():
    world = World(bundled("happy_path"))
    result = world.run()
    live = compute_metrics(result.trace, world.cfg.delta)
    replayed = Trace.from_jsonl(result.trace.to_jsonl())
    offline = compute_metrics(replayed, world.cfg.delta)
    assert offline.to_json() == live.to_json()


def test_latency_is_proof_arrival_minus_first_submit():
    from teebft.messages import CounterValue
    cv = CounterValue(0, 0)
    tr = hand_trace([
        (1, "client_send", 1000, 0, None, None, {"rid": 0, "broadcast": 0}),
        # a resend must not reset the submit time
        (30, "client_send", 1000, 0, None, None, {"rid": 0, "broadcast": 1}),
        (45, "client_proof", 1000, 1000, cv, b"h" * 32,
         {"rid": 0, "kind": 1}),
        (67, "client_proof", 1000, 1000, cv, b"h" * 32,
         {"rid": 0, "kind": 2}),
    ])
    m = compute_metrics(tr, delta=10)
    assert m.requests_submitted == 1
    assert m.commit_latency.ticks == [44]
    assert m.commit_latency.mean_round_trips == pytest.approx(4.4)
    assert m.exec_latency.ticks == [66]


def test_commits_count_certified_request_slots():
    world = World(bundled("happy_path"))
    result = world.run()
    m = compute_metrics(result.trace, world.cfg.delta)
    total = world.cfg.clients.count * world.cfg.clients.requests
    assert m.commits == total
    assert m.requests_submitted == total
    assert m.view_changes == 0


def test_commitment_subscribers_cost_two_messages_each():
    from dataclasses import replace
    cfg = bundled("happy_path")
    cfg = replace(cfg, clients=replace(cfg.clients, subscription="commitment"))
    result = World(cfg).run()
    m = compute_metrics(result.trace, cfg.delta)
    assert m.client_messages_per_request == 2.0


def test_linear_fit_flags_a_line():
    fit = linear_fit([3, 5, 9, 17, 33], [4.75 * (n - 1) for n in [3, 5, 9, 17, 33]])
    assert fit.slope == pytest.approx(4.75)
    assert fit.intercept == pytest.approx(-4.75)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.quadratic_p >= 0.05
    assert fit.linear


def test_linear_fit_rejects_a_parabola():
    xs = [3.0, 5.0, 9.0, 17.0, 33.0, 65.0]
    fit = linear_fit(xs, [x * x for x in xs])
    assert fit.quadratic_p < 0.05
    assert not fit.linear


def test_linear_fit_tolerates_noise_on_a_line():
    xs = list(range(4, 20))
    noise = [0.01 * ((7 * i) % 5 - 2) for i in range(len(xs))]
    fit = linear_fit(xs, [2.0 * x + 1.0 + e for x, e in zip(xs, noise)])
    assert fit.linear


def test_linear_fit_needs_enough_points():
    with pytest.raises(ValueError):
        linear_fit([1, 2, 3], [1, 2, 3])


def test_complexity_fit_needs_enough_sizes():
    with pytest.raises(ValueError):
        complexity_fit({3: None, 5: None})


def test_chi_square_separates_uniform_from_skew():
    assert chi_square_uniform([100] * 5) == pytest.approx(1.0)
    assert chi_square_uniform([100, 100, 100, 100, 500]) < 1e-6


def test_message_kind_census_matches_send_records():
    world = World(bundled("happy_path"))
    result = world.run()
    m = compute_metrics(result.trace, world.cfg.delta)
    sends = [r for r in result.trace.records if r["kind"] == "send"]
    assert sum(m.message_kinds.values()) == len(sends)
    assert set(m.message_kinds) >= {"Prepare", "Commit", "Decide",
                                    "Request", "Reply"}
