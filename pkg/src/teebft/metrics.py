"""Metrics extraction and complexity fitting.

Everything here is a pure function of a trace, so any number reported
at run time can be recomputed offline from the stored trace file and
must come out identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .messages import ReplyKind
from .simnet import Trace

CLIENT_BASE = 1000

VIEW_CHANGE_MESSAGES = frozenset({
    "RequestViewChange", "ViewChange", "VoteForNewView", "NewView",
    "FetchProposals", "Proposals",
})


@dataclass
class LatencySummary:
    count: int = 0
    min_ticks: Optional[int] = None
    max_ticks: Optional[int] = None
    mean_ticks: Optional[float] = None
    mean_round_trips: Optional[float] = None
    ticks: list[int] = field(default_factory=list)

    @classmethod
    def of(cls, ticks: list[int], delta: int) -> "LatencySummary":
        if not ticks:
            return cls()
        return cls(count=len(ticks), min_ticks=min(ticks),
                   max_ticks=max(ticks),
                   mean_ticks=sum(ticks) / len(ticks),
                   mean_round_trips=sum(ticks) / len(ticks) / delta,
                   ticks=sorted(ticks))


@dataclass
class Metrics:
    commits: int
    requests_submitted: int
    qc_rounds: int
    view_changes: int
    commit_latency: LatencySummary
    exec_latency: LatencySummary
    inter_replica_messages: int
    client_messages: int
    messages_per_commit: Optional[float]
    messages_per_view_change: Optional[float]
    client_messages_per_request: Optional[float]
    commits_per_round: Optional[float]
    message_kinds: dict[str, int]
    final_tick: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _note(rec: dict) -> dict:
    return json.loads(rec["note"]) if rec["note"] else {}


def compute_metrics(trace: Trace, delta: int) -> Metrics:
    submits: dict[tuple[int, int], int] = {}
    commit_proof: dict[tuple[int, int], int] = {}
    exec_proof: dict[tuple[int, int], int] = {}
    executed: set[tuple[int, int]] = set()
    qc_counters: set[tuple[int, int]] = set()
    views: set[int] = set()
    kinds: dict[str, int] = {}
    inter = 0
    client_msgs = 0
    final_tick = 0

    for rec in trace.records:
        final_tick = max(final_tick, rec["tick"])
        kind = rec["kind"]
        if kind == "send":
            name = _note(rec).get("msg", "?")
            kinds[name] = kinds.get(name, 0) + 1
            if rec["src"] < CLIENT_BASE and rec["dst"] < CLIENT_BASE:
                inter += 1
            else:
                client_msgs += 1
        elif kind == "client_send":
            key = (rec["src"], _note(rec)["rid"])
            submits.setdefault(key, rec["tick"])
        elif kind == "client_proof":
            note = _note(rec)
            key = (rec["src"], note["rid"])
            book = (commit_proof if note["kind"] == int(ReplyKind.COMMITMENT)
                    else exec_proof)
            book.setdefault(key, rec["tick"])
        elif kind == "execute":
            note = _note(rec)
            if note["client"]:
                executed.add((note["client"], note["rid"]))
        elif kind == "qc":
            qc_counters.add(tuple(rec["counter"]))
        elif kind == "view":
            views.add(_note(rec)["view"])

    commit_ticks = [t - submits[k] for k, t in commit_proof.items()
                    if k in submits]
    exec_ticks = [t - submits[k] for k, t in exec_proof.items()
                  if k in submits]
    commits = len(executed)
    vc_msgs = sum(cnt for name, cnt in kinds.items()
                  if name in VIEW_CHANGE_MESSAGES)
    return Metrics(
        commits=commits,
        requests_submitted=len(submits),
        qc_rounds=len(qc_counters),
        view_changes=len(views),
        commit_latency=LatencySummary.of(commit_ticks, delta),
        exec_latency=LatencySummary.of(exec_ticks, delta),
        inter_replica_messages=inter,
        client_messages=client_msgs,
        messages_per_commit=inter / commits if commits else None,
        messages_per_view_change=vc_msgs / len(views) if views else None,
        client_messages_per_request=(client_msgs / len(submits)
                                     if submits else None),
        commits_per_round=(commits / len(qc_counters)
                           if qc_counters else None),
        message_kinds=kinds,
        final_tick=final_tick,
    )


# -- fitting ----------------------------------------------------------------


@dataclass
class FitReport:
    slope: float
    intercept: float
    r_squared: float
    quadratic_p: float

    @property
    def linear(self) -> bool:
        """Linear in the fitted variable: tight fit, no quadratic signal."""
        return self.r_squared >= 0.99 and self.quadratic_p >= 0.05


def linear_fit(xs: list[float], ys: list[float]) -> FitReport:
    """Least squares line plus an F-test on an added quadratic term.

    The F statistic compares residual sums of squares of the nested
    models y ~ x and y ~ x + x^2; a small p-value means the quadratic
    term explains real structure, i.e. the relation is not linear.
    """
    if len(xs) < 4:
        raise ValueError("need at least 4 points to judge curvature")
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    lin = np.polynomial.Polynomial.fit(x, y, 1).convert()
    quad = np.polynomial.Polynomial.fit(x, y, 2).convert()
    rss1 = float(np.sum((y - lin(x)) ** 2))
    rss2 = float(np.sum((y - quad(x)) ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if tss == 0 else 1.0 - rss1 / tss
    dof2 = len(x) - 3
    if rss2 <= 1e-12 * max(tss, 1.0) or dof2 <= 0:
        # both models interpolate; no curvature evidence either way
        p = 1.0 if rss1 - rss2 <= 1e-12 * max(tss, 1.0) else 0.0
    else:
        f_stat = (rss1 - rss2) / (rss2 / dof2)
        p = float(stats.f.sf(f_stat, 1, dof2))
    coeffs = lin.coef
    return FitReport(slope=float(coeffs[1]), intercept=float(coeffs[0]),
                     r_squared=r2, quadratic_p=p)


def complexity_fit(per_n: dict[int, "Metrics"]) -> dict[str, FitReport]:
    """Fit message costs against n over one honest run per system size."""
    if len(per_n) < 4:
        raise ValueError("need metrics for at least 4 values of n")
    ns = sorted(per_n)
    out = {"per_commit": linear_fit(
        ns, [per_n[n].messages_per_commit for n in ns])}
    if all(per_n[n].messages_per_view_change is not None for n in ns):
        out["per_view_change"] = linear_fit(
            ns, [per_n[n].messages_per_view_change for n in ns])
    return out


def chi_square_uniform(counts: list[int]) -> float:
    """p-value that the observed bucket counts came from a uniform draw."""
    return float(stats.chisquare(counts).pvalue)
