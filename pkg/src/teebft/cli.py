"""Command line front end.

Four verbs:

* run           one scenario: trace file, metrics file, safety verdict
* check-safety  offline re-verification of a stored trace
* sweep         a (seed, n) grid over one scenario template
* fit           complexity fit over stored metrics files

Exit code 0 means every requested check passed; 1 means a safety
violation, a liveness miss in a liveness-tagged scenario, or a failed
fit; 2 means bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from .metrics import compute_metrics, complexity_fit
from .safety import check_partial_synchrony, check_safety
from .scenario import (
    SCHEMA_VERSION, ScenarioConfig, ScenarioError, bundled, bundled_names,
    load_scenario,
)
from .simnet import Trace
from .world import World


def _load_config(ref: str) -> ScenarioConfig:
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    name = path.stem
    if name in bundled_names():
        return bundled(name)
    raise ScenarioError(
        f"{ref}: no such file, and no bundled scenario named {name!r} "
        f"(bundled: {', '.join(bundled_names())})")


def _config_meta(cfg: ScenarioConfig, corrupt: set[int]) -> dict:
    return {
        "meta": 1, "schema": SCHEMA_VERSION, "name": cfg.name,
        "n": cfg.n, "f": cfg.f, "seed": cfg.seed, "delta": cfg.delta,
        "gst": cfg.gst, "mode": cfg.mode,
        "corrupt": sorted(corrupt),
        "expect_liveness": cfg.expect_liveness,
    }


def write_trace_file(path: str, meta: dict, trace: Trace) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")))
        fh.write("\n")
        fh.write(trace.to_jsonl())


def read_trace_file(path: str) -> tuple[dict, Trace]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or "meta" not in json.loads(lines[0] or "{}"):
        raise ScenarioError(f"{path}: missing meta header line")
    meta = json.loads(lines[0])
    return meta, Trace.from_jsonl("\n".join(lines[1:]))


def _verdict(result, cfg: ScenarioConfig, corrupt: set[int],
             out=sys.stdout) -> int:
    rep = check_safety(result.trace, cfg.n, cfg.f, corrupt)
    sync = check_partial_synchrony(result.trace, cfg.delta, cfg.gst, corrupt)
    code = 0
    for v in rep.violations + sync.violations:
        print(f"VIOLATION {v}", file=out)
        code = 1
    if result.liveness_timeout and cfg.expect_liveness:
        print(f"LIVENESS missed at max_ticks={cfg.max_ticks}", file=out)
        code = 1
    status = "FAIL" if code else "PASS"
    print(f"{status} {cfg.name}: n={cfg.n} seed={cfg.seed} mode={cfg.mode} "
          f"completed={result.completed} final_tick={result.final_tick}",
          file=out)
    return code


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.reseeded(args.seed)
    if args.n is not None:
        cfg = cfg.resized(args.n)
    if args.mode is not None:
        cfg = cfg.with_mode(args.mode)
    world = World(cfg)
    result = world.run()
    if args.trace:
        write_trace_file(args.trace, _config_meta(cfg, world.corrupt),
                         result.trace)
    if args.metrics:
        m = compute_metrics(result.trace, cfg.delta)
        doc = {"config": _config_meta(cfg, world.corrupt),
               "metrics": asdict(m)}
        Path(args.metrics).write_text(json.dumps(doc, indent=2,
                                                 sort_keys=True))
    return _verdict(result, cfg, world.corrupt)


def cmd_check_safety(args) -> int:
    meta, trace = read_trace_file(args.trace)
    corrupt = set(meta["corrupt"])
    rep = check_safety(trace, meta["n"], meta["f"], corrupt)
    sync = check_partial_synchrony(trace, meta["delta"], meta["gst"], corrupt)
    for v in rep.violations + sync.violations:
        print(f"VIOLATION {v}")
    checked = {**rep.counts, **sync.counts}
    status = "FAIL" if rep.violations or sync.violations else "PASS"
    print(f"{status} {meta['name']}: {len(trace.records)} records, "
          f"checked {checked}")
    return 0 if status == "PASS" else 1


def _sweep_one(packed) -> dict:
    ref, seed, n = packed
    cfg = _load_config(ref).reseeded(seed)
    if n is not None:
        cfg = cfg.resized(n)
    world = World(cfg)
    result = world.run()
    rep = check_safety(result.trace, cfg.n, cfg.f, world.corrupt)
    sync = check_partial_synchrony(result.trace, cfg.delta, cfg.gst,
                                   world.corrupt)
    m = compute_metrics(result.trace, cfg.delta)
    live_miss = result.liveness_timeout and cfg.expect_liveness
    return {
        "seed": seed, "n": cfg.n,
        "violations": [str(v) for v in rep.violations + sync.violations],
        "liveness_miss": live_miss,
        "commits": m.commits, "view_changes": m.view_changes,
        "final_tick": result.final_tick,
        "commits_per_round": m.commits_per_round,
    }


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def cmd_sweep(args) -> int:
    seeds = _parse_seed_range(args.seeds)
    ns = ([int(x) for x in args.n_list.split(",") if x]
          if args.n_list else [None])
    grid = [(args.template, seed, n) for n in ns for seed in seeds]
    jobs = args.jobs or min(len(grid), os.cpu_count() or 1)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, grid, chunksize=4))
    else:
        rows = [_sweep_one(g) for g in grid]
    rows.sort(key=lambda r: (r["n"], r["seed"]))

    bad = [r for r in rows if r["violations"] or r["liveness_miss"]]
    total_commits = sum(r["commits"] for r in rows)
    total_vcs = sum(r["view_changes"] for r in rows)
    print(f"sweep {args.template}: {len(rows)} runs, "
          f"{total_commits} commits, {total_vcs} view-changes, "
          f"{len(bad)} failures")
    if args.report:
        Path(args.report).write_text(json.dumps(rows, indent=2,
                                                sort_keys=True))
    if bad:
        first = bad[0]
        why = first["violations"] or ["liveness miss"]
        print(f"FAIL first at n={first['n']} seed={first['seed']}: {why[0]}")
        return 1
    print("PASS")
    return 0


def cmd_fit(args) -> int:
    from .metrics import Metrics, LatencySummary
    per_n = {}
    for path in sorted(Path(args.metrics_dir).glob("*.json")):
        doc = json.loads(path.read_text())
        raw = doc["metrics"]
        raw["commit_latency"] = LatencySummary(**raw["commit_latency"])
        raw["exec_latency"] = LatencySummary(**raw["exec_latency"])
        per_n[doc["config"]["n"]] = Metrics(**raw)
    try:
        fits = complexity_fit(per_n)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    code = 0
    for name, fit in fits.items():
        flag = "linear" if fit.linear else "NOT LINEAR"
        print(f"{name}: slope={fit.slope:.3f} intercept={fit.intercept:.3f} "
              f"r2={fit.r_squared:.5f} quad_p={fit.quadratic_p:.3f} "
              f"[{flag}]")
        if not fit.linear:
            code = 1
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="teebft",
        description="TEE-backed BFT replication under a deterministic "
                    "network simulator")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--config", required=True,
                   help="scenario file or bundled scenario name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None,
                   help="override system size (f follows as (n-1)/2)")
    p.add_argument("--mode", choices=["basic", "pipelined"], default=None)
    p.add_argument("--trace", help="write the trace (JSONL) here")
    p.add_argument("--metrics", help="write metrics (JSON) here")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("check-safety", help="re-verify a stored trace")
    p.add_argument("--trace", required=True)
    p.set_defaults(fn=cmd_check_safety)

    p = sub.add_parser("sweep", help="grid of (seed, n) runs")
    p.add_argument("--template", required=True,
                   help="scenario file or bundled scenario name")
    p.add_argument("--seeds", required=True, help="A..B or comma list")
    p.add_argument("--n-list", default=None, help="comma list of n values")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--report", help="write per-run rows (JSON) here")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("fit", help="complexity fit over metrics files")
    p.add_argument("--metrics-dir", required=True)
    p.set_defaults(fn=cmd_fit)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
