"""Command-line entry point.

Exit codes: 0 success, 1 infeasible or timed out, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from typing import List, Optional

from .baselines import ALGORITHMS, EnumerationLimitExceeded
from .metrics import weighted_spread
from .queueing import TraceError, bucket_rmse, histogram_predictor, oracle_predictor, write_series_csv
from .sim import (BenchConfig, DEFAULT_ALPHAS, LpjConfig, SimConfig, TraceConfig, benchmark, dump_trace,
                  generate_trace, load_settings, load_trace, replay, run_algorithm, write_bench_csv)
from .solver import AUTO, COL, FEASIBLE_TIME_LIMIT, ROW, InfeasibleError, SolverConfig, build_mip, \
    resolve_affinity, solve
from .topology import AllocationState, TopologyError, load_topology
from .workload import ProfileDB, ProfileEntry, UnknownGpuType, WorkloadError, build_comm_matrix, load_job

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("lpjsched")


class UsageError(Exception):
    pass


def _alpha(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"alpha must lie in [0, 1], got {value}")
    return value


def _alpha_list(text: str) -> List[float]:
    return [_alpha(x) for x in text.split(",") if x.strip()]


def _open_out(path: Optional[str]):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def _profiles(path: Optional[str]) -> ProfileDB:
    return ProfileDB.load(path) if path else ProfileDB.seed()


# -- subcommands ---------------------------------------------------------------------------

def cmd_schedule(args) -> int:
    topo = load_topology(args.topology)
    spec = load_job(args.job)
    alpha, beta = resolve_affinity(spec, _profiles(args.profiles), args.alpha)
    matrix = build_comm_matrix(spec, topo.gpus_per_node)
    state = AllocationState.empty(topo)
    cfg = BenchConfig(seed=args.seed, time_limit=args.time_limit, unit=args.unit)
    start = time.perf_counter()
    placement, detail = run_algorithm(args.algorithm, matrix, topo, state, alpha, cfg)
    latency = time.perf_counter() - start
    score = weighted_spread(placement, matrix, alpha, beta)
    out = _open_out(args.out)
    try:
        out.write(placement.to_json() + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    line = (f"algorithm={args.algorithm} weighted_spread={score:.6g} alpha={alpha:.6g} "
            f"beta={beta:.6g} latency_s={latency:.4f}")
    print(line, file=sys.stdout if args.out not in (None, "-") else sys.stderr)
    return EXIT_INFEASIBLE if detail == FEASIBLE_TIME_LIMIT else EXIT_OK


def cmd_solve(args) -> int:
    """Print the raw MIP solution for the job's scheduling units."""
    topo = load_topology(args.topology)
    spec = load_job(args.job)
    alpha, beta = resolve_affinity(spec, _profiles(args.profiles), args.alpha)
    matrix = build_comm_matrix(spec, topo.gpus_per_node)
    unit = ROW if args.unit == AUTO else args.unit
    inst = build_mip(matrix, topo, AllocationState.empty(topo), alpha, beta, unit)
    sol = solve(inst, SolverConfig(time_limit=args.time_limit))
    doc = {"instance": asdict(inst), "solution": sol.to_dict()}
    doc["solution"]["stats"].pop("wall_time", None)
    out = _open_out(args.out)
    try:
        out.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK if sol.status not in ("Infeasible", FEASIBLE_TIME_LIMIT) else EXIT_INFEASIBLE


def cmd_benchmark(args) -> int:
    settings = load_settings(args.settings)
    algorithms = [a for a in args.algorithms.split(",") if a.strip()]
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise UsageError(f"unknown algorithms: {', '.join(unknown)}")
    cfg = BenchConfig(seed=args.seed, time_limit=args.time_limit, unit=args.unit)
    rows = benchmark(settings, algorithms, args.alphas, cfg, jobs=args.jobs)
    out = _open_out(args.out)
    try:
        write_bench_csv(rows, out, timing=not args.no_timing)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_simulate(args) -> int:
    topo = load_topology(args.topology)
    trace = load_trace(args.trace)
    if args.predictor == "oracle":
        predictor = oracle_predictor(args.noise, args.seed)
    else:
        if not args.train:
            raise UsageError("--predictor histogram needs --train")
        training = load_trace(args.train)
        predictor = histogram_predictor(training)
        print(f"histogram predictor training RMSE: {bucket_rmse(predictor, training):.3f} buckets",
              file=sys.stderr)
    cfg = SimConfig(interval=args.interval, alpha=args.alpha, unit=args.unit,
                    solver=SolverConfig(time_limit=args.time_limit),
                    profiles=ProfileDB.load(args.profiles) if args.profiles else None)
    result = replay(trace, topo, cfg, predictor)
    out = _open_out(args.out)
    try:
        write_series_csv(result.series, out)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.events:
        with open(args.events, "w") as f:
            f.write(result.log.to_jsonl())
    retention = "n/a" if result.retention_at_arrival is None else f"{result.retention_at_arrival:.4f}"
    print(f"events={len(result.log)} retention_at_arrival={retention} violations={len(result.violations)} "
          f"preempted={len(result.preempted)}", file=sys.stderr)
    return EXIT_OK


def cmd_trace(args) -> int:
    lpj = None
    if args.lpj:
        dp, tp, pp = (int(x) for x in args.lpj.split(","))
        lpj = LpjConfig(dp=dp, tp=tp, pp=pp, announce_time=args.announce, lead_time=args.lead,
                        duration=args.lpj_duration)
    cfg = TraceConfig(jobs=args.count, arrival_rate=args.rate, mean_duration=args.mean_duration,
                      duration_sigma=args.sigma, node_p=args.node_p, max_nodes=args.max_nodes,
                      preemptible_fraction=args.preemptible, seed=args.seed, lpj=lpj)
    out = _open_out(args.out)
    try:
        out.write(dump_trace(generate_trace(cfg)))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_profiles(args) -> int:
    db = _profiles(args.profiles)
    if args.action == "list":
        for e in db.entries:
            a, b = e.affinity
            print(f"{e.gpu_type}\t{e.tag}\tr1={e.r1:g}\tr2={e.r2:g}\talpha={a:.4g}\tbeta={b:.4g}")
    elif args.action == "add":
        if not args.profiles:
            raise UsageError("profiles add needs --profiles to write to")
        db.add(ProfileEntry(args.gpu_type, args.tag, args.r1, args.r2, args.j_dp, args.j_pp, args.note))
        db.save(args.profiles)
    else:
        entry = db.best_match(args.gpu_type, args.r1, args.r2)
        a, b = entry.affinity
        print(json.dumps({"gpu_type": entry.gpu_type, "tag": entry.tag, "alpha": round(a, 9),
                          "beta": round(b, 9)}, sort_keys=True))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpjsched", description="Topology-aware placement for large training jobs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, job=True):
        sp.add_argument("--topology", required=True, help="cluster topology JSON")
        if job:
            sp.add_argument("--job", required=True, help="job spec JSON")
        sp.add_argument("--profiles", help="profile database JSON (default: bundled seed)")
        sp.add_argument("--alpha", type=_alpha, help="DP weight; overrides the profile lookup")
        sp.add_argument("--unit", choices=(ROW, COL, AUTO), default=AUTO,
                        help="scheduling unit (auto tries both)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--time-limit", type=float, default=10.0, help="seconds")
        sp.add_argument("--out", help="output path (default stdout)")

    sp = sub.add_parser("schedule", help="place one job and print its placement")
    common(sp)
    sp.add_argument("--algorithm", choices=ALGORITHMS, default="arnold")
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("solve", help="print the raw MIP solution")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("benchmark", help="score algorithms over benchmark settings (CSV)")
    sp.add_argument("--settings", help="settings JSON (default: bundled three-setting table)")
    sp.add_argument("--algorithms", default=",".join(ALGORITHMS[:5]),
                    help="comma-separated subset of: " + ",".join(ALGORITHMS))
    sp.add_argument("--alphas", type=_alpha_list, default=list(DEFAULT_ALPHAS))
    sp.add_argument("--unit", choices=(ROW, COL, AUTO), default=AUTO)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--time-limit", type=float, default=10.0)
    sp.add_argument("--jobs", type=int, default=1, help="parallel benchmark cells")
    sp.add_argument("--no-timing", action="store_true", help="leave the latency column empty")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("simulate", help="replay a trace under the reservation policy")
    common(sp, job=False)
    sp.add_argument("--trace", required=True, help="JSON-lines trace")
    sp.add_argument("--predictor", choices=("oracle", "histogram"), default="oracle")
    sp.add_argument("--noise", type=int, default=0, help="oracle jitter in buckets")
    sp.add_argument("--train", help="training trace for the histogram predictor")
    sp.add_argument("--interval", type=int, default=30, help="policy tick in seconds")
    sp.add_argument("--events", help="write the event log (JSON-lines) here")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("trace", help="generate a synthetic trace (JSON-lines)")
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--rate", type=float, default=30.0, help="jobs per hour")
    sp.add_argument("--mean-duration", type=float, default=3600.0)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--node-p", type=float, default=0.3)
    sp.add_argument("--max-nodes", type=int)
    sp.add_argument("--preemptible", type=float, default=0.2)
    sp.add_argument("--lpj", help="dp,tp,pp of an announced LPJ")
    sp.add_argument("--announce", type=int, default=3600)
    sp.add_argument("--lead", type=int, default=4 * 3600)
    sp.add_argument("--lpj-duration", type=int, default=24 * 3600)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("profiles", help="inspect or extend the profile database")
    sp.add_argument("--profiles", help="database JSON (default: bundled seed)")
    act = sp.add_subparsers(dest="action", required=True)
    act.add_parser("list")
    add = act.add_parser("add")
    match = act.add_parser("match")
    for a in (add, match):
        a.add_argument("gpu_type")
        a.add_argument("r1", type=float)
        a.add_argument("r2", type=float)
    add.add_argument("--tag", required=True)
    add.add_argument("--j-dp", type=float, required=True)
    add.add_argument("--j-pp", type=float, required=True)
    add.add_argument("--note", default="")
    sp.set_defaults(func=cmd_profiles)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("ARNOLD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleError, EnumerationLimitExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, UsageError, TopologyError, WorkloadError, TraceError, UnknownGpuType,
            json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
