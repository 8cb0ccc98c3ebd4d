"""Trace generation, discrete-event replay and the placement benchmark."""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import (EnumerationLimitExceeded, best_fit, enumerate_optimal, gpu_packing, random_fit,
                        topo_aware)
from .metrics import validate_placement, weighted_spread
from .queueing import (GENERIC, LPJ, JctPredictor, ReservedZone, SeriesRow, TraceError, TraceJob,
                       allocation_rate, bucket_upper_bound, lpj_arrival, oracle_predictor, policy_step,
                       release_into_zone, reserve_for_lpj, retention_rate)
from .solver import AUTO, InfeasibleError, SolverConfig, resolve_affinity, schedule_matrix
from .topology import (FREE, FREE_KIND, OCCUPIED_KIND, AllocationState, ClusterTopology, Occupied,
                       build_topology, topology_spec)
from .workload import JobSpec, ProfileDB, build_comm_matrix

log = logging.getLogger(__name__)

# tie order for events at the same instant
KIND_ORDER = {"Complete": 0, "Preempt": 1, "LpjArrive": 2, "Submit": 3, "Schedule": 4, "Delay": 5}
KIND_NAME = {v: k for k, v in KIND_ORDER.items()}


# -- event log ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    job: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "kind": self.kind, "job": self.job, "detail": self.detail},
                          sort_keys=True)


@dataclass
class EventLog:
    events: List[Event] = field(default_factory=list)

    def add(self, t: int, kind: str, job: str, **detail) -> None:
        if kind not in KIND_ORDER:
            raise ValueError(f"unknown event kind {kind!r}")
        if self.events and t < self.events[-1].time:
            raise ValueError(f"event at {t} precedes {self.events[-1].time}")
        self.events.append(Event(t, kind, job, detail))

    def __len__(self):
        return len(self.events)

    def of_kind(self, kind: str) -> List[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


# -- traces ------------------------------------------------------------------------------

def load_trace(path) -> List[TraceJob]:
    jobs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                jobs.append(TraceJob.from_dict(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
    return jobs


def dump_trace(jobs: Iterable[TraceJob]) -> str:
    return "".join(json.dumps(j.to_dict(), sort_keys=True) + "\n" for j in jobs)


@dataclass
class LpjConfig:
    dp: int = 24
    tp: int = 4
    pp: int = 8
    announce_time: int = 3600
    lead_time: int = 4 * 3600
    duration: int = 24 * 3600
    priority: int = 10


@dataclass
class TraceConfig:
    jobs: int = 200
    arrival_rate: float = 30.0  # jobs per hour
    mean_duration: float = 3600.0
    duration_sigma: float = 1.0
    node_p: float = 0.3  # geometric success probability; mean size 1/p
    max_nodes: Optional[int] = None
    preemptible_fraction: float = 0.2
    users: int = 8
    priorities: int = 1
    seed: int = 0
    lpj: Optional[LpjConfig] = None

    def __post_init__(self):
        if self.arrival_rate < 0 or self.mean_duration <= 0 or self.duration_sigma < 0:
            raise ValueError("rates and durations must be non-negative (mean duration positive)")
        if not 0 < self.node_p <= 1:
            raise ValueError("node_p must lie in (0, 1]")
        if not 0 <= self.preemptible_fraction <= 1:
            raise ValueError("preemptible_fraction must lie in [0, 1]")


def generate_trace(cfg: TraceConfig) -> List[TraceJob]:
    """Poisson arrivals, log-normal durations (mean ``mean_duration``), geometric sizes."""
    rng = np.random.default_rng(cfg.seed)
    jobs = []
    if cfg.arrival_rate > 0 and cfg.jobs > 0:
        gaps = rng.exponential(3600.0 / cfg.arrival_rate, cfg.jobs)
        submits = np.floor(np.cumsum(gaps)).astype(int)
        mu = math.log(cfg.mean_duration) - cfg.duration_sigma ** 2 / 2
        durations = np.maximum(1, np.rint(rng.lognormal(mu, cfg.duration_sigma, cfg.jobs))).astype(int)
        sizes = rng.geometric(cfg.node_p, cfg.jobs)
        if cfg.max_nodes is not None:
            sizes = np.minimum(sizes, cfg.max_nodes)
        preempt = rng.random(cfg.jobs) < cfg.preemptible_fraction
        users = rng.integers(0, max(cfg.users, 1), cfg.jobs)
        prios = rng.integers(0, max(cfg.priorities, 1), cfg.jobs)
        width = len(str(cfg.jobs))
        for i in range(cfg.jobs):
            jobs.append(TraceJob(
                id=f"j{i:0{width}d}", submit_time=int(submits[i]), duration=int(durations[i]),
                nodes=int(sizes[i]), priority=int(prios[i]), preemptable=bool(preempt[i]),
                metadata={"user": f"u{int(users[i])}", "nodes": str(int(sizes[i]))}))
    if cfg.lpj is not None:
        lc = cfg.lpj
        spec = JobSpec.from_parallelism(lc.dp, lc.tp, lc.pp)
        jobs.append(TraceJob(
            id="lpj0", submit_time=lc.announce_time, duration=lc.duration,
            nodes=build_comm_matrix(spec).num_cells, priority=lc.priority, kind=LPJ, spec=spec,
            arrival_time=lc.announce_time + lc.lead_time, metadata={"user": "lpj"}))
    jobs.sort(key=lambda j: (j.submit_time, j.id))
    return jobs


# -- replay --------------------------------------------------------------------------------

@dataclass
class SimConfig:
    interval: int = 30
    alpha: Optional[float] = None  # None: look up the LPJ's affinity
    unit: str = AUTO
    solver: SolverConfig = field(default_factory=SolverConfig)
    profiles: Optional[ProfileDB] = None


@dataclass
class SimResult:
    log: EventLog
    series: List[SeriesRow]
    violations: List[Tuple[int, str]]  # non-preemptible stragglers at LPJ arrival
    retention_at_arrival: Optional[float] = None
    preempted: List[str] = field(default_factory=list)


@dataclass
class _Running:
    job: TraceJob
    start: int
    end: int
    nodes: List[int]


class _Replay:
    def __init__(self, trace: Sequence[TraceJob], topo: ClusterTopology, cfg: SimConfig,
                 predictor: JctPredictor):
        self.topo, self.cfg, self.predictor = topo, cfg, predictor
        self.state = AllocationState.empty(topo)
        self.log = EventLog()
        self.series: List[SeriesRow] = []
        self.queue: List[TraceJob] = []
        self.delayed_once = set()
        self.running: Dict[str, _Running] = {}
        self.preemptable: Dict[str, bool] = {}
        self.zone: Optional[ReservedZone] = None
        self.lpj: Optional[TraceJob] = None
        self.lpj_arrived = False
        self.result = SimResult(self.log, self.series, [])
        self.events: List[tuple] = []
        for job in trace:
            self.preemptable[job.id] = job.preemptable
            self._push(job.submit_time, "Submit", job.id, job)

    def _push(self, t, kind, job_id, payload=None):
        heapq.heappush(self.events, (t, KIND_ORDER[kind], job_id, len(self.events), payload))

    def is_preemptable(self, job_id: str) -> bool:
        return self.preemptable.get(job_id, False)

    # -- handlers

    def submit(self, now, job: TraceJob):
        self.log.add(now, "Submit", job.id, nodes=job.nodes, job_kind=job.kind)
        if not job.is_lpj:
            self.queue.append(job)
            return
        alpha, beta = resolve_affinity(job.spec, self.cfg.profiles, self.cfg.alpha)
        candidates = {}
        for r in self.running.values():
            if r.job.preemptable:
                release = 0.0
            else:
                release = r.start + bucket_upper_bound(self.predictor.predict_bucket(r.job))
                if release >= job.arrival_time:
                    continue
            candidates.update({n: release for n in r.nodes})
        try:
            zone, self.state = reserve_for_lpj(job, self.topo, self.state, alpha, beta, now, candidates,
                                               self.cfg.solver, self.cfg.unit)
        except InfeasibleError as exc:
            # no zone: the LPJ joins the ordinary queue when it arrives
            self.log.add(now, "Delay", job.id, reason=str(exc))
            self._push(job.arrival_time, "Submit", job.id, replace(job, kind=GENERIC, spec=None,
                                                                    arrival_time=None))
            return
        self.zone, self.lpj = zone, job
        self._push(job.arrival_time, "LpjArrive", job.id)

    def complete(self, now, job_id, end):
        r = self.running.get(job_id)
        if r is None or r.end != end:
            return  # stale completion of a preempted run
        del self.running[job_id]
        self.log.add(now, "Complete", job_id)
        self.state = self.state.apply((n, FREE) for n in r.nodes)
        if self.zone is None:
            return
        if self.lpj_arrived:
            grab = [n for n in r.nodes if n in self.zone.nodes]
            self.state = self.state.apply((n, Occupied(self.lpj.id)) for n in grab)
            self._maybe_start_lpj(now)
        else:
            self.state = release_into_zone(self.zone, self.state, r.nodes)

    def arrive(self, now):
        zone = self.zone
        self.result.retention_at_arrival = retention_rate(zone, self.state, self.is_preemptable)
        res = lpj_arrival(zone, self.state, self.is_preemptable, now)
        self.state = res.state
        for job_id in res.preempted:
            r = self.running.pop(job_id)
            remaining = max(1, r.end - now)
            self.log.add(now, "Preempt", job_id, remaining=remaining)
            self.result.preempted.append(job_id)
            self.queue.append(replace(r.job, duration=remaining))
        self.result.violations.extend(res.violations)
        self.lpj_arrived = True
        self.log.add(now, "LpjArrive", zone.lpj_id, violations=len(res.violations),
                     preempted=len(res.preempted))
        self._maybe_start_lpj(now)

    def _maybe_start_lpj(self, now):
        zone, lpj = self.zone, self.lpj
        held = self.state.nodes_with(OCCUPIED_KIND, lpj.id)
        if len(held) < len(zone.nodes):
            return
        score = weighted_spread(zone.placement, build_comm_matrix(lpj.spec, self.topo.gpus_per_node),
                                *resolve_affinity(lpj.spec, self.cfg.profiles, self.cfg.alpha))
        self._start(now, lpj, sorted(zone.nodes), branch="lpj", score=round(score, 9))
        self.zone, self.lpj, self.lpj_arrived = None, None, False

    def _start(self, now, job, nodes, **detail):
        end = now + job.duration
        self.running[job.id] = _Running(job, now, end, nodes)
        self.log.add(now, "Schedule", job.id, nodes=nodes, **detail)
        self._push(end, "Complete", job.id, end)

    def tick(self, now):
        if self.queue:
            step = policy_step(self.queue, self.state, self.zone, self.predictor, now, self.topo)
            self.state = step.state
            for job, nodes in step.scheduled:
                # the step already marked the nodes occupied
                end = now + job.duration
                self.running[job.id] = _Running(job, now, end, nodes)
                self.log.add(now, "Schedule", job.id, nodes=nodes, branch=step.branches[job.id])
                self._push(end, "Complete", job.id, end)
            for job in step.delayed:
                if job.id not in self.delayed_once:
                    self.delayed_once.add(job.id)
                    self.log.add(now, "Delay", job.id)
            self.queue = list(step.delayed)
        self.series.append(SeriesRow(now, allocation_rate(self.state),
                                     retention_rate(self.zone, self.state, self.is_preemptable),
                                     len(self.queue), len(self.delayed_once & {j.id for j in self.queue})))

    def run(self) -> SimResult:
        interval = self.cfg.interval
        next_tick = None
        while self.events or self.queue or self.running or self.zone is not None:
            if next_tick is None:
                first = self.events[0][0] if self.events else 0
                next_tick = math.ceil(first / interval) * interval
            if self.events and self.events[0][0] <= next_tick:
                t, order, job_id, _, payload = heapq.heappop(self.events)
                kind = KIND_NAME[order]
                if kind == "Submit":
                    self.submit(t, payload)
                elif kind == "Complete":
                    self.complete(t, job_id, payload)
                elif kind == "LpjArrive":
                    self.arrive(t)
                continue
            if not (self.queue or self.running or self.zone is not None) and not self.events:
                break
            self.tick(next_tick)
            next_tick += interval
            if not self.queue and self.events and self.zone is None and self.events[0][0] > next_tick:
                # idle: jump the tick grid to the next event
                next_tick = math.ceil(self.events[0][0] / interval) * interval
        assert not self.running, "replay ended with running jobs"
        return self.result


def replay(trace: Sequence[TraceJob], topo: ClusterTopology, cfg: Optional[SimConfig] = None,
           predictor: Optional[JctPredictor] = None) -> SimResult:
    """Replay a submit-time-sorted trace; deterministic for a given input."""
    cfg = cfg or SimConfig()
    if cfg.interval <= 0:
        raise ValueError("interval must be positive")
    for prev, job in zip(trace, trace[1:]):
        if job.submit_time < prev.submit_time:
            raise TraceError(f"trace not sorted by submit_time at job {job.id}")
    ids = [j.id for j in trace]
    if len(set(ids)) != len(ids):
        raise TraceError("duplicate job ids in trace")
    lpjs = sorted((j for j in trace if j.is_lpj), key=lambda j: j.submit_time)
    for a, b in zip(lpjs, lpjs[1:]):
        if b.submit_time <= a.arrival_time:
            raise TraceError(f"LPJ {b.id} is announced before LPJ {a.id} arrives; one reservation at a time")
    for job in trace:
        if job.nodes > topo.num_nodes:
            raise TraceError(f"job {job.id} needs {job.nodes} nodes, cluster has {topo.num_nodes}")
    return _Replay(trace, topo, cfg, predictor or oracle_predictor()).run()


# -- benchmark ---------------------------------------------------------------------------

DEFAULT_ALPHAS = (0.0, 0.1, 0.3, 0.5)
BENCH_FIELDS = ("setting", "algorithm", "alpha", "beta", "score", "latency_s", "status", "detail")


@dataclass(frozen=True)
class Setting:
    name: str
    minipods: Tuple[int, ...]
    dp: int
    tp: int
    pp: int
    rack_size: Optional[int] = None

    def topology(self) -> ClusterTopology:
        return build_topology(topology_spec(self.minipods, self.rack_size, name=self.name))

    def job(self) -> JobSpec:
        return JobSpec.from_parallelism(self.dp, self.tp, self.pp)

    @classmethod
    def from_dict(cls, d: dict) -> "Setting":
        d = dict(d)
        d["minipods"] = tuple(d["minipods"])
        return cls(**d)


def load_settings(path=None) -> List[Setting]:
    if path is None:
        text = resources.files("lpjsched").joinpath("data/benchmark_settings.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return [Setting.from_dict(d) for d in json.loads(text)]


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 0
    time_limit: float = 10.0
    unit: str = AUTO
    enum_states: int = 2_000_000


@dataclass(frozen=True)
class BenchRow:
    setting: str
    algorithm: str
    alpha: float
    score: Optional[float]
    latency: float
    status: str
    detail: str = ""

    def cells(self, timing: bool = True) -> List[str]:
        return [self.setting, self.algorithm, f"{self.alpha:g}", f"{1 - self.alpha:g}",
                "" if self.score is None else f"{self.score:.6g}",
                f"{self.latency:.4f}" if timing else "", self.status, self.detail]


def run_algorithm(name: str, matrix, topo, state, alpha: float, cfg: BenchConfig):
    """Return (placement, detail) for one algorithm; raises on refusal."""
    beta = 1 - alpha
    if name == "arnold":
        r = schedule_matrix(matrix, topo, state, alpha, beta, cfg.unit, SolverConfig(time_limit=cfg.time_limit))
        return r.placement, r.solution.status
    if name == "bestfit":
        return best_fit(matrix, topo, state), ""
    if name == "random":
        return random_fit(matrix, topo, state, seed=cfg.seed), ""
    if name == "gpupack":
        return gpu_packing(matrix, topo, state), ""
    if name == "topoaware":
        return topo_aware(matrix, topo, state, alpha=alpha), ""
    if name == "enum":
        r = enumerate_optimal(matrix, topo, state, alpha, beta, method="cells",
                              max_states=cfg.enum_states, time_limit=cfg.time_limit)
        return r.placement, f"{r.explored} states"
    raise ValueError(f"unknown algorithm {name!r}")


def _bench_cell(args) -> BenchRow:
    setting, name, alpha, cfg = args
    topo = setting.topology()
    state = AllocationState.empty(topo)
    matrix = build_comm_matrix(setting.job(), topo.gpus_per_node)
    start = time.perf_counter()
    try:
        placement, detail = run_algorithm(name, matrix, topo, state, alpha, cfg)
    except EnumerationLimitExceeded as exc:
        return BenchRow(setting.name, name, alpha, None, time.perf_counter() - start, "timeout", str(exc))
    except InfeasibleError as exc:
        return BenchRow(setting.name, name, alpha, None, time.perf_counter() - start, "infeasible", str(exc))
    except Exception as exc:  # a failing cell must not stop the run
        log.exception("benchmark cell %s/%s/%g failed", setting.name, name, alpha)
        return BenchRow(setting.name, name, alpha, None, time.perf_counter() - start, "error", repr(exc))
    latency = time.perf_counter() - start
    problems = validate_placement(placement, matrix, topo, state)
    if problems:
        return BenchRow(setting.name, name, alpha, None, latency, "invalid", problems[0])
    score = weighted_spread(placement, matrix, alpha, 1 - alpha)
    return BenchRow(setting.name, name, alpha, round(score, 9), latency, "ok", detail)


def benchmark(settings: Sequence[Setting], algorithms: Sequence[str], alphas: Sequence[float] = DEFAULT_ALPHAS,
              cfg: Optional[BenchConfig] = None, jobs: int = 1) -> List[BenchRow]:
    cfg = cfg or BenchConfig()
    cells = [(s, a, alpha, cfg) for s in settings for a in algorithms for alpha in alphas]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_bench_cell, cells))
    return [_bench_cell(c) for c in cells]


def write_bench_csv(rows: Iterable[BenchRow], out, timing: bool = True) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(BENCH_FIELDS)
    for r in rows:
        w.writerow(r.cells(timing))
