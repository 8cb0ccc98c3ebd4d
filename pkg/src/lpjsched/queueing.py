"""Reservation-aware job queue policy and its cluster metrics.

An announced LPJ gets a reserved zone planned by the solver.  Until it
arrives, other jobs are placed outside the zone when possible; a job may
backfill the zone only if it is preemptible or predicted to finish before the
LPJ shows up.  Generic jobs are bin-packed onto whole nodes.
"""

from __future__ import annotations

import csv
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

from .metrics import Placement
from .solver import AUTO, InfeasibleError, SolverConfig, schedule_matrix
from .topology import (FREE, FREE_KIND, OCCUPIED_KIND, RESERVED_KIND, AllocationState, ClusterTopology,
                       Occupied, Reserved)
from .workload import JobSpec, build_comm_matrix

BUCKET_SECONDS = 600
LPJ = "lpj"
GENERIC = "generic"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceJob:
    id: str
    submit_time: int
    duration: int  # ground truth; policies only see it through a predictor
    nodes: int
    priority: int = 0
    preemptable: bool = False
    kind: str = GENERIC
    spec: Optional[JobSpec] = None  # LPJ only
    arrival_time: Optional[int] = None  # LPJ only: when it starts needing its nodes
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.duration <= 0:
            raise TraceError(f"job {self.id}: duration must be positive")
        if self.nodes < 1:
            raise TraceError(f"job {self.id}: needs at least one node")
        if self.kind == LPJ:
            if self.spec is None or self.arrival_time is None:
                raise TraceError(f"LPJ {self.id} needs a job spec and an arrival time")
            if self.arrival_time < self.submit_time:
                raise TraceError(f"LPJ {self.id} arrives before it is announced")
            cells = build_comm_matrix(self.spec).num_cells
            if cells != self.nodes:
                raise TraceError(f"LPJ {self.id}: spec needs {cells} nodes, trace says {self.nodes}")
        elif self.kind != GENERIC:
            raise TraceError(f"job {self.id}: unknown kind {self.kind!r}")

    @property
    def is_lpj(self) -> bool:
        return self.kind == LPJ

    def to_dict(self) -> dict:
        d = {
            "id": self.id, "submit_time": self.submit_time, "duration": self.duration,
            "nodes": self.nodes, "priority": self.priority, "preemptable": self.preemptable,
            "kind": self.kind, "metadata": dict(sorted(self.metadata.items())),
        }
        if self.is_lpj:
            d["spec"] = self.spec.to_dict()
            d["arrival_time"] = self.arrival_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceJob":
        d = dict(d)
        if d.get("spec") is not None:
            d["spec"] = JobSpec.from_dict(d["spec"])
        d["id"] = str(d["id"])
        d["metadata"] = {str(k): str(v) for k, v in d.get("metadata", {}).items()}
        for key in ("submit_time", "duration", "nodes", "priority"):
            if key in d:
                d[key] = int(d[key])
        return cls(**d)


def queue_order(job: TraceJob):
    """Higher priority first, then earlier submission, then id."""
    return (-job.priority, job.submit_time, job.id)


# -- JCT prediction ---------------------------------------------------------------------

def duration_bucket(seconds: float) -> int:
    return max(1, math.ceil(seconds / BUCKET_SECONDS))


def bucket_upper_bound(bucket: int) -> int:
    return bucket * BUCKET_SECONDS


class JctPredictor(Protocol):
    def predict_bucket(self, job: TraceJob) -> int:
        ...


@dataclass
class OraclePredictor:
    """True duration bucket plus uniform integer jitter in [-noise, noise]."""

    noise: int = 0
    seed: int = 0

    def predict_bucket(self, job: TraceJob) -> int:
        bucket = duration_bucket(job.duration)
        if self.noise:
            # keyed per job so repeated queries agree
            bucket += random.Random(f"{self.seed}:{job.id}").randint(-self.noise, self.noise)
        return max(1, bucket)


def oracle_predictor(noise: int = 0, seed: int = 0) -> OraclePredictor:
    if noise < 0:
        raise ValueError("noise must be >= 0")
    return OraclePredictor(noise, seed)


def default_feature_key(job: TraceJob) -> str:
    return job.metadata.get("user", "")


@dataclass
class HistogramPredictor:
    means: Dict[str, float]
    global_mean: float
    key: Callable[[TraceJob], str] = default_feature_key

    def predict_bucket(self, job: TraceJob) -> int:
        mean = self.means.get(self.key(job), self.global_mean)
        return max(1, round(mean))


def histogram_predictor(training: Iterable[TraceJob],
                        key: Callable[[TraceJob], str] = default_feature_key) -> HistogramPredictor:
    """Mean duration bucket per feature key, with the global mean as fallback."""
    per_key: Dict[str, List[int]] = {}
    every = []
    for job in training:
        b = duration_bucket(job.duration)
        per_key.setdefault(key(job), []).append(b)
        every.append(b)
    if not every:
        raise ValueError("training trace is empty")
    means = {k: statistics.fmean(v) for k, v in sorted(per_key.items())}
    return HistogramPredictor(means, statistics.fmean(every), key)


def bucket_rmse(predictor: JctPredictor, jobs: Sequence[TraceJob]) -> float:
    if not jobs:
        raise ValueError("no jobs to score")
    err = [(predictor.predict_bucket(j) - duration_bucket(j.duration)) ** 2 for j in jobs]
    return math.sqrt(sum(err) / len(err))


# -- reservation -----------------------------------------------------------------------

@dataclass
class ReservedZone:
    lpj_id: str
    nodes: frozenset
    arrival_time: int
    placement: Placement
    pending: Set[int] = field(default_factory=set)  # planned but still occupied

    def __post_init__(self):
        if set(self.nodes) != set(self.placement.nodes):
            raise ValueError("reserved nodes differ from the planned placement")


def reserve_for_lpj(lpj: TraceJob, topo: ClusterTopology, state: AllocationState,
                    alpha: float, beta: float, now: int,
                    candidates: Optional[Mapping[int, float]] = None,
                    config: Optional[SolverConfig] = None, unit: str = AUTO,
                    fallback: bool = True) -> Tuple[ReservedZone, AllocationState]:
    """Plan the LPJ placement and reserve its nodes.

    Planning sees free nodes plus ``candidates``: occupied nodes expected to
    be released (value = expected release time; preemptible ones can use 0).
    Free nodes are preferred, then earlier releases.  With ``fallback`` the
    plan may also use any other occupied node if that is the only way to fit.
    Planned nodes that are still occupied become pending and are reserved
    once released.
    """
    if not lpj.is_lpj:
        raise ValueError(f"job {lpj.id} is not an LPJ")
    if lpj.arrival_time < now:
        raise ValueError(f"LPJ {lpj.id} arrival {lpj.arrival_time} is in the past (now={now})")
    candidates = dict(candidates or {})
    matrix = build_comm_matrix(lpj.spec, topo.gpus_per_node)

    def plan(usable: Mapping[int, float]):
        virtual = AllocationState({n: FREE if (s.kind == FREE_KIND or n in usable) else s
                                   for n, s in state.items()})

        def node_key(n):
            return (state[n].kind != FREE_KIND, usable.get(n, 0.0), topo.rack_of(n), n)

        return schedule_matrix(matrix, topo, virtual, alpha, beta, unit, config, node_key=node_key)

    try:
        result = plan(candidates)
    except InfeasibleError:
        if not fallback:
            raise
        others = {n: math.inf for n, s in state.items() if s.kind == OCCUPIED_KIND and n not in candidates}
        try:
            result = plan({**candidates, **others})
        except InfeasibleError as exc:
            raise InfeasibleError(f"cannot reserve {lpj.nodes} nodes for LPJ {lpj.id}: {exc}") from None
    nodes = result.placement.nodes
    free_now = [n for n in nodes if state[n].kind == FREE_KIND]
    pending = {n for n in nodes if state[n].kind != FREE_KIND}
    new_state = state.apply((n, Reserved(lpj.id)) for n in free_now)
    zone = ReservedZone(lpj.id, frozenset(nodes), lpj.arrival_time, result.placement, pending)
    return zone, new_state


def release_into_zone(zone: Optional[ReservedZone], state: AllocationState,
                      nodes: Iterable[int]) -> AllocationState:
    """Reserve freshly released zone nodes for the LPJ."""
    if zone is None:
        return state
    grab = sorted(n for n in nodes if n in zone.nodes and state[n].kind == FREE_KIND)
    zone.pending.difference_update(grab)
    return state.apply((n, Reserved(zone.lpj_id)) for n in grab)


# -- placement of generic jobs -----------------------------------------------------------

def bin_pack(topo: ClusterTopology, pool: Sequence[int], count: int) -> Optional[List[int]]:
    """Pick ``count`` nodes from ``pool``: the tightest minipod that fits, else largest first."""
    if count > len(pool):
        return None
    by_pod: Dict[int, List[int]] = {}
    for n in sorted(pool):
        by_pod.setdefault(topo.minipod_of(n), []).append(n)
    fitting = [j for j, ns in by_pod.items() if len(ns) >= count]
    if fitting:
        j = min(fitting, key=lambda j: (len(by_pod[j]), j))
        return by_pod[j][:count]
    out = []
    for j in sorted(by_pod, key=lambda j: (-len(by_pod[j]), j)):
        out.extend(by_pod[j][:count - len(out)])
        if len(out) == count:
            break
    return out


@dataclass
class StepResult:
    scheduled: List[Tuple[TraceJob, List[int]]]
    delayed: List[TraceJob]
    state: AllocationState
    branches: Dict[str, str] = field(default_factory=dict)  # job id -> policy branch taken


def policy_step(queue: Sequence[TraceJob], state: AllocationState, zone: Optional[ReservedZone],
                predictor: JctPredictor, now: int, topo: ClusterTopology) -> StepResult:
    """One pass over the queue; returns placements, the delay list and the new state.

    Branches per job, in queue order: preemptible -> anywhere (outside first);
    fits outside the zone -> outside; predicted to finish before the LPJ
    arrives -> zone allowed; otherwise delayed.
    """
    scheduled, delayed, branches = [], [], {}
    for job in sorted(queue, key=queue_order):
        outside = [n for n, s in state.items() if s.kind == FREE_KIND and (zone is None or n not in zone.nodes)]
        inside = [] if zone is None else state.nodes_with(RESERVED_KIND, zone.lpj_id)
        picked, branch = None, "delay"
        if job.preemptable and zone is not None:
            picked = _outside_first(topo, outside, inside, job.nodes)
            branch = "preemptable"
        elif job.nodes <= len(outside):
            picked = bin_pack(topo, outside, job.nodes)
            branch = "outside"
        elif zone is not None:
            finish = now + bucket_upper_bound(predictor.predict_bucket(job))
            if finish < zone.arrival_time:
                picked = _outside_first(topo, outside, inside, job.nodes)
                branch = "zone"
        if picked is None:
            delayed.append(job)
            branches[job.id] = "delay"
            continue
        moves = []
        for n in picked:
            if state[n].kind == RESERVED_KIND:
                moves.append((n, FREE))
            moves.append((n, Occupied(job.id)))
        state = state.apply(moves)
        scheduled.append((job, sorted(picked)))
        branches[job.id] = branch
    return StepResult(scheduled, delayed, state, branches)


def _outside_first(topo, outside, inside, count) -> Optional[List[int]]:
    if count > len(outside) + len(inside):
        return None
    if count <= len(outside):
        return bin_pack(topo, outside, count)
    return sorted(outside) + bin_pack(topo, inside, count - len(outside))


# -- LPJ arrival ----------------------------------------------------------------------

@dataclass
class ArrivalResult:
    preempted: List[str]
    violations: List[Tuple[int, str]]  # (node, non-preemptible job still on it)
    state: AllocationState


def lpj_arrival(zone: ReservedZone, state: AllocationState, preemptable: Callable[[str], bool],
                now: Optional[int] = None) -> ArrivalResult:
    """Hand the zone to the LPJ.

    Preemptible occupants are evicted (all of their nodes are freed); nodes
    held by non-preemptible jobs are reported as violations and stay with
    their job until it finishes.
    """
    if now is not None and now < zone.arrival_time:
        raise ValueError(f"LPJ {zone.lpj_id} arrives at {zone.arrival_time}, now is {now}")
    victims = sorted({state[n].job for n in zone.nodes
                      if state[n].kind == OCCUPIED_KIND and state[n].job != zone.lpj_id
                      and preemptable(state[n].job)})
    victim_set = set(victims)
    moves = [(n, FREE) for n, s in state.items() if s.kind == OCCUPIED_KIND and s.job in victim_set]
    state = state.apply(moves)
    violations = []
    moves = []
    for n in sorted(zone.nodes):
        s = state[n]
        if s.kind == RESERVED_KIND and s.job == zone.lpj_id:
            moves.append((n, Occupied(zone.lpj_id)))
        elif s.kind == FREE_KIND:
            moves.append((n, Occupied(zone.lpj_id)))
        elif s.kind == OCCUPIED_KIND and s.job != zone.lpj_id:
            violations.append((n, s.job))
        else:
            raise ValueError(f"zone node {n} is {s}")
    return ArrivalResult(victims, violations, state.apply(moves))


# -- metrics ---------------------------------------------------------------------------

def allocation_rate(state: AllocationState) -> float:
    """Occupied nodes over all nodes."""
    return state.count(OCCUPIED_KIND) / len(state) if len(state) else 0.0


def retention_rate(zone: Optional[ReservedZone], state: AllocationState,
                   preemptable: Callable[[str], bool] = lambda job: False) -> float:
    """Zone nodes held by other non-preemptible jobs over the zone size."""
    if zone is None or not zone.nodes:
        return 0.0
    held = sum(1 for n in zone.nodes
               if state[n].kind == OCCUPIED_KIND and state[n].job != zone.lpj_id
               and not preemptable(state[n].job))
    return held / len(zone.nodes)


SERIES_FIELDS = ("time", "allocation_rate", "retention_rate", "queue_length", "delayed_count")


@dataclass(frozen=True)
class SeriesRow:
    time: int
    allocation_rate: float
    retention_rate: float
    queue_length: int
    delayed_count: int


def write_series_csv(rows: Iterable[SeriesRow], out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SERIES_FIELDS)
    for r in rows:
        w.writerow([r.time, f"{r.allocation_rate:.6f}", f"{r.retention_rate:.6f}", r.queue_length, r.delayed_count])
