"""Max-spread placement MIP and its exact branch-and-bound solver.

The model coarsens the communication matrix into identical scheduling units
(rows = PP groups by default) and decides, per unit, which minipods host it:

    min  alpha * sum_j y_j + beta * T
    s.t. sum_j s_ij <= T                  for every unit i
         sum_i p_ij <= c_j * y_j          for every minipod j
         sum_j p_ij  = 1                  for every unit i
         p_ij <= s_ij,  y, s binary,  p in [0, 1]

with ``c_j`` the free nodes of minipod ``j`` measured in unit sizes.  The
objective only depends on how many minipods are used and on ``T``, and
feasibility is monotone in the capacities, so the search branches on ``T``
first, then on the number of minipods (always the largest ones), and finally
on the per-unit minipod supports.  ``p`` is filled in node units, which keeps
every fraction a multiple of ``1 / group_size``.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .metrics import Placement, weighted_spread
from .topology import AllocationState, ClusterTopology, available_by_minipod
from .workload import CommMatrix, JobSpec, ProfileDB, build_comm_matrix, compute_ratios, lookup_affinity

log = logging.getLogger(__name__)

ROW = "row"
COL = "col"
AUTO = "auto"

OPTIMAL = "Optimal"
FEASIBLE_TIME_LIMIT = "FeasibleTimeLimit"
INFEASIBLE = "Infeasible"

TOL = 1e-9


class InfeasibleError(RuntimeError):
    pass


class StaleStateError(RuntimeError):
    """The cluster changed between solving and rank assignment."""


@dataclass(frozen=True)
class SolverConfig:
    time_limit: float = 10.0
    node_limit: Optional[int] = None
    symmetry_breaking: bool = True
    seed: int = 0  # the search is deterministic; kept for interface stability

    def __post_init__(self):
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")


@dataclass(frozen=True)
class MipInstance:
    group_count: int
    group_size: int
    available: Tuple[int, ...]  # free nodes per minipod
    alpha: float
    beta: float
    unit: str = ROW

    def __post_init__(self):
        if self.group_count <= 0 or self.group_size <= 0:
            raise ValueError("group_count and group_size must be positive")
        if self.alpha < 0 or self.beta < 0 or abs(self.alpha + self.beta - 1) > TOL:
            raise ValueError(f"need alpha, beta >= 0 with alpha + beta = 1, got {self.alpha}, {self.beta}")
        if self.unit not in (ROW, COL):
            raise ValueError(f"unit must be {ROW!r} or {COL!r}")
        if any(a < 0 for a in self.available):
            raise ValueError("available node counts must be >= 0")

    @property
    def minipod_count(self) -> int:
        return len(self.available)

    @property
    def capacities(self) -> Tuple[float, ...]:
        return tuple(a / self.group_size for a in self.available)

    @property
    def demand(self) -> int:
        return self.group_count * self.group_size

    def precheck(self) -> bool:
        return sum(self.available) >= self.demand

    def objective(self, used: int, spread: int) -> float:
        return self.alpha * used + self.beta * spread


@dataclass
class MipSolution:
    y: Tuple[int, ...]
    s: Tuple[Tuple[int, ...], ...]
    p: Tuple[Tuple[float, ...], ...]
    T: int
    objective: float
    status: str
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status != INFEASIBLE

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "T": self.T,
            "y": list(self.y),
            "s": [list(r) for r in self.s],
            "p": [list(r) for r in self.p],
            "stats": dict(self.stats),
        }


def build_mip(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
              alpha: float, beta: float, unit: str = ROW,
              include_reserved_for: Optional[str] = None) -> MipInstance:
    available = available_by_minipod(topo, state, include_reserved_for)
    if unit == ROW:
        groups, size = matrix.rows, matrix.cols
    elif unit == COL:
        groups, size = matrix.cols, matrix.rows
    else:
        raise ValueError(f"unit must be {ROW!r} or {COL!r}, got {unit!r}")
    return MipInstance(groups, size, tuple(available), alpha, beta, unit)


# -- search ------------------------------------------------------------------

class _Budget:
    def __init__(self, config: SolverConfig):
        self.deadline = time.perf_counter() + config.time_limit
        self.node_limit = config.node_limit
        self.nodes = 0
        self.exhausted = False

    def tick(self) -> bool:
        self.nodes += 1
        if self.node_limit is not None and self.nodes > self.node_limit:
            self.exhausted = True
        elif self.nodes % 256 == 0 and time.perf_counter() > self.deadline:
            self.exhausted = True
        return not self.exhausted


class _OutOfBudget(Exception):
    pass


def _tape_fill(caps: Sequence[int], groups: int, size: int) -> List[Dict[int, int]]:
    """Lay units end to end over the minipods in the given order."""
    patterns = []
    pod, left = 0, caps[0] if caps else 0
    for _ in range(groups):
        need, pattern = size, {}
        while need:
            while left == 0:
                pod += 1
                left = caps[pod]
            take = min(need, left)
            pattern[pod] = pattern.get(pod, 0) + take
            need -= take
            left -= take
        patterns.append(pattern)
    return patterns


def _whole_fill(caps: Sequence[int], groups: int, size: int) -> Optional[List[Dict[int, int]]]:
    """Place every unit inside a single minipod, or None if impossible."""
    patterns = []
    for pod, cap in enumerate(caps):
        for _ in range(cap // size):
            if len(patterns) == groups:
                return patterns
            patterns.append({pod: size})
    return patterns if len(patterns) == groups else None


def _compositions(total: int, bounds: Sequence[int]):
    """Positive integer vectors summing to ``total`` with part k <= bounds[k]."""
    if len(bounds) == 1:
        if 1 <= total <= bounds[0]:
            yield (total,)
        return
    rest_max = sum(bounds[1:])
    lo = max(1, total - rest_max)
    hi = min(bounds[0], total - (len(bounds) - 1))
    # larger first pieces first: they tend to exhaust a minipod
    for first in range(hi, lo - 1, -1):
        for tail in _compositions(total - first, bounds[1:]):
            yield (first,) + tail


class _Packer:
    """Decide whether ``groups`` units of ``size`` nodes fit ``caps`` with at
    most ``spread`` minipods per unit."""

    def __init__(self, caps: Sequence[int], groups: int, size: int, spread: int,
                 budget: _Budget, symmetry: bool):
        self.caps = list(caps)
        self.groups = groups
        self.size = size
        self.spread = spread
        self.budget = budget
        self.symmetry = symmetry
        self.failed = set()

    def run(self) -> Optional[List[Dict[int, int]]]:
        g, G = self.size, self.groups
        if sum(self.caps) < G * g:
            return None
        whole = _whole_fill(self.caps, G, g)
        if whole is not None:
            return whole
        if self.spread == 1:
            return None
        if self.spread >= 2 and min(self.caps) >= g * (self.spread - 1):
            # no minipod is small enough to be skipped over by a unit
            tape = _tape_fill(self.caps, G, g)
            if max(len(p) for p in tape) <= self.spread:
                return tape
        remaining = list(self.caps)
        chosen: List[Dict[int, int]] = []
        if self._dfs(remaining, G, chosen):
            return chosen
        return None

    def _key(self, remaining, left):
        cap = self.size * left
        return tuple(sorted((min(r, cap) for r in remaining), reverse=True)), left

    def _bound_ok(self, remaining, left) -> bool:
        g = self.size
        if sum(remaining) < left * g:
            return False
        pods = sum(1 for r in remaining if r > 0)
        # a feasible completion can be taken acyclic, so at most pods-1 units split
        whole_slots = sum(r // g for r in remaining)
        return left <= whole_slots + max(0, min(pods - 1, left))

    def _moves(self, remaining):
        g = self.size
        live = [j for j, r in enumerate(remaining) if r > 0]
        if self.symmetry:
            seen, reps = set(), []
            for j in live:
                # one representative per remaining value, up to spread copies
                count = sum(1 for x in reps if remaining[x] == remaining[j])
                if count < self.spread:
                    reps.append(j)
            live = reps
        # whole placements, tightest fit first
        whole = sorted((j for j in live if remaining[j] >= g), key=lambda j: (remaining[j], j))
        if self.symmetry:
            uniq, seen_vals = [], set()
            for j in whole:
                if remaining[j] not in seen_vals:
                    seen_vals.add(remaining[j])
                    uniq.append(j)
            whole = uniq
        for j in whole:
            yield {j: g}
        for t in range(2, min(self.spread, g, len(live)) + 1):
            seen = set()
            for pods in itertools.combinations(live, t):
                for parts in _compositions(g, [remaining[j] for j in pods]):
                    if self.symmetry:
                        sig = tuple(sorted((remaining[j], x) for j, x in zip(pods, parts)))
                        if sig in seen:
                            continue
                        seen.add(sig)
                    yield dict(zip(pods, parts))

    def _dfs(self, remaining, left, chosen) -> bool:
        if left == 0:
            return True
        if not self.budget.tick():
            raise _OutOfBudget
        key = self._key(remaining, left) if self.symmetry else None
        if key is not None and key in self.failed:
            return False
        if not self._bound_ok(remaining, left):
            if key is not None:
                self.failed.add(key)
            return False
        whole = _whole_fill(remaining, left, self.size)
        if whole is not None:
            chosen.extend(whole)
            return True
        for move in self._moves(remaining):
            for j, x in move.items():
                remaining[j] -= x
            chosen.append(move)
            if self._dfs(remaining, left - 1, chosen):
                return True
            chosen.pop()
            for j, x in move.items():
                remaining[j] += x
        if key is not None:
            self.failed.add(key)
        return False


def _solution_from_patterns(inst: MipInstance, patterns: List[Dict[int, int]], status: str,
                            stats: dict) -> MipSolution:
    k, g = inst.minipod_count, inst.group_size
    # deterministic unit order: by minipods touched, then by node counts
    patterns = sorted(patterns, key=lambda p: (sorted(p), [-p[j] for j in sorted(p)]))
    s = tuple(tuple(1 if p.get(j, 0) > 0 else 0 for j in range(k)) for p in patterns)
    p = tuple(tuple(pat.get(j, 0) / g for j in range(k)) for pat in patterns)
    y = tuple(1 if any(row[j] for row in s) else 0 for j in range(k))
    T = max(sum(row) for row in s)
    return MipSolution(y, s, p, T, inst.objective(sum(y), T), status, stats)


def _infeasible(inst: MipInstance, stats: dict) -> MipSolution:
    k, G = inst.minipod_count, inst.group_count
    zero = tuple(tuple(0 for _ in range(k)) for _ in range(G))
    return MipSolution(tuple(0 for _ in range(k)), zero, tuple(tuple(0.0 for _ in range(k)) for _ in range(G)),
                       0, float("inf"), INFEASIBLE, stats)


def solve(inst: MipInstance, config: Optional[SolverConfig] = None) -> MipSolution:
    config = config or SolverConfig()
    start = time.perf_counter()
    budget = _Budget(config)
    G, g, k = inst.group_count, inst.group_size, inst.minipod_count

    def stats():
        return {"nodes": budget.nodes, "wall_time": time.perf_counter() - start}

    if not inst.precheck():
        return _infeasible(inst, stats())

    order = sorted(range(k), key=lambda j: (-inst.available[j], j))
    caps = [inst.available[j] for j in order]
    prefix = list(itertools.accumulate(caps))
    demand = inst.demand

    def key(used, spread):
        return (round(inst.objective(used, spread), 9), spread, used)

    # incumbent: units laid end to end over the largest minipods
    tape = _tape_fill(caps, G, g)
    best = [{order[j]: x for j, x in pat.items()} for pat in tape]
    best_key = key(len({j for pat in tape for j in pat}), max(len(pat) for pat in tape))

    y_min = next(y for y in range(1, k + 1) if prefix[y - 1] >= demand)
    candidates = sorted(key(y, t) for t in range(1, min(k, g) + 1) for y in range(max(t, y_min), k + 1))
    status = OPTIMAL
    for cand in candidates:
        if cand >= best_key:
            break
        _, spread, used = cand
        packer = _Packer(caps[:used], G, g, spread, budget, config.symmetry_breaking)
        try:
            found = packer.run()
        except _OutOfBudget:
            status = FEASIBLE_TIME_LIMIT
            log.info("solver budget exhausted after %d nodes", budget.nodes)
            break
        if found is not None:
            best = [{order[j]: x for j, x in pat.items()} for pat in found]
            best_key = cand
            break
    sol = _solution_from_patterns(inst, best, status, stats())
    log.debug("solved %d units of %d over %d minipods: T=%d used=%d obj=%.3f (%s)",
              G, g, k, sol.T, sum(sol.y), sol.objective, status)
    return sol


def check_solution(inst: MipInstance, sol: MipSolution, tol: float = TOL) -> List[str]:
    """Re-verify every constraint of the model; returns violations."""
    problems = []
    if sol.status == INFEASIBLE:
        return problems
    G, k = inst.group_count, inst.minipod_count
    if len(sol.y) != k or len(sol.s) != G or len(sol.p) != G:
        return [f"shape mismatch: y={len(sol.y)} s={len(sol.s)} p={len(sol.p)}"]
    if any(v not in (0, 1) for v in sol.y):
        problems.append("y not binary")
    caps = inst.capacities
    for i in range(G):
        if len(sol.s[i]) != k or len(sol.p[i]) != k:
            problems.append(f"unit {i}: row length mismatch")
            continue
        if any(v not in (0, 1) for v in sol.s[i]):
            problems.append(f"unit {i}: s not binary")
        if any(v < -tol or v > 1 + tol for v in sol.p[i]):
            problems.append(f"unit {i}: p outside [0, 1]")
        if sum(sol.s[i]) > sol.T:
            problems.append(f"unit {i}: spread {sum(sol.s[i])} > T={sol.T}")
        if abs(sum(sol.p[i]) - 1) > tol:
            problems.append(f"unit {i}: allocation sums to {sum(sol.p[i])}")
        for j in range(k):
            if sol.p[i][j] > sol.s[i][j] + tol:
                problems.append(f"unit {i}: p > s at minipod {j}")
    for j in range(k):
        load = sum(sol.p[i][j] for i in range(G))
        if load > caps[j] * sol.y[j] + tol:
            problems.append(f"minipod {j}: load {load:.6f} > capacity {caps[j] * sol.y[j]:.6f}")
    if abs(sol.objective - inst.objective(sum(sol.y), sol.T)) > 1e-9:
        problems.append("objective does not match variables")
    return problems


# -- from fractions to nodes ------------------------------------------------------

def discretize(sol: MipSolution, inst: MipInstance) -> List[List[int]]:
    """Integer node counts per (unit, minipod).

    Largest-remainder rounding per unit, then moves along alternating
    unit/minipod paths until no minipod is over its free node count.
    """
    if not sol.feasible:
        raise InfeasibleError("cannot discretize an infeasible solution")
    G, k, g = inst.group_count, inst.minipod_count, inst.group_size
    counts = []
    for i in range(G):
        raw = [sol.p[i][j] * g if sol.s[i][j] else 0.0 for j in range(k)]
        row = [int(x + 1e-9) for x in raw]
        short = g - sum(row)
        order = sorted((j for j in range(k) if sol.s[i][j]), key=lambda j: (-(raw[j] - row[j]), j))
        for j in order[:short]:
            row[j] += 1
        counts.append(row)

    def load(j):
        return sum(counts[i][j] for i in range(G))

    while True:
        over = [j for j in range(k) if load(j) > inst.available[j]]
        if not over:
            break
        path = _repair_path(counts, sol.s, inst.available, over[0], load)
        assert path is not None, "capacity repair failed on a feasible solution"
        for i, src, dst in path:
            counts[i][src] -= 1
            counts[i][dst] += 1
    for i in range(G):
        assert sum(counts[i]) == g
        assert all(counts[i][j] == 0 or sol.s[i][j] for j in range(k))
    return counts


def _repair_path(counts, s, available, start, load):
    """BFS from an overfull minipod to one with slack, moving one node per hop."""
    k = len(available)
    prev = {start: None}
    frontier = [start]
    while frontier:
        nxt = []
        for j in frontier:
            for i, row in enumerate(counts):
                if row[j] == 0:
                    continue
                for j2 in range(k):
                    if j2 in prev or not s[i][j2]:
                        continue
                    prev[j2] = (i, j)
                    if load(j2) < available[j2]:
                        path, cur = [], j2
                        while prev[cur] is not None:
                            unit, src = prev[cur]
                            path.append((unit, src, cur))
                            cur = src
                        return path[::-1]
                    nxt.append(j2)
        frontier = nxt
    return None


def _unit_cells(matrix: CommMatrix, unit: str, group: int) -> List[Tuple[int, int]]:
    if unit == ROW:
        return [(group, c) for c in range(matrix.cols)]
    return [(r, group) for r in range(matrix.rows)]


def assign_ranks(counts: Sequence[Sequence[int]], matrix: CommMatrix, topo: ClusterTopology,
                 state: AllocationState, unit: str = ROW, include_reserved_for: Optional[str] = None,
                 node_key: Optional[Callable[[int], object]] = None) -> Placement:
    """Map cells to nodes so each unit's same-minipod cells are contiguous.

    Within a minipod, cells ordered by (unit, position) take free nodes in
    (rack, node id) order, or in ``node_key`` order when given.
    """
    cell_pod: Dict[Tuple[int, int], int] = {}
    per_pod: Dict[int, List[Tuple[int, int, Tuple[int, int]]]] = {}
    for i, row in enumerate(counts):
        cells = _unit_cells(matrix, unit, i)
        pos = 0
        for j in range(len(row)):
            for _ in range(row[j]):
                cell = cells[pos]
                cell_pod[cell] = j
                per_pod.setdefault(j, []).append((i, pos, cell))
                pos += 1
        if pos != len(cells):
            raise ValueError(f"unit {i} has {pos} nodes, expected {len(cells)}")
    cell_node = {}
    for j, items in per_pod.items():
        free = state.free_nodes(topo, j, include_reserved_for)
        free.sort(key=node_key or (lambda n: (topo.rack_of(n), n)))
        if len(free) < len(items):
            raise StaleStateError(f"minipod {j} has {len(free)} free nodes, placement needs {len(items)}")
        for (_, _, cell), node in zip(sorted(items), free):
            cell_node[cell] = node
    return Placement.from_cells(matrix.rows, matrix.cols, cell_pod, cell_node)


# -- end to end --------------------------------------------------------------------

@dataclass
class ScheduleResult:
    placement: Placement
    solution: MipSolution
    instance: MipInstance
    score: float
    latency: float
    alpha: float
    beta: float


def resolve_affinity(spec: JobSpec, profiles: Optional[ProfileDB], alpha: Optional[float]) -> Tuple[float, float]:
    if alpha is not None:
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return alpha, 1.0 - alpha
    if profiles is None:
        profiles = ProfileDB.seed()
    r1, r2 = compute_ratios(spec)
    return lookup_affinity(profiles, spec.gpu_type, r1, r2)


def schedule_matrix(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
                    alpha: float, beta: float, unit: str = ROW,
                    config: Optional[SolverConfig] = None,
                    include_reserved_for: Optional[str] = None,
                    node_key: Optional[Callable[[int], object]] = None) -> ScheduleResult:
    """Solve, discretize and rank-assign one communication matrix.

    ``unit="auto"`` solves with both rows and columns as the scheduling unit
    and keeps whichever placement has the lower weighted spread (rows on ties).
    """
    start = time.perf_counter()
    if unit == AUTO:
        results = [schedule_matrix(matrix, topo, state, alpha, beta, u, config, include_reserved_for, node_key)
                   for u in (ROW, COL)]
        best = min(results, key=lambda r: round(r.score, 9))
        best.latency = time.perf_counter() - start
        return best
    inst = build_mip(matrix, topo, state, alpha, beta, unit, include_reserved_for)
    sol = solve(inst, config)
    if not sol.feasible:
        raise InfeasibleError(
            f"job needs {matrix.num_cells} nodes, only {sum(inst.available)} available")
    counts = discretize(sol, inst)
    placement = assign_ranks(counts, matrix, topo, state, unit, include_reserved_for, node_key)
    score = weighted_spread(placement, matrix, alpha, beta)
    return ScheduleResult(placement, sol, inst, score, time.perf_counter() - start, alpha, beta)


def schedule(spec: JobSpec, topo: ClusterTopology, state: AllocationState,
             alpha: Optional[float] = None, profiles: Optional[ProfileDB] = None,
             unit: str = ROW, config: Optional[SolverConfig] = None) -> ScheduleResult:
    """Communication matrix -> affinity -> MIP -> placement for one job."""
    alpha, beta = resolve_affinity(spec, profiles, alpha)
    matrix = build_comm_matrix(spec, topo.gpus_per_node)
    return schedule_matrix(matrix, topo, state, alpha, beta, unit, config)
