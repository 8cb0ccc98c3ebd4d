"""Reference placement algorithms scored against the MIP solver.

All of them return a :class:`Placement` over the same communication matrix,
so they can be scored and validated identically.
"""

from __future__ import annotations

import itertools
import math
import random
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .fm import fm_refine, job_graph, size_window
from .metrics import Placement, group_distance, weighted_spread
from .solver import COL, ROW, InfeasibleError
from .topology import AllocationState, ClusterTopology, available_by_minipod
from .workload import CommMatrix

Cell = Tuple[int, int]

TOPO_AWARE_TOLERANCE = 0.1


class EnumerationLimitExceeded(RuntimeError):
    """Exhaustive search refused: explored-state cap or time limit hit."""

    def __init__(self, explored: int, elapsed: float, reason: str):
        super().__init__(f"enumeration stopped after {explored} states, {elapsed:.1f}s: {reason}")
        self.explored = explored
        self.elapsed = elapsed
        self.reason = reason


def _available(topo, state, include_reserved_for, need):
    avail = available_by_minipod(topo, state, include_reserved_for)
    if sum(avail) < need:
        raise InfeasibleError(f"job needs {need} nodes, only {sum(avail)} available")
    return avail


def materialize(cell_pod: Dict[Cell, int], matrix: CommMatrix, topo: ClusterTopology,
                state: AllocationState, include_reserved_for: Optional[str] = None) -> Placement:
    """Bind cells to concrete nodes: per minipod, row-major cells take free nodes in id order."""
    per_pod: Dict[int, List[Cell]] = {}
    for cell in matrix.cells():
        per_pod.setdefault(cell_pod[cell], []).append(cell)
    cell_node = {}
    for j, cells in per_pod.items():
        free = state.free_nodes(topo, j, include_reserved_for)
        if len(free) < len(cells):
            raise InfeasibleError(f"minipod {j}: {len(cells)} cells, {len(free)} free nodes")
        for cell, node in zip(cells, free):
            cell_node[cell] = node
    return Placement.from_cells(matrix.rows, matrix.cols, cell_pod, cell_node)


def best_fit(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
             include_reserved_for: Optional[str] = None) -> Placement:
    """Each cell (row-major) goes to the minipod with the fewest free nodes left."""
    remaining = _available(topo, state, include_reserved_for, matrix.num_cells)
    cell_pod = {}
    for cell in matrix.cells():
        j = min((j for j in range(topo.k) if remaining[j] > 0), key=lambda j: (remaining[j], j))
        remaining[j] -= 1
        cell_pod[cell] = j
    return materialize(cell_pod, matrix, topo, state, include_reserved_for)


def random_fit(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState, seed: int = 0,
               include_reserved_for: Optional[str] = None) -> Placement:
    rng = random.Random(seed)
    remaining = _available(topo, state, include_reserved_for, matrix.num_cells)
    cell_pod = {}
    for cell in matrix.cells():
        j = rng.choice([j for j in range(topo.k) if remaining[j] > 0])
        remaining[j] -= 1
        cell_pod[cell] = j
    return materialize(cell_pod, matrix, topo, state, include_reserved_for)


def gpu_packing(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
                include_reserved_for: Optional[str] = None) -> Placement:
    """Pack the whole job into the fewest minipods, largest first."""
    avail = _available(topo, state, include_reserved_for, matrix.num_cells)
    order = sorted(range(topo.k), key=lambda j: (-avail[j], j))
    chosen, covered = [], 0
    for j in order:
        if covered >= matrix.num_cells:
            break
        chosen.append(j)
        covered += avail[j]
    cell_pod, it = {}, iter(matrix.cells())
    for j in chosen:
        for cell in itertools.islice(it, avail[j]):
            cell_pod[cell] = j
    return materialize(cell_pod, matrix, topo, state, include_reserved_for)


def _split_minipods(pods: List[int], avail: Sequence[int]) -> Tuple[List[int], List[int]]:
    total = sum(avail[j] for j in pods)
    best, best_at, acc = None, 1, 0
    for at in range(1, len(pods)):
        acc += avail[pods[at - 1]]
        diff = abs(total - 2 * acc)
        if best is None or diff < best:
            best, best_at = diff, at
    return pods[:best_at], pods[best_at:]


def topo_aware(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
               include_reserved_for: Optional[str] = None,
               tolerance: float = TOPO_AWARE_TOLERANCE, alpha: Optional[float] = None) -> Placement:
    """Dual recursive bipartitioning of the job graph onto the minipod tree.

    The minipod set is halved by free capacity; the job graph is cut with
    FM so each side gets a proportional share (within ``tolerance``); the
    recursion stops once a part fits a single minipod.  Edge weights are
    the job's volumes, or its affinity when ``alpha`` is given.
    """
    avail = _available(topo, state, include_reserved_for, matrix.num_cells)
    graph = job_graph(matrix, alpha)
    cells = matrix.cells()
    cell_pod: Dict[Cell, int] = {}

    def place(vertices: List[int], pods: List[int]):
        size = len(vertices)
        if size == 0:
            return
        fitting = [j for j in pods if avail[j] >= size]
        if fitting:
            j = min(fitting, key=lambda j: (avail[j], j))
            for v in vertices:
                cell_pod[cells[v]] = j
            avail[j] -= size
            return
        left, right = _split_minipods(pods, avail)
        cap_l = sum(avail[j] for j in left)
        cap_r = sum(avail[j] for j in right)
        halves = [(cap, half) for cap, half in ((cap_l, left), (cap_r, right)) if cap >= size]
        if halves:
            place(vertices, min(halves, key=lambda h: h[0])[1])
            return
        target = round(size * cap_l / (cap_l + cap_r))
        hard_lo, hard_hi = size - cap_r, cap_l
        lo, hi = size_window(size, target, tolerance)
        lo, hi = max(lo, hard_lo), min(hi, hard_hi)
        if lo > hi:
            lo = hi = min(max(target, hard_lo), hard_hi)
        side = fm_refine(graph.subgraph(vertices), lo, hi)
        place([v for v, s in zip(vertices, side) if s == 0], left)
        place([v for v, s in zip(vertices, side) if s == 1], right)

    place(list(range(len(cells))), [j for j in range(topo.k) if avail[j] > 0])
    return materialize(cell_pod, matrix, topo, state, include_reserved_for)


# -- exhaustive enumeration -----------------------------------------------------------

@dataclass
class EnumerationResult:
    placement: Placement
    score: float          # weighted spread
    mip_objective: float  # alpha * minipods used + beta * max unit spread
    counts: List[List[int]]
    explored: int
    elapsed: float


def _patterns(size: int, avail: Sequence[int]) -> List[Tuple[int, ...]]:
    k = len(avail)
    out = []
    for bars in itertools.combinations(range(size + k - 1), k - 1):
        parts, prev = [], -1
        for b in bars + (size + k - 1,):
            parts.append(b - prev - 1)
            prev = b
        if all(x <= a for x, a in zip(parts, avail)):
            out.append(tuple(parts))
    out.sort(reverse=True)
    return out


def _layout(pattern: Sequence[int]) -> List[int]:
    """Minipod of each position along a unit (same-minipod cells contiguous)."""
    return [j for j, x in enumerate(pattern) for _ in range(x)]


def _twins(avail: Sequence[int]) -> List[List[int]]:
    """Permutations of minipods that only swap equal-capacity ones."""
    classes: Dict[int, List[int]] = {}
    for j, a in enumerate(avail):
        classes.setdefault(a, []).append(j)
    perms = [list(range(len(avail)))]
    for members in classes.values():
        if len(members) < 2:
            continue
        grown = []
        for base in perms:
            for shuffled in itertools.permutations(members):
                p = list(base)
                for src, dst in zip(members, shuffled):
                    p[src] = dst
                grown.append(p)
        perms = grown
    return perms


def enumerate_optimal(matrix: CommMatrix, topo: ClusterTopology, state: AllocationState,
                      alpha: float, beta: float, unit: str = ROW, objective: str = "spread",
                      method: str = "multiset", max_states: int = 2_000_000,
                      time_limit: Optional[float] = None,
                      include_reserved_for: Optional[str] = None) -> EnumerationResult:
    """Exhaustive search for the best placement.

    ``method="multiset"`` treats scheduling units as interchangeable and
    enumerates multisets of per-unit choices (node counts per minipod for
    ``"mip"``, minipod sequences for ``"spread"``), skipping relabelings of
    equal-capacity minipods and pruning with the monotone partial score.  ``method="cells"`` is the plain brute
    force over every cell -> minipod map, i.e. k**cells states.

    ``objective`` selects what is minimised: ``"spread"`` (weighted max
    spread, ties broken by the MIP objective) or ``"mip"`` (the coarse
    objective of the MIP; multiset ties keep the first assignment found).
    """
    if objective not in ("spread", "mip"):
        raise ValueError("objective must be 'spread' or 'mip'")
    avail = _available(topo, state, include_reserved_for, matrix.num_cells)
    if method == "multiset":
        return _enumerate_multiset(matrix, topo, state, avail, alpha, beta, unit, objective,
                                   max_states, time_limit, include_reserved_for)
    if method == "cells":
        return _enumerate_cells(matrix, topo, state, avail, alpha, beta, unit, objective,
                                max_states, time_limit, include_reserved_for)
    raise ValueError("method must be 'multiset' or 'cells'")


def _unit_dims(matrix: CommMatrix, unit: str) -> Tuple[int, int]:
    """(number of units, unit size)."""
    if unit == ROW:
        return matrix.rows, matrix.cols
    if unit == COL:
        return matrix.cols, matrix.rows
    raise ValueError(f"unit must be {ROW!r} or {COL!r}")


def _relabel(counts: Sequence[int], perm: Sequence[int]) -> Tuple[int, ...]:
    out = [0] * len(counts)
    for j, x in enumerate(counts):
        out[perm[j]] = x
    return tuple(out)


def _unit_options(size: int, avail: Sequence[int], ordered: bool):
    """Per-unit choices as (minipod per position, node counts per minipod)."""
    k = len(avail)
    if not ordered:
        return [(_layout(p), p) for p in _patterns(size, avail)]
    out = []
    for seq in itertools.product(range(k), repeat=size):
        counts = tuple(seq.count(j) for j in range(k))
        if all(x <= a for x, a in zip(counts, avail)):
            out.append((list(seq), counts))
    return out


def _enumerate_multiset(matrix, topo, state, avail, alpha, beta, unit, objective,
                        max_states, time_limit, include_reserved_for):
    start = time.perf_counter()
    G, g = _unit_dims(matrix, unit)
    k = topo.k
    # unit spread is the PP spread for rows, the DP spread for columns
    w_unit, w_cross = (beta, alpha) if unit == ROW else (alpha, beta)
    # the coarse objective ignores positions, so node-count patterns suffice;
    # the weighted spread needs every ordering of minipods along a unit
    options = _unit_options(g, avail, ordered=objective == "spread")
    layouts = [lay for lay, _ in options]
    counts_of = [c for _, c in options]
    supports = [sum(1 for x in c if x) for c in counts_of]
    ordered = objective == "spread"
    option_index = {(tuple(lay) if ordered else c): i for i, (lay, c) in enumerate(options)}
    perms = _twins(avail)

    remaining = list(avail)
    chosen: List[int] = []
    cross = [[0] * k for _ in range(g)]  # units per (position, minipod)
    used = [0] * k
    best = {"key": (math.inf, math.inf) if objective == "spread" else (math.inf,), "choice": None}
    explored = 0

    # fewest minipods any complete assignment must touch
    fewest = next(y for y in range(1, k + 1) if sum(sorted(avail, reverse=True)[:y]) >= G * g)

    def scores(max_support):
        spread_u = 0 if max_support <= 1 else max_support
        spread_c = max(group_distance(j for j in range(k) if cross[c][j]) for c in range(g))
        score = w_unit * spread_u + w_cross * spread_c
        if objective == "spread":
            return score, alpha * sum(1 for j in range(k) if used[j]) + beta * max_support
        # a bound on the final coarse objective; ties are not broken further
        return (alpha * max(fewest, sum(1 for j in range(k) if used[j])) + beta * max_support,)

    def canonical() -> bool:
        # skip assignments that relabel equal-capacity minipods of a smaller one
        ms = sorted(chosen)
        for perm in perms[1:]:
            if ordered:
                images = (tuple(perm[j] for j in layouts[idx]) for idx in chosen)
            else:
                images = (_relabel(counts_of[idx], perm) for idx in chosen)
            mapped = sorted(option_index[img] for img in images)
            if mapped < ms:
                return False
        return True

    def dfs(first: int, max_support: int):
        nonlocal explored
        explored += 1
        if explored > max_states:
            raise EnumerationLimitExceeded(explored, time.perf_counter() - start, "state cap")
        if time_limit is not None and explored % 1024 == 0 and time.perf_counter() - start > time_limit:
            raise EnumerationLimitExceeded(explored, time.perf_counter() - start, "time limit")
        if chosen:
            # both scores only grow as units are added
            key = tuple(round(x, 9) for x in scores(max_support))
            if key >= best["key"]:
                return
            if len(chosen) == G:
                if canonical():
                    best["key"], best["choice"] = key, list(chosen)
                return
        for idx in range(first, len(options)):
            c = counts_of[idx]
            if any(x > r for x, r in zip(c, remaining)):
                continue
            for j in range(k):
                remaining[j] -= c[j]
                used[j] += c[j]
            for pos, j in enumerate(layouts[idx]):
                cross[pos][j] += 1
            chosen.append(idx)
            dfs(idx, max(max_support, supports[idx]))
            chosen.pop()
            for pos, j in enumerate(layouts[idx]):
                cross[pos][j] -= 1
            for j in range(k):
                remaining[j] += c[j]
                used[j] -= c[j]

    dfs(0, 0)
    if best["choice"] is None:
        raise InfeasibleError("no capacity-feasible assignment")
    cell_pod = {}
    for i, idx in enumerate(best["choice"]):
        for pos, j in enumerate(layouts[idx]):
            cell_pod[(i, pos) if unit == ROW else (pos, i)] = j
    placement = materialize(cell_pod, matrix, topo, state, include_reserved_for)
    counts = [list(counts_of[idx]) for idx in best["choice"]]
    if objective == "spread":
        score, mip = best["key"]
    else:
        mip = best["key"][0]
        score = round(weighted_spread(placement, matrix, alpha, beta), 9)
    return EnumerationResult(placement, score, mip, counts, explored, time.perf_counter() - start)


def _enumerate_cells(matrix, topo, state, avail, alpha, beta, unit, objective,
                     max_states, time_limit, include_reserved_for):
    start = time.perf_counter()
    k = topo.k
    cells = matrix.cells()
    rows, cols = matrix.rows, matrix.cols
    units = matrix.pp_groups() if unit == ROW else matrix.dp_groups()
    index = {c: i for i, c in enumerate(cells)}
    unit_idx = [[index[c] for c in grp] for grp in units]
    pp_idx = [[index[c] for c in grp] for grp in matrix.pp_groups()]
    dp_idx = [[index[c] for c in grp] for grp in matrix.dp_groups()]
    best_key, best_assign = (math.inf, math.inf), None
    explored = 0
    for assign in itertools.product(range(k), repeat=len(cells)):
        explored += 1
        if explored > max_states:
            raise EnumerationLimitExceeded(explored, time.perf_counter() - start, "state cap")
        if time_limit is not None and explored % 4096 == 0 and time.perf_counter() - start > time_limit:
            raise EnumerationLimitExceeded(explored, time.perf_counter() - start, "time limit")
        load = [0] * k
        for j in assign:
            load[j] += 1
        if any(load[j] > avail[j] for j in range(k)):
            continue
        dp = max(group_distance(assign[i] for i in grp) for grp in dp_idx)
        pp = max(group_distance(assign[i] for i in grp) for grp in pp_idx)
        score = alpha * dp + beta * pp
        t = max(len({assign[i] for i in grp}) for grp in unit_idx)
        mip = alpha * sum(1 for x in load if x) + beta * t
        key = (round(score, 9), round(mip, 9)) if objective == "spread" else (round(mip, 9), round(score, 9))
        if key < best_key:
            best_key, best_assign = key, assign
    if best_assign is None:
        raise InfeasibleError("no capacity-feasible assignment")
    cell_pod = {c: best_assign[i] for i, c in enumerate(cells)}
    placement = materialize(cell_pod, matrix, topo, state, include_reserved_for)
    counts = [[sum(1 for i in grp if best_assign[i] == j) for j in range(k)] for grp in unit_idx]
    a, b = best_key
    score, mip = (a, b) if objective == "spread" else (b, a)
    return EnumerationResult(placement, score, mip, counts, explored, time.perf_counter() - start)


ALGORITHMS = ("arnold", "bestfit", "random", "gpupack", "topoaware", "enum")
