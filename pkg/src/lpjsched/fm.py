"""Fiduccia-Mattheyses balanced min-cut bipartitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .workload import CommMatrix


@dataclass
class JobGraph:
    """Undirected graph with positive integer edge weights."""

    n: int
    adj: List[Dict[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.adj:
            self.adj = [dict() for _ in range(self.n)]

    def add_edge(self, u: int, v: int, w: int) -> None:
        if u == v:
            return
        if w <= 0:
            raise ValueError("edge weights must be positive")
        self.adj[u][v] = self.adj[u].get(v, 0) + w
        self.adj[v][u] = self.adj[v].get(u, 0) + w

    def edges(self) -> List[Tuple[int, int, int]]:
        return [(u, v, w) for u in range(self.n) for v, w in self.adj[u].items() if u < v]

    def cut_weight(self, part_a) -> int:
        a = set(part_a)
        return sum(w for u, v, w in self.edges() if (u in a) != (v in a))

    def subgraph(self, vertices: List[int]) -> "JobGraph":
        local = {v: i for i, v in enumerate(vertices)}
        sub = JobGraph(len(vertices))
        for v in vertices:
            for u, w in self.adj[v].items():
                if u in local and local[u] > local[v]:
                    sub.add_edge(local[v], local[u], w)
        return sub


AFFINITY_SCALE = 1000


def job_graph(matrix: CommMatrix, alpha: Optional[float] = None) -> JobGraph:
    """Cells as vertices; PP edges along rows, DP rings down columns.

    Edges weigh the per-GPU volumes, or ``alpha`` (DP) and ``1 - alpha`` (PP)
    scaled to integers when an affinity is given.  Vertex ids are row-major
    cell indices.
    """
    rows, cols = matrix.rows, matrix.cols
    g = JobGraph(rows * cols)
    if alpha is None:
        vol_d, vol_p = matrix.volume.v_d, matrix.volume.v_p
    else:
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        vol_d, vol_p = alpha * AFFINITY_SCALE, (1 - alpha) * AFFINITY_SCALE
    w_p = max(1, round(vol_p)) if vol_p > 0 else 0
    w_d = max(1, round(vol_d)) if vol_d > 0 else 0
    if w_p:
        for r in range(rows):
            for c in range(cols - 1):
                g.add_edge(r * cols + c, r * cols + c + 1, w_p)
    if w_d:
        for c in range(cols):
            for r in range(rows - 1):
                g.add_edge(r * cols + c, (r + 1) * cols + c, w_d)
            if rows > 2:
                g.add_edge((rows - 1) * cols + c, c, w_d)
    return g


def size_window(n: int, target: int, tolerance: float) -> Tuple[int, int]:
    lo = max(0, math.ceil(target * (1 - tolerance) - 1e-9))
    hi = min(n, math.floor(target * (1 + tolerance) + 1e-9))
    if lo > hi:
        lo = hi = min(max(target, 0), n)
    return lo, hi


class _Buckets:
    def __init__(self):
        self.by_gain: Dict[int, Set[int]] = {}

    def add(self, v, gain):
        self.by_gain.setdefault(gain, set()).add(v)

    def remove(self, v, gain):
        bucket = self.by_gain[gain]
        bucket.discard(v)
        if not bucket:
            del self.by_gain[gain]

    def best(self) -> Optional[Tuple[int, int]]:
        if not self.by_gain:
            return None
        gain = max(self.by_gain)
        return gain, min(self.by_gain[gain])


def fm_refine(graph: JobGraph, lo: int, hi: int, max_passes: int = 64) -> List[int]:
    """Return a side (0 = A, 1 = B) per vertex with lo <= |A| <= hi.

    Starts from the even/odd split, trimmed into the window by moving the
    highest-index vertices, then runs FM passes until a pass gains nothing.
    Inside a pass the size may leave the window by one vertex; only
    in-window prefixes are kept.
    """
    n = graph.n
    if not 0 <= lo <= hi <= n:
        raise ValueError(f"bad size window [{lo}, {hi}] for {n} vertices")
    side = [v % 2 for v in range(n)]
    size_a = sum(1 for s in side if s == 0)
    for v in range(n - 1, -1, -1):
        if size_a > hi and side[v] == 0:
            side[v] = 1
            size_a -= 1
        elif size_a < lo and side[v] == 1:
            side[v] = 0
            size_a += 1

    for _ in range(max_passes):
        gain = [0] * n
        for v in range(n):
            for u, w in graph.adj[v].items():
                gain[v] += w if side[u] != side[v] else -w
        buckets = (_Buckets(), _Buckets())
        for v in range(n):
            buckets[side[v]].add(v, gain[v])
        locked = [False] * n
        moves, total, best_total, best_len = [], 0, 0, 0
        while True:
            choice = None
            for s in (0, 1):
                new_a = size_a - 1 if s == 0 else size_a + 1
                # one vertex of slack lets a tight window swap vertices
                if not max(lo - 1, 0) <= new_a <= min(hi + 1, n):
                    continue
                cand = buckets[s].best()
                if cand is None:
                    continue
                if choice is None or (cand[0], -cand[1]) > (choice[0], -choice[1]):
                    choice = cand
            if choice is None:
                break
            g, v = choice
            s = side[v]
            buckets[s].remove(v, g)
            locked[v] = True
            side[v] = 1 - s
            size_a += 1 if s == 1 else -1
            total += g
            moves.append(v)
            for u, w in graph.adj[v].items():
                if locked[u]:
                    continue
                delta = -2 * w if side[u] == side[v] else 2 * w
                buckets[side[u]].remove(u, gain[u])
                gain[u] += delta
                buckets[side[u]].add(u, gain[u])
            if total > best_total and lo <= size_a <= hi:
                best_total, best_len = total, len(moves)
        for v in reversed(moves[best_len:]):
            size_a += 1 if side[v] == 1 else -1
            side[v] = 1 - side[v]
        if best_total <= 0:
            break
    return side


def fm_bipartition(graph: JobGraph, balance: float = 0.5, tolerance: float = 0.1):
    """Split into (A, B, cut weight) with |A| close to ``balance * n``.

    |A| stays within ``tolerance`` of its target size.
    """
    if graph.n < 2:
        raise ValueError("need at least two vertices to bipartition")
    if not 0 < balance <= 0.5:
        raise ValueError("balance must lie in (0, 0.5]")
    target = max(1, round(balance * graph.n))
    lo, hi = size_window(graph.n, target, tolerance)
    lo, hi = max(lo, 1), min(hi, graph.n - 1)
    side = fm_refine(graph, lo, hi)
    a = [v for v in range(graph.n) if side[v] == 0]
    b = [v for v in range(graph.n) if side[v] == 1]
    return a, b, graph.cut_weight(a)
