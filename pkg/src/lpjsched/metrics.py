"""Spread distance and the weighted max-spread score of a placement."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from .topology import FREE_KIND, RESERVED_KIND, AllocationState, ClusterTopology
from .workload import CommMatrix

Cell = Tuple[int, int]


class PlacementError(ValueError):
    pass


@dataclass
class Placement:
    rows: int
    cols: int
    cell_to_minipod: Dict[Cell, int]
    cell_to_node: Dict[Cell, int]
    rank_of_node: Dict[int, int]

    @classmethod
    def from_cells(cls, rows: int, cols: int, cell_to_minipod: Dict[Cell, int],
                   cell_to_node: Dict[Cell, int]) -> "Placement":
        ranks = {cell_to_node[(r, c)]: r * cols + c for r in range(rows) for c in range(cols)}
        return cls(rows, cols, dict(cell_to_minipod), dict(cell_to_node), ranks)

    @property
    def nodes(self) -> List[int]:
        return sorted(self.cell_to_node.values())

    def minipods_used(self) -> List[int]:
        return sorted(set(self.cell_to_minipod.values()))

    def to_dict(self) -> dict:
        def key(cell):
            return f"{cell[0]},{cell[1]}"
        cells = sorted(self.cell_to_node)
        return {
            "rows": self.rows,
            "cols": self.cols,
            "cell_to_minipod": {key(c): self.cell_to_minipod[c] for c in cells},
            "cell_to_node": {key(c): self.cell_to_node[c] for c in cells},
            "rank_of_node": {str(n): self.rank_of_node[n] for n in sorted(self.rank_of_node)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        def cell(k):
            r, c = k.split(",")
            return int(r), int(c)
        return cls(
            int(d["rows"]), int(d["cols"]),
            {cell(k): int(v) for k, v in d["cell_to_minipod"].items()},
            {cell(k): int(v) for k, v in d["cell_to_node"].items()},
            {int(k): int(v) for k, v in d["rank_of_node"].items()},
        )


def group_distance(minipod_ids: Iterable[int]) -> int:
    """Positions where the one-hot minipod vectors of a group disagree.

    That is 0 for a group inside one minipod and the number of distinct
    minipods otherwise.
    """
    distinct = set(minipod_ids)
    if not distinct:
        raise ValueError("empty communication group")
    q = len(distinct)
    return 0 if q == 1 else q


def spreads(placement: Placement, matrix: CommMatrix) -> Tuple[int, int]:
    """(max DP-group distance, max PP-group distance)."""
    m = placement.cell_to_minipod
    if len(m) != matrix.num_cells or any(c not in m for c in matrix.cells()):
        raise PlacementError("placement does not cover every cell")
    dp = max(group_distance(m[c] for c in g) for g in matrix.dp_groups())
    pp = max(group_distance(m[c] for c in g) for g in matrix.pp_groups())
    return dp, pp


def weighted_spread(placement: Placement, matrix: CommMatrix, alpha: float, beta: float) -> float:
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1) > 1e-9:
        raise ValueError(f"need alpha, beta >= 0 with alpha + beta = 1, got {alpha}, {beta}")
    dp, pp = spreads(placement, matrix)
    return alpha * dp + beta * pp


def validate_placement(placement: Placement, matrix: CommMatrix, topo: ClusterTopology,
                       state: Optional[AllocationState] = None,
                       job: Optional[str] = None) -> List[str]:
    """Return a list of violations (empty when valid).

    Checks cover/bijection, minipod consistency, dense row-major ranks and,
    when ``state`` is given, that every node was free (or reserved for ``job``).
    """
    problems = []
    cells = matrix.cells()
    if (placement.rows, placement.cols) != (matrix.rows, matrix.cols):
        problems.append(f"shape {placement.rows}x{placement.cols} != matrix {matrix.rows}x{matrix.cols}")
    for name, mapping in (("minipod", placement.cell_to_minipod), ("node", placement.cell_to_node)):
        missing = [c for c in cells if c not in mapping]
        extra = [c for c in mapping if c not in set(cells)]
        if missing:
            problems.append(f"{len(missing)} cells without a {name}, e.g. {missing[0]}")
        if extra:
            problems.append(f"{len(extra)} unknown cells in {name} map, e.g. {extra[0]}")
    nodes = [placement.cell_to_node[c] for c in cells if c in placement.cell_to_node]
    if len(set(nodes)) != len(nodes):
        problems.append("two cells share a node")
    for c in cells:
        if c not in placement.cell_to_node or c not in placement.cell_to_minipod:
            continue
        n = placement.cell_to_node[c]
        if not 0 <= n < topo.num_nodes:
            problems.append(f"cell {c} on unknown node {n}")
            continue
        if topo.minipod_of(n) != placement.cell_to_minipod[c]:
            problems.append(f"cell {c}: node {n} is not in minipod {placement.cell_to_minipod[c]}")
        if state is not None:
            s = state[n]
            ok = s.kind == FREE_KIND or (job is not None and s.kind == RESERVED_KIND and s.job == str(job))
            if not ok:
                problems.append(f"cell {c}: node {n} is {s}")
    if set(placement.rank_of_node) != set(nodes):
        problems.append("rank map does not match placed nodes")
    elif sorted(placement.rank_of_node.values()) != list(range(len(cells))):
        problems.append("ranks are not dense 0..cells-1")
    else:
        for r, c in cells:
            n = placement.cell_to_node.get((r, c))
            if n is not None and placement.rank_of_node[n] != r * matrix.cols + c:
                problems.append(f"cell {(r, c)} has rank {placement.rank_of_node[n]}, expected row-major")
                break
    return problems
