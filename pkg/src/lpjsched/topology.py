"""Three-tier CLOS cluster model and node allocation state.

A cluster is a list of minipods (one spine switch each), a minipod is a list
of racks (one leaf switch each) and a rack is a list of nodes.  Node ids are
dense and assigned in (minipod, rack, position) order, so sorting nodes by id
also sorts them by rack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

GPUS_PER_NODE = 8


class TopologyError(ValueError):
    """Raised for malformed topology descriptions."""


class TransitionError(ValueError):
    """Raised when an allocation transition is illegal."""

    def __init__(self, node: int, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


@dataclass(frozen=True)
class Minipod:
    id: int
    racks: Tuple[Tuple[int, ...], ...]

    @property
    def capacity(self) -> int:
        return sum(len(r) for r in self.racks)

    @property
    def nodes(self) -> Tuple[int, ...]:
        return tuple(n for rack in self.racks for n in rack)


@dataclass(frozen=True)
class ClusterTopology:
    minipods: Tuple[Minipod, ...]
    gpus_per_node: int = GPUS_PER_NODE
    name: str = "cluster"
    _pod_of: Tuple[int, ...] = field(default=(), repr=False, compare=False)
    _rack_of: Tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        pod_of, rack_of = [], []
        for pod in self.minipods:
            for r, rack in enumerate(pod.racks):
                for n in rack:
                    if n != len(pod_of):
                        raise TopologyError(f"node ids must be dense and ordered, got {n}")
                    pod_of.append(pod.id)
                    rack_of.append(r)
        object.__setattr__(self, "_pod_of", tuple(pod_of))
        object.__setattr__(self, "_rack_of", tuple(rack_of))

    @property
    def k(self) -> int:
        return len(self.minipods)

    @property
    def num_nodes(self) -> int:
        return len(self._pod_of)

    @property
    def num_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def minipod_of(self, node: int) -> int:
        return self._pod_of[node]

    def rack_of(self, node: int) -> int:
        return self._rack_of[node]

    def capacities(self) -> List[int]:
        return [p.capacity for p in self.minipods]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gpus_per_node": self.gpus_per_node,
            "minipods": [
                {"id": p.id, "racks": [{"nodes": len(r)} for r in p.racks]}
                for p in self.minipods
            ],
        }


def build_topology(spec: dict) -> ClusterTopology:
    """Validate a JSON-style description and assign node ids.

    ``spec`` looks like ``{"name": ..., "gpus_per_node": 8, "minipods":
    [{"racks": [{"nodes": 4}, ...]}, ...]}``.  A minipod may carry an explicit
    ``id`` (ids must then be exactly ``0..k-1`` in order) and may use the
    shorthand ``{"nodes": n}`` for a single rack.
    """
    pods_spec = spec.get("minipods")
    if not pods_spec:
        raise TopologyError("topology needs at least one minipod")
    gpus_per_node = int(spec.get("gpus_per_node", GPUS_PER_NODE))
    if gpus_per_node <= 0:
        raise TopologyError("gpus_per_node must be positive")

    seen_ids = set()
    next_node = 0
    minipods = []
    for index, pod_spec in enumerate(pods_spec):
        pod_id = pod_spec.get("id", index)
        if pod_id in seen_ids:
            raise TopologyError(f"duplicate minipod id {pod_id}")
        if pod_id != index:
            raise TopologyError(f"minipod ids must be dense 0..k-1, got {pod_id} at position {index}")
        seen_ids.add(pod_id)

        if "racks" in pod_spec:
            rack_sizes = [int(r["nodes"]) for r in pod_spec["racks"]]
        elif "nodes" in pod_spec:
            rack_sizes = [int(pod_spec["nodes"])]
        else:
            raise TopologyError(f"minipod {pod_id} has neither racks nor nodes")
        if any(n < 0 for n in rack_sizes):
            raise TopologyError(f"minipod {pod_id} has a negative rack size")
        rack_sizes = [n for n in rack_sizes if n > 0]
        if not rack_sizes:
            raise TopologyError(f"minipod {pod_id} has zero nodes")

        racks = []
        for size in rack_sizes:
            racks.append(tuple(range(next_node, next_node + size)))
            next_node += size
        minipods.append(Minipod(pod_id, tuple(racks)))

    return ClusterTopology(tuple(minipods), gpus_per_node, str(spec.get("name", "cluster")))


def topology_spec(minipod_nodes: Sequence[int], rack_size: Optional[int] = None,
                  name: str = "cluster", gpus_per_node: int = GPUS_PER_NODE) -> dict:
    """JSON description with the given node count per minipod.

    Racks hold ``rack_size`` nodes (the last rack of a minipod may be short);
    ``None`` puts each minipod in a single rack.
    """
    pods = []
    for count in minipod_nodes:
        if rack_size is None:
            racks = [count]
        else:
            racks = [rack_size] * (count // rack_size)
            if count % rack_size:
                racks.append(count % rack_size)
        pods.append({"racks": [{"nodes": n} for n in racks]})
    return {"name": name, "gpus_per_node": gpus_per_node, "minipods": pods}


def uniform_topology(k: int, nodes_per_minipod: int, rack_size: Optional[int] = None,
                     name: str = "cluster") -> ClusterTopology:
    return build_topology(topology_spec([nodes_per_minipod] * k, rack_size, name))


def load_topology(path) -> ClusterTopology:
    with open(path) as f:
        return build_topology(json.load(f))


# -- allocation state -------------------------------------------------------

FREE_KIND = "free"
RESERVED_KIND = "reserved"
OCCUPIED_KIND = "occupied"


class NodeStatus(NamedTuple):
    kind: str
    job: Optional[str] = None

    def __str__(self):
        return self.kind if self.job is None else f"{self.kind}({self.job})"


FREE = NodeStatus(FREE_KIND)


def Reserved(job: str) -> NodeStatus:
    return NodeStatus(RESERVED_KIND, str(job))


def Occupied(job: str) -> NodeStatus:
    return NodeStatus(OCCUPIED_KIND, str(job))


def _check_transition(node: int, old: NodeStatus, new: NodeStatus) -> None:
    if new.kind not in (FREE_KIND, RESERVED_KIND, OCCUPIED_KIND):
        raise TransitionError(node, f"unknown status {new.kind!r}")
    if new.kind != FREE_KIND and not new.job:
        raise TransitionError(node, f"{new.kind} needs an owning job")
    if old.kind == FREE_KIND:
        if new.kind == FREE_KIND:
            raise TransitionError(node, "already free")
        return
    if old.kind == RESERVED_KIND:
        if new.kind == FREE_KIND:
            return
        if new.kind == OCCUPIED_KIND and new.job == old.job:
            return
        raise TransitionError(node, f"{old} cannot become {new}")
    # occupied
    if new.kind == FREE_KIND:
        return
    raise TransitionError(node, f"{old} cannot become {new}")


class AllocationState:
    """Status of every node; ``apply`` returns a new state and never mutates."""

    __slots__ = ("_status",)

    def __init__(self, status: Dict[int, NodeStatus]):
        self._status = status

    @classmethod
    def empty(cls, topo: ClusterTopology) -> "AllocationState":
        return cls({n: FREE for n in range(topo.num_nodes)})

    def __getitem__(self, node: int) -> NodeStatus:
        return self._status[node]

    def __len__(self):
        return len(self._status)

    def __eq__(self, other):
        return isinstance(other, AllocationState) and self._status == other._status

    def items(self):
        return self._status.items()

    def apply(self, transitions: Iterable[Tuple[int, NodeStatus]]) -> "AllocationState":
        """Apply transitions in order, all or none.

        Transitions are checked against the running result, so a batch may
        move a node through several statuses (e.g. reserved -> free ->
        occupied by a different job).
        """
        status = dict(self._status)
        for node, new in transitions:
            if node not in status:
                raise TransitionError(node, "unknown node")
            _check_transition(node, status[node], new)
            status[node] = new
        return AllocationState(status)

    def nodes_with(self, kind: str, job: Optional[str] = None) -> List[int]:
        return sorted(n for n, s in self._status.items()
                      if s.kind == kind and (job is None or s.job == job))

    def count(self, kind: str) -> int:
        return sum(1 for s in self._status.values() if s.kind == kind)

    def free_nodes(self, topo: ClusterTopology, minipod: int,
                   include_reserved_for: Optional[str] = None) -> List[int]:
        out = []
        for n in topo.minipods[minipod].nodes:
            s = self._status[n]
            if s.kind == FREE_KIND or (include_reserved_for is not None and s.kind == RESERVED_KIND
                                       and s.job == str(include_reserved_for)):
                out.append(n)
        return out

    def to_dict(self) -> dict:
        return {str(n): str(s) for n, s in sorted(self._status.items())}


def apply(state: AllocationState, transitions: Iterable[Tuple[int, NodeStatus]]) -> AllocationState:
    return state.apply(transitions)


def available_capacity(topo: ClusterTopology, state: AllocationState, minipod: int,
                       include_reserved_for: Optional[str] = None) -> int:
    if not 0 <= minipod < topo.k:
        raise IndexError(f"minipod {minipod} out of range 0..{topo.k - 1}")
    return len(state.free_nodes(topo, minipod, include_reserved_for))


def available_by_minipod(topo: ClusterTopology, state: AllocationState,
                         include_reserved_for: Optional[str] = None) -> List[int]:
    return [available_capacity(topo, state, j, include_reserved_for) for j in range(topo.k)]
