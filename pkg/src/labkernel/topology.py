"""Physical connectivity graph over resource-tree nodes.

Edges describe feasible material pathways (fluidic tubing, robotic reach,
electrical, data links) between records of the tree. Path queries are pure
and deterministic: breadth-first enumeration of simple paths, capped at
depth 16, ordered by (length, lexicographic edge-id sequence). Lab graphs
are small; determinism beats asymptotics here.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .errors import (
    DanglingEndpoint,
    DuplicateEdgeId,
    EmptyCandidateSet,
    UnknownEdge,
    UnknownUuid,
)
from .resources import EntityKind, ResourceStore

MEDIA = ("fluidic", "robotic", "electrical", "data")
MAX_PATH_DEPTH = 16


@dataclass
class PhysicalEdge:
    edge_id: str
    endpoints: tuple[str, str]
    medium: str = "fluidic"
    directed: bool = False
    attrs: dict[str, Any] = field(default_factory=dict)

    def other(self, node: str) -> str:
        a, b = self.endpoints
        return b if node == a else a

    def to_dict(self) -> dict[str, Any]:
        return {
            "edge_id": self.edge_id,
            "endpoints": list(self.endpoints),
            "medium": self.medium,
            "directed": self.directed,
            "attrs": dict(self.attrs),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PhysicalEdge":
        return cls(
            edge_id=d["edge_id"],
            endpoints=(d["endpoints"][0], d["endpoints"][1]),
            medium=d.get("medium", "fluidic"),
            directed=bool(d.get("directed", False)),
            attrs=dict(d.get("attrs", {})),
        )


@dataclass(frozen=True)
class TransferPath:
    edge_ids: tuple[str, ...]
    nodes: tuple[str, ...]  # src ... dst, len(edge_ids) + 1
    src: str
    dst: str
    medium: str

    def __len__(self) -> int:
        return len(self.edge_ids)


class PhysicalGraph:
    """Edge set bound to a ResourceStore for endpoint validation."""

    def __init__(self, store: ResourceStore) -> None:
        self.store = store
        self._edges: dict[str, PhysicalEdge] = {}
        self._adjacency: dict[str, list[str]] = {}

    def __contains__(self, edge_id: str) -> bool:
        return edge_id in self._edges

    def edges(self) -> list[PhysicalEdge]:
        return [self._edges[eid] for eid in sorted(self._edges)]

    def edge(self, edge_id: str) -> PhysicalEdge:
        try:
            return self._edges[edge_id]
        except KeyError:
            raise UnknownEdge(f"no edge {edge_id}", subject=edge_id) from None

    def add_edge(self, edge: PhysicalEdge) -> None:
        if edge.edge_id in self._edges:
            raise DuplicateEdgeId(f"edge id {edge.edge_id} already present",
                                  subject=edge.edge_id)
        if edge.medium not in MEDIA:
            raise DanglingEndpoint(f"unknown medium {edge.medium!r}", subject=edge.edge_id)
        for endpoint in edge.endpoints:
            if endpoint not in self.store:
                raise DanglingEndpoint(f"endpoint {endpoint} not in tree",
                                       subject=edge.edge_id, endpoint=endpoint)
        self._edges[edge.edge_id] = edge
        for endpoint in edge.endpoints:
            self._adjacency.setdefault(endpoint, []).append(edge.edge_id)

    def remove_edge(self, edge_id: str) -> None:
        edge = self.edge(edge_id)
        del self._edges[edge_id]
        for endpoint in edge.endpoints:
            self._adjacency[endpoint].remove(edge_id)

    def edges_at(self, node: str, medium: str | None = None) -> list[PhysicalEdge]:
        out = [self._edges[eid] for eid in sorted(self._adjacency.get(node, ()))]
        if medium is not None:
            out = [e for e in out if e.medium == medium]
        return out

    def neighbors(self, node: str, medium: str | None = None) -> list[str]:
        seen = []
        for e in self.edges_at(node, medium):
            if e.directed and e.endpoints[0] != node:
                continue
            other = e.other(node)
            if other not in seen:
                seen.append(other)
        return seen

    def reachable_set(self, src: str, medium: str | None = None) -> set[str]:
        seen = {src}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            for nxt in self.neighbors(node, medium):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    # -- path queries ----------------------------------------------------------

    def find_paths(self, src: str, dst: str, medium: str = "fluidic",
                   limit: int = 4, *, max_depth: int = MAX_PATH_DEPTH,
                   allow_unschedulable: bool = False) -> list[TransferPath]:
        """Up to ``limit`` simple paths sorted by (length, lexicographic
        edge-id sequence). Archived (non-schedulable) nodes are not routed
        through unless explicitly allowed."""
        if src not in self.store:
            raise UnknownUuid(f"no record {src}", subject=src)
        if dst not in self.store:
            raise UnknownUuid(f"no record {dst}", subject=dst)
        if limit < 1:
            return []

        def usable(node: str) -> bool:
            return allow_unschedulable or self.store.get(node).schedulable

        if not usable(src) or not usable(dst):
            return []
        if src == dst:
            return [TransferPath(edge_ids=(), nodes=(src,), src=src, dst=dst,
                                 medium=medium)]

        found: list[TransferPath] = []
        # queue entries: (node, edge_ids tuple, nodes tuple)
        queue: deque[tuple[str, tuple[str, ...], tuple[str, ...]]] = deque()
        queue.append((src, (), (src,)))
        while queue and len(found) < limit:
            node, edge_ids, nodes = queue.popleft()
            if len(edge_ids) >= max_depth:
                continue
            for edge in self.edges_at(node, medium):
                if edge.directed and edge.endpoints[0] != node:
                    continue
                nxt = edge.other(node)
                if nxt in nodes or not usable(nxt):
                    continue
                new_edges = edge_ids + (edge.edge_id,)
                new_nodes = nodes + (nxt,)
                if nxt == dst:
                    found.append(TransferPath(edge_ids=new_edges, nodes=new_nodes,
                                              src=src, dst=dst, medium=medium))
                    if len(found) >= limit:
                        break
                else:
                    queue.append((nxt, new_edges, new_nodes))
        return found


def select_path(paths: list[TransferPath],
                policy: str | dict[str, float] = "shortest") -> TransferPath:
    """Deterministic winner: minimum length (or weight-map cost), ties broken
    by lexicographic edge-id sequence."""
    if not paths:
        raise EmptyCandidateSet("no candidate paths")
    if isinstance(policy, dict):
        def cost(p: TransferPath) -> tuple:
            return (sum(policy.get(eid, 1.0) for eid in p.edge_ids), p.edge_ids)
    else:
        def cost(p: TransferPath) -> tuple:
            return (len(p.edge_ids), p.edge_ids)
    return min(paths, key=cost)


def validate_dual(store: ResourceStore, graph: PhysicalGraph) -> list[dict[str, Any]]:
    """Consistency report between the tree and the physical graph.

    Flags edges whose endpoints have left the tree, and pure-Action nodes
    wired as fluidic dead-ends (material would have to terminate inside a
    node that cannot own material).
    """
    report: list[dict[str, Any]] = []
    fluidic_degree: dict[str, int] = {}
    for edge in graph.edges():
        for endpoint in edge.endpoints:
            if endpoint not in store:
                report.append({"kind": "dangling_endpoint", "edge_id": edge.edge_id,
                               "endpoint": endpoint})
            elif edge.medium == "fluidic":
                fluidic_degree[endpoint] = fluidic_degree.get(endpoint, 0) + 1
    for node, degree in sorted(fluidic_degree.items()):
        if node not in store:
            continue
        rec = store.get(node)
        if rec.entity_kind is EntityKind.ACTION and degree == 1:
            report.append({"kind": "action_material_endpoint", "node": node,
                           "name": rec.name})
    return report
