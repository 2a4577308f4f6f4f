"""On-disk fixture format: canonical ``.lab.json`` files holding the whole
resource tree plus the physical edge list."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from . import canonical
from .resources import ResourceStore
from .topology import PhysicalEdge, PhysicalGraph


def lab_to_dict(store: ResourceStore, graph: PhysicalGraph | None = None) -> dict[str, Any]:
    doc = store.to_tree_dict()
    doc["physical_edges"] = [e.to_dict() for e in graph.edges()] if graph else []
    return doc


def save_lab_file(path: str | Path, store: ResourceStore,
                  graph: PhysicalGraph | None = None) -> None:
    Path(path).write_text(canonical.canonical_text(lab_to_dict(store, graph)) + "\n",
                          encoding="utf-8")


def lab_from_dict(doc: dict[str, Any]) -> tuple[ResourceStore, PhysicalGraph]:
    store = ResourceStore.from_tree_dict(doc)
    graph = PhysicalGraph(store)
    for edge_dict in doc.get("physical_edges", []):
        graph.add_edge(PhysicalEdge.from_dict(edge_dict))
    return store, graph


def load_lab_file(path: str | Path) -> tuple[ResourceStore, PhysicalGraph]:
    return lab_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
