"""Shared fixtures: small trees and the valve-network graph used across
module tests, the compiler, and the scenarios."""

from __future__ import annotations

import pytest

from labkernel.resources import ResourceStore
from labkernel.topology import PhysicalEdge, PhysicalGraph


@pytest.fixture
def store():
    s = ResourceStore()
    s.create_record({"name": "lab"})
    return s


def make_deck_fixture(store: ResourceStore) -> dict[str, str]:
    """Deck -> Plate -> 96 wells, under the root."""
    root = store.root_uuid
    deck = store.create_record({"name": "deck"}, parent=root)
    plate = store.create_record({"name": "plate_1"}, parent=deck)
    wells = {}
    for row in "ABCDEFGH":
        for col in range(1, 13):
            name = f"{row}{col}"
            wells[name] = store.create_record(
                {"name": name, "config": {"capacity_ul": 300},
                 "data": {"volume_ul": 0}}, parent=plate)
    return {"deck": deck, "plate": plate, **wells}


VALVE_PORTS = {
    # variant A wiring: (edge name, a, b, ports)
    "A": [
        ("e_r_v1", "reagent_port", "V1", {"port:V1": 2}),
        ("e_s_v2", "solvent_port", "V2", {"port:V2": 2}),
        ("e_g_v3", "gas_port", "V3", {"port:V3": 2}),
        ("e_w_v4", "waste_port", "V4", {"port:V4": 2}),
        ("e_v1_v2", "V1", "V2", {"port:V1": 3, "port:V2": 4}),
        ("e_v2_v3", "V2", "V3", {"port:V2": 3, "port:V3": 4}),
        ("e_v3_v4", "V3", "V4", {"port:V3": 3, "port:V4": 4}),
        ("e_v1_reactor", "V1", "reactor", {"port:V1": 5}),
        ("e_v2_extractor", "V2", "extractor", {"port:V2": 5}),
        ("e_v3_column", "V3", "column", {"port:V3": 5}),
        ("e_v4_evaporator", "V4", "evaporator", {"port:V4": 5}),
    ],
    # variant B: same vessels, permuted plumbing (reagent enters at V2,
    # solvent at V1, reactor hangs off V3, extractor off V1, backbone ring)
    "B": [
        ("b_r_v2", "reagent_port", "V2", {"port:V2": 2}),
        ("b_s_v1", "solvent_port", "V1", {"port:V1": 2}),
        ("b_g_v4", "gas_port", "V4", {"port:V4": 2}),
        ("b_w_v3", "waste_port", "V3", {"port:V3": 2}),
        ("b_v2_v1", "V2", "V1", {"port:V2": 3, "port:V1": 4}),
        ("b_v1_v3", "V1", "V3", {"port:V1": 3, "port:V3": 6}),
        ("b_v3_v2", "V3", "V2", {"port:V3": 7, "port:V2": 6}),
        ("b_v3_v4", "V3", "V4", {"port:V3": 3, "port:V4": 4}),
        ("b_v3_reactor", "V3", "reactor", {"port:V3": 5}),
        ("b_v1_extractor", "V1", "extractor", {"port:V1": 5}),
        ("b_v2_column", "V2", "column", {"port:V2": 5}),
        ("b_v4_evaporator", "V4", "evaporator", {"port:V4": 5}),
    ],
}


def make_valve_network(variant: str = "A", with_pumps: bool = True):
    """Synthesis-rig fixture: four selector valves, four ports, four vessels,
    optionally a syringe pump per valve. Returns (store, graph, uuid map)."""
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    rig = store.create_record({"name": "rig"}, parent=root)
    uids: dict[str, str] = {"lab": root, "rig": rig}

    for name in ("reagent_port", "solvent_port", "gas_port", "waste_port"):
        uids[name] = store.create_record(
            {"name": name, "data": {"volume_ul": 1_000_000},
             "config": {"capacity_ul": 2_000_000}}, parent=rig)
    for name in ("reactor", "extractor", "column", "evaporator"):
        uids[name] = store.create_record(
            {"name": name, "data": {"volume_ul": 0},
             "config": {"capacity_ul": 500_000}}, parent=rig)
    for name in ("V1", "V2", "V3", "V4"):
        uids[name] = store.create_record(
            {"name": name, "entity_kind": "Action",
             "functional_category": "connector",
             "config": {"ports": 8}}, parent=rig)

    graph = PhysicalGraph(store)
    for edge_id, a, b, ports in VALVE_PORTS[variant]:
        graph.add_edge(PhysicalEdge(edge_id=edge_id,
                                    endpoints=(uids[a], uids[b]),
                                    medium="fluidic", attrs=dict(ports)))
    if with_pumps:
        for i, valve in enumerate(("V1", "V2", "V3", "V4"), start=1):
            pump = store.create_record(
                {"name": f"P{i}", "entity_kind": "ActionResource",
                 "functional_category": "connector",
                 "config": {"stroke_ul": 10_000, "device_class": "syringe_pump"}},
                parent=rig)
            barrel = store.create_record(
                {"name": f"P{i}_barrel", "config": {"capacity_ul": 10_000},
                 "data": {"volume_ul": 0}}, parent=pump)
            uids[f"P{i}"] = pump
            uids[f"P{i}_barrel"] = barrel
            prefix = "e" if variant == "A" else "b"
            graph.add_edge(PhysicalEdge(
                edge_id=f"{prefix}_p{i}_{valve.lower()}",
                endpoints=(pump, uids[valve]), medium="fluidic",
                attrs={f"port:{valve}": 1}))
    return store, graph, uids


@pytest.fixture
def valve_fixture():
    return make_valve_network("A")
