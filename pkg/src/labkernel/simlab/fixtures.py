"""Scenario fixture trees (.lab.json). Regenerate with:

    python3 -m labkernel.simlab.fixtures <output_dir>

Each builder seeds uuid generation so the shipped files are stable; device
nodes (pumps, valves, handlers, stations) are NOT in these trees - they
enroll over the bus at scenario start.
"""

from __future__ import annotations

import sys
from pathlib import Path

from ..labfile import save_lab_file
from ..resources import ResourceStore, seed_uuids
from ..topology import PhysicalGraph


def build_case1() -> tuple[ResourceStore, PhysicalGraph]:
    """Liquid-handling workstation: deck, one 24-well plate, troughs."""
    seed_uuids(101)
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    bench = store.create_record({"name": "bench"}, parent=root)
    deck = store.create_record({"name": "deck"}, parent=bench)
    plate = store.create_record({"name": "plate_1"}, parent=deck)
    for row in "ABCD":
        for col in range(1, 7):
            store.create_record(
                {"name": f"{row}{col}", "config": {"capacity_ul": 2000},
                 "data": {"volume_ul": 0}}, parent=plate)
    store.create_record({"name": "reagent_trough",
                         "config": {"capacity_ul": 300_000},
                         "data": {"volume_ul": 250_000}}, parent=deck)
    store.create_record({"name": "diluent_trough",
                         "config": {"capacity_ul": 300_000},
                         "data": {"volume_ul": 250_000}}, parent=deck)
    store.create_record({"name": "waste_trough",
                         "config": {"capacity_ul": 500_000},
                         "data": {"volume_ul": 0}}, parent=deck)
    seed_uuids(None)
    return store, PhysicalGraph(store)


def build_case2() -> tuple[ResourceStore, PhysicalGraph]:
    """Synthesis rig vessels and ports; valves/pumps enroll at runtime."""
    seed_uuids(102)
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    rig = store.create_record({"name": "rig"}, parent=root)
    for name, volume, capacity in (
            ("reagent_port", 1_000_000, 2_000_000),
            ("solvent_port", 1_000_000, 2_000_000),
            ("gas_port", 0, 1),
            ("waste_port", 0, 2_000_000),
            ("reactor", 0, 500_000),
            ("extractor", 0, 500_000),
            ("column", 0, 500_000),
            ("evaporator", 0, 500_000)):
        store.create_record({"name": name, "data": {"volume_ul": volume},
                             "config": {"capacity_ul": capacity}}, parent=rig)
    seed_uuids(None)
    return store, PhysicalGraph(store)


def build_case3() -> tuple[ResourceStore, PhysicalGraph]:
    """Electrolyte foundry: three areas, raw lots, component trays."""
    seed_uuids(103)
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    glovebox = store.create_record({"name": "glovebox_area"}, parent=root)
    assembly = store.create_record({"name": "assembly_area"}, parent=root)
    testing = store.create_record({"name": "testing_area"}, parent=root)

    rack = store.create_record({"name": "lot_rack"}, parent=glovebox)
    for lot in ("lot_salt", "lot_solvent", "lot_additive"):
        store.create_record({"name": lot, "data": {"volume_ul": 100_000},
                             "config": {"capacity_ul": 120_000},
                             "extra": {"batch": f"{lot}-2026-08"}}, parent=rack)
    store.create_record({"name": "mix_vessel", "data": {"volume_ul": 0},
                         "config": {"capacity_ul": 50_000}}, parent=glovebox)
    store.create_record({"name": "mix_vessel_2", "data": {"volume_ul": 0},
                         "config": {"capacity_ul": 50_000}}, parent=glovebox)

    tray = store.create_record({"name": "component_tray"}, parent=assembly)
    for i in (1, 2):
        for part in ("anode", "cathode", "separator"):
            store.create_record({"name": f"{part}_{i}",
                                 "extra": {"batch": f"{part}-2026-08"}},
                                parent=tray)
    store.create_record({"name": "cell_rack"}, parent=assembly)
    store.create_record({"name": "test_rack"}, parent=testing)
    seed_uuids(None)
    return store, PhysicalGraph(store)


def build_case4() -> tuple[ResourceStore, PhysicalGraph]:
    """Electrolysis loop: water tank; sensor/electrolyzer/compute enroll."""
    seed_uuids(104)
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    skid = store.create_record({"name": "electrolysis_skid"}, parent=root)
    store.create_record({"name": "water_tank", "data": {"volume_ul": 5_000_000},
                         "config": {"capacity_ul": 10_000_000}}, parent=skid)
    seed_uuids(None)
    return store, PhysicalGraph(store)


BUILDERS = {
    "case1_deck": build_case1,
    "case2_rig": build_case2,
    "case3_foundry": build_case3,
    "case4_loop": build_case4,
}


def write_all(out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, builder in BUILDERS.items():
        store, graph = builder()
        path = out / f"{name}.lab.json"
        save_lab_file(path, store, graph)
        written.append(path)
    return written


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "fixtures/scenarios"
    for path in write_all(target):
        print(path)
