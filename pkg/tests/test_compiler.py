import json
from pathlib import Path

import pytest

from labkernel.compiler import (
    CompiledPlan,
    UnitOp,
    compile_protocol,
    estimate,
    parse_protocol,
)
from labkernel.errors import (
    MissingCapability,
    NoFeasiblePath,
    SchemaError,
    UnknownVerb,
    UnresolvedResource,
)

from conftest import make_valve_network

SCENARIOS = Path(__file__).resolve().parent.parent / "fixtures" / "scenarios"


def proto(steps):
    return json.dumps({"steps": steps})


# -- parsing ------------------------------------------------------------------

def test_case2_fixture_parses_to_seven_ops():
    ops = parse_protocol((SCENARIOS / "case2.proto.json").read_text())
    assert len(ops) == 7
    assert [op.verb for op in ops] == [
        "add", "stir", "transfer", "wash", "wash", "wash", "evaporate"]


def test_unknown_verb():
    with pytest.raises(UnknownVerb):
        parse_protocol(proto([{"verb": "teleport", "args": {}}]))


def test_negative_volume_rejected():
    with pytest.raises(SchemaError):
        parse_protocol(proto([{"verb": "transfer",
                               "args": {"src": "a", "dst": "b",
                                        "volume_ul": -5}}]))
    with pytest.raises(SchemaError):
        parse_protocol(proto([{"verb": "mix",
                               "args": {"vessel": "a", "volume_ul": 10,
                                        "cycles": 0}}]))


def test_not_json_rejected():
    with pytest.raises(SchemaError):
        parse_protocol("definitely not json")
    with pytest.raises(SchemaError):
        parse_protocol("{}")


# -- compilation on the valve rig ------------------------------------------------

def test_cycle_arithmetic_25ml_stroke_10ml():
    store, graph, uids = make_valve_network("A")
    ops = [UnitOp("transfer", {"src": "reagent_port", "dst": "reactor",
                               "volume_ul": 25_000})]
    plan = compile_protocol(ops, store, graph)
    transfers = [a for a in plan.actions if a.crutd is not None]
    assert [a.crutd["params"]["quantity_ul"] for a in transfers] == \
        [10_000, 10_000, 5_000]
    stats = estimate(plan)
    assert stats["total_cycles"] == 3
    assert stats["moved_ul"] == 25_000


def test_add_reagent_assigns_v1_p1_on_unique_path():
    store, graph, uids = make_valve_network("A")
    ops = [UnitOp("add", {"src": "reagent_port", "dst": "reactor",
                          "volume_ul": 5_000})]
    plan = compile_protocol(ops, store, graph)
    targets = {a.target for a in plan.actions}
    assert targets == {uids["V1"], uids["P1"]}
    # per cycle: position to the source port, aspirate, position to the
    # destination port, dispense
    caps = [a.capability for a in plan.actions]
    assert caps == ["set_position", "aspirate", "set_position", "dispense"]
    ports = [a.params["port"] for a in plan.actions if a.kind == "service"]
    assert ports == [2, 5]  # reagent side, then reactor side


def test_multi_hop_uses_relay_pumps():
    store, graph, uids = make_valve_network("A")
    ops = [UnitOp("transfer", {"src": "reagent_port", "dst": "extractor",
                               "volume_ul": 8_000})]
    plan = compile_protocol(ops, store, graph)
    targets = {a.target for a in plan.actions}
    assert uids["V1"] in targets and uids["V2"] in targets
    assert uids["P1"] in targets and uids["P2"] in targets
    # one valve never takes two positions concurrently: strict serialization
    last_position: dict[str, int] = {}
    pending_move = None
    for action in plan.actions:
        if action.kind == "service":
            pending_move = action.target
        else:
            assert pending_move is not None  # every stroke follows a position


def test_mix_compiles_to_aspirate_dispense_pairs():
    store, graph, uids = make_valve_network("A")
    ops = [UnitOp("mix", {"vessel": "reactor", "volume_ul": 2_000,
                          "cycles": 3})]
    plan = compile_protocol(ops, store, graph)
    pump_ops = [a.capability for a in plan.actions if a.kind == "action"]
    assert pump_ops == ["aspirate", "dispense"] * 3


def test_unresolved_and_unreachable():
    store, graph, uids = make_valve_network("A")
    with pytest.raises(UnresolvedResource):
        compile_protocol([UnitOp("transfer", {"src": "bogus", "dst": "reactor",
                                              "volume_ul": 10})], store, graph)
    graph.remove_edge("e_r_v1")
    with pytest.raises(NoFeasiblePath):
        compile_protocol([UnitOp("transfer", {"src": "reagent_port",
                                              "dst": "reactor",
                                              "volume_ul": 10})], store, graph)


def test_heat_without_heater_missing_capability():
    store, graph, uids = make_valve_network("A")
    with pytest.raises(MissingCapability):
        compile_protocol([UnitOp("heat", {"vessel": "reactor", "target": 60})],
                         store, graph)


def test_device_level_verbs_when_handler_owns_vessels():
    store, graph, uids = make_valve_network("A")
    handler = store.create_record(
        {"name": "handler", "entity_kind": "ActionResource",
         "functional_category": "material_processing",
         "config": {"capabilities": ["transfer", "add", "remove", "mix"]}},
        parent=uids["rig"])
    w1 = store.create_record({"name": "w1", "data": {"volume_ul": 500},
                              "config": {"capacity_ul": 1000}}, parent=handler)
    w2 = store.create_record({"name": "w2", "data": {"volume_ul": 0},
                              "config": {"capacity_ul": 1000}}, parent=handler)
    plan = compile_protocol([UnitOp("transfer", {"src": "w1", "dst": "w2",
                                                 "volume_ul": 100})],
                            store, graph)
    assert len(plan.actions) == 1
    action = plan.actions[0]
    assert action.target == handler
    assert action.capability == "transfer"
    assert action.crutd["params"]["check_path"] is False


def test_wash_expands_to_in_and_out():
    store, graph, uids = make_valve_network("A")
    ops = parse_protocol(proto([{
        "verb": "wash", "args": {"src": "solvent_port", "dst": "extractor",
                                 "waste": "waste_port", "volume_ul": 4_000}}]))
    plan = compile_protocol(ops, store, graph)
    transfers = [a.crutd["params"] for a in plan.actions if a.crutd]
    assert transfers[0]["src_parent"] == uids["solvent_port"]
    assert transfers[0]["dst_parent"] == uids["extractor"]
    assert transfers[-1]["src_parent"] == uids["extractor"]
    assert transfers[-1]["dst_parent"] == uids["waste_port"]
    # net volume change of the washed vessel is zero
    delta = sum(p["quantity_ul"] if p["dst_parent"] == uids["extractor"]
                else -p["quantity_ul"] if p["src_parent"] == uids["extractor"]
                else 0 for p in transfers)
    assert delta == 0


def test_capability_soundness_against_manifests():
    # every emitted capability exists on the corresponding sim device class
    store, graph, uids = make_valve_network("A")
    ops = parse_protocol((SCENARIOS / "case2.proto.json").read_text())
    # drop the verbs that need heater/rotovap devices this fixture lacks
    ops = [op for op in ops if op.verb not in ("stir", "evaporate")]
    plan = compile_protocol(ops, store, graph)
    from labkernel.manifest import parse_manifest
    from labkernel.simlab.devices import load_manifest
    valve_caps = {c.name for c in
                  parse_manifest(load_manifest("multiport_valve")).capabilities}
    pump_caps = {c.name for c in
                 parse_manifest(load_manifest("syringe_pump")).capabilities}
    for action in plan.actions:
        name = store.get(action.target).name
        if name.startswith("V"):
            assert action.capability in valve_caps
        elif name.startswith("P"):
            assert action.capability in pump_caps


def test_estimate_empty():
    stats = estimate(CompiledPlan())
    assert stats == {"total_cycles": 0, "moved_ul": 0,
                     "per_device_actions": {}, "total_actions": 0}


def test_priming_reduces_effective_stroke():
    store, graph, uids = make_valve_network("A")
    graph.edge("e_r_v1").attrs["prime_ul"] = 2_000
    ops = [UnitOp("add", {"src": "reagent_port", "dst": "reactor",
                          "volume_ul": 25_000})]
    plan = compile_protocol(ops, store, graph)
    transfers = [a.crutd["params"]["quantity_ul"] for a in plan.actions
                 if a.crutd]
    assert sum(transfers) == 25_000  # cycle soundness holds with priming
    assert all(t <= 8_000 for t in transfers)  # stroke 10k minus 2k prime
    pumps = [a.params["volume"] for a in plan.actions
             if a.capability == "aspirate"]
    assert all(v <= 10_000 for v in pumps)


def test_plan_json_roundtrip(tmp_path):
    store, graph, uids = make_valve_network("A")
    ops = [UnitOp("transfer", {"src": "reagent_port", "dst": "extractor",
                               "volume_ul": 12_000})]
    plan = compile_protocol(ops, store, graph)
    path = tmp_path / "case.plan.json"
    path.write_text(plan.to_json())
    reloaded = CompiledPlan.from_json(path.read_text())
    assert reloaded == plan
    assert estimate(reloaded) == estimate(plan)
