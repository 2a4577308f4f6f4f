"""Protocol-to-plan compiler.

Protocols are JSON unit-operation lists (transfer / add / remove / mix /
heat / stir / wash / evaporate). Fluidic verbs compile against the
physical graph: pick a path, resolve the volume into pump cycles, and emit
per-cycle valve positioning services plus pump aspirate/dispense actions.
If one device owns the whole operation (a liquid handler exposing the verb
itself), the verb maps to that single capability instead. Non-fluidic
verbs map to the matching capability on the device owning the vessel.

Compilation is pure: tree and graph snapshots in, an ordered plan out.
The same protocol on a different (reachability-preserving) plumbing graph
must yield different bindings but identical net volume movement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

from .crutd import CrutdRequest
from .errors import (
    MissingCapability,
    NoFeasiblePath,
    SchemaError,
    UnknownVerb,
    UnresolvedResource,
)
from .resources import EntityKind, ResourceStore
from .topology import PhysicalGraph, TransferPath, select_path

VERBS = ("transfer", "add", "remove", "mix", "heat", "stir", "wash", "evaporate")
FLUIDIC_VERBS = ("transfer", "add", "remove", "mix", "wash")


@dataclass
class UnitOp:
    verb: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"verb": self.verb, "args": self.args}


@dataclass
class PlannedAction:
    target: str  # device uuid in the tree
    capability: str
    params: dict[str, Any] = field(default_factory=dict)
    kind: str = "action"  # action | service
    path_edges: list[str] = field(default_factory=list)
    crutd: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"target": self.target, "capability": self.capability,
                "params": self.params, "kind": self.kind,
                "path_edges": self.path_edges, "crutd": self.crutd}


@dataclass
class CompiledPlan:
    actions: list[PlannedAction] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"actions": [a.to_dict() for a in self.actions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "CompiledPlan":
        return cls(actions=[PlannedAction(
            target=a["target"], capability=a["capability"],
            params=dict(a.get("params", {})), kind=a.get("kind", "action"),
            path_edges=list(a.get("path_edges", [])), crutd=a.get("crutd"))
            for a in doc.get("actions", [])])

    @classmethod
    def from_json(cls, text: str) -> "CompiledPlan":
        return cls.from_dict(json.loads(text))


# -- parsing -----------------------------------------------------------------------


def parse_protocol(text: str) -> list[UnitOp]:
    """Validate a .proto.json document; repetitions expand into copies."""
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise SchemaError(f"protocol is not valid JSON: {exc}", path="$") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("steps"), list):
        raise SchemaError("protocol must be an object with a steps list",
                          path="$.steps")
    ops: list[UnitOp] = []
    for i, step in enumerate(doc["steps"]):
        path = f"$.steps[{i}]"
        if not isinstance(step, dict) or "verb" not in step:
            raise SchemaError("step must be an object with a verb", path=path)
        verb = step["verb"]
        if verb not in VERBS:
            raise UnknownVerb(f"unknown verb {verb!r}", path=path)
        args = dict(step.get("args", {}))
        if verb in ("transfer", "add", "remove", "wash"):
            volume = args.get("volume_ul")
            if not args.get("all") and (not isinstance(volume, int)
                                        or isinstance(volume, bool) or volume <= 0):
                raise SchemaError(f"{verb} requires volume_ul > 0 or all=true",
                                  path=f"{path}.args.volume_ul")
        if verb == "wash" and "waste" not in args:
            raise SchemaError("wash requires a waste destination",
                              path=f"{path}.args.waste")
        if verb == "mix":
            cycles = args.get("cycles", 1)
            if not isinstance(cycles, int) or cycles < 1:
                raise SchemaError("mix requires cycles >= 1",
                                  path=f"{path}.args.cycles")
            args["cycles"] = cycles
        reps = args.pop("repetitions", 1)
        if not isinstance(reps, int) or reps < 1:
            raise SchemaError("repetitions must be a positive integer",
                              path=f"{path}.args.repetitions")
        for _ in range(reps):
            ops.append(UnitOp(verb=verb, args=dict(args)))
    return ops


# -- name resolution ------------------------------------------------------------------


def resolve_resource(store: ResourceStore, ref: str) -> str:
    """Accepts a uuid or a unique name within the tree."""
    if ref in store:
        return ref
    matches = store.find_by_name(ref)
    if len(matches) != 1:
        raise UnresolvedResource(
            f"{ref!r} matches {len(matches)} records, need exactly one",
            subject=ref, matches=len(matches))
    return matches[0]


def owning_device(store: ResourceStore, uid: str,
                  capability: str) -> str | None:
    """Nearest ancestor (or self) advertising the capability."""
    for candidate in [uid, *store.ancestors(uid)]:
        rec = store.get(candidate)
        if capability in rec.config.get("capabilities", []):
            return candidate
    return None


def common_unit_op_device(store: ResourceStore, verb: str,
                          *uids: str) -> str | None:
    devices = {owning_device(store, uid, verb) for uid in uids}
    if len(devices) == 1:
        return devices.pop()
    return None


# -- fluidic expansion -----------------------------------------------------------------


def _valve_port(graph: PhysicalGraph, edge_id: str, valve_name: str) -> int | None:
    attrs = graph.edge(edge_id).attrs
    value = attrs.get(f"port:{valve_name}")
    return int(value) if value is not None else None


def _pump_at_valve(store: ResourceStore, graph: PhysicalGraph,
                   valve_uid: str) -> tuple[str, int] | None:
    """Syringe pump plumbed onto this valve, with its stroke."""
    for edge in graph.edges_at(valve_uid, "fluidic"):
        other = edge.other(valve_uid)
        rec = store.get(other)
        if rec.config.get("device_class") == "syringe_pump":
            return other, int(rec.config.get("stroke_ul", 10_000))
    return None


@dataclass
class _Hop:
    valve_uid: str
    valve_name: str
    pump_uid: str
    stroke_ul: int
    upstream_port: int
    downstream_port: int


def _plan_hops(store: ResourceStore, graph: PhysicalGraph,
               path: TransferPath) -> list[_Hop]:
    hops: list[_Hop] = []
    for i, node_uid in enumerate(path.nodes):
        rec = store.get(node_uid)
        if rec.entity_kind is not EntityKind.ACTION or \
                rec.functional_category != "connector":
            continue
        pump = _pump_at_valve(store, graph, node_uid)
        if pump is None:
            raise MissingCapability(
                f"valve {rec.name!r} on the selected path has no pump",
                subject=node_uid)
        up_port = _valve_port(graph, path.edge_ids[i - 1], rec.name)
        down_port = _valve_port(graph, path.edge_ids[i], rec.name)
        if up_port is None or down_port is None:
            raise MissingCapability(
                f"edges at valve {rec.name!r} lack port annotations",
                subject=node_uid)
        hops.append(_Hop(valve_uid=node_uid, valve_name=rec.name,
                         pump_uid=pump[0], stroke_ul=pump[1],
                         upstream_port=up_port, downstream_port=down_port))
    if not hops:
        raise NoFeasiblePath("selected path crosses no valve; nothing can move it",
                             subject=path.src)
    return hops


def _cycle_volumes(volume_ul: int, stroke_ul: int, prime_ul: int) -> list[int]:
    effective = stroke_ul - prime_ul
    if effective <= 0:
        raise MissingCapability(
            f"priming {prime_ul} uL leaves no stroke of {stroke_ul} uL")
    n = math.ceil(volume_ul / effective)
    cycles = [effective] * (n - 1)
    cycles.append(volume_ul - effective * (n - 1))
    return cycles


def _expand_fluidic(store: ResourceStore, graph: PhysicalGraph, src: str,
                    dst: str, volume_ul: int,
                    policy: str | dict[str, float]) -> list[PlannedAction]:
    paths = graph.find_paths(src, dst, medium="fluidic", limit=16)
    if not paths:
        raise NoFeasiblePath(
            f"no fluidic path {store.get(src).name!r} -> {store.get(dst).name!r}",
            subject=src, dst=dst)
    path = select_path(paths, policy)
    hops = _plan_hops(store, graph, path)
    prime = sum(int(graph.edge(e).attrs.get("prime_ul", 0))
                for e in path.edge_ids)
    stroke = min(h.stroke_ul for h in hops)
    cycles = _cycle_volumes(volume_ul, stroke, prime)

    actions: list[PlannedAction] = []
    edges = list(path.edge_ids)
    for index, cycle_ul in enumerate(cycles):
        moved = cycle_ul + prime
        for hop in hops:
            # one position at a time per valve: aspirate leg, then dispense leg
            actions.append(PlannedAction(
                target=hop.valve_uid, capability="set_position", kind="service",
                params={"port": hop.upstream_port}, path_edges=edges))
            actions.append(PlannedAction(
                target=hop.pump_uid, capability="aspirate",
                params={"volume": moved}, path_edges=edges))
            actions.append(PlannedAction(
                target=hop.valve_uid, capability="set_position", kind="service",
                params={"port": hop.downstream_port}, path_edges=edges))
            actions.append(PlannedAction(
                target=hop.pump_uid, capability="dispense",
                params={"volume": moved}, path_edges=edges))
        # ownership moves once per cycle, confirmed by the last dispense
        actions[-1].crutd = CrutdRequest(op="Transfer", params={
            "src_parent": src, "dst_parent": dst, "quantity_ul": cycle_ul,
            "medium": "fluidic"}).to_dict()
        actions[-1].params["cycle"] = index + 1
    return actions


# -- compile -----------------------------------------------------------------------------


def compile_protocol(ops: list[UnitOp], store: ResourceStore,
                     graph: PhysicalGraph,
                     policy: str | dict[str, float] = "shortest") -> CompiledPlan:
    plan = CompiledPlan()
    for op in ops:
        plan.actions.extend(_compile_op(op, store, graph, policy))
    return plan


def _compile_op(op: UnitOp, store: ResourceStore, graph: PhysicalGraph,
                policy: str | dict[str, float]) -> list[PlannedAction]:
    args = op.args
    if op.verb == "wash":
        # solvent in, same volume out to waste: net vessel volume unchanged
        rinse_in = UnitOp("add", {"src": args["src"], "dst": args["dst"],
                                  "volume_ul": args["volume_ul"]})
        rinse_out = UnitOp("remove", {"src": args["dst"], "dst": args["waste"],
                                      "volume_ul": args["volume_ul"]})
        return (_compile_op(rinse_in, store, graph, policy)
                + _compile_op(rinse_out, store, graph, policy))

    if op.verb in ("transfer", "add", "remove"):
        src = resolve_resource(store, args["src"])
        dst = resolve_resource(store, args["dst"])
        volume = args.get("volume_ul")
        if args.get("all"):
            volume = int(store.get(src).data.get("volume_ul", 0))
            if volume <= 0:
                return []
        handler = common_unit_op_device(store, "transfer", src, dst)
        if handler is not None:
            return [PlannedAction(
                target=handler, capability=op.verb,
                params={"src": store.get(src).name, "dst": store.get(dst).name,
                        "volume": volume},
                crutd=CrutdRequest(op="Transfer", params={
                    "src_parent": src, "dst_parent": dst,
                    "quantity_ul": volume, "medium": "fluidic",
                    "check_path": False}).to_dict())]
        return _expand_fluidic(store, graph, src, dst, volume, policy)

    if op.verb == "mix":
        vessel = resolve_resource(store, args["vessel"])
        volume = int(args["volume_ul"])
        cycles = int(args.get("cycles", 1))
        handler = owning_device(store, vessel, "mix")
        if handler is not None:
            return [PlannedAction(
                target=handler, capability="mix",
                params={"vessel": store.get(vessel).name, "volume": volume,
                        "cycles": cycles})]
        # aspirate/dispense pairs within the same vessel via the nearest pump
        adjacent = [graph.edge(e) for e in sorted(
            e.edge_id for e in graph.edges_at(vessel, "fluidic"))]
        if not adjacent:
            raise NoFeasiblePath(f"vessel {args['vessel']!r} has no fluidic line",
                                 subject=vessel)
        valve = adjacent[0].other(vessel)
        valve_rec = store.get(valve)
        pump = _pump_at_valve(store, graph, valve)
        if pump is None:
            raise MissingCapability(f"no pump at valve {valve_rec.name!r}",
                                    subject=valve)
        port = _valve_port(graph, adjacent[0].edge_id, valve_rec.name)
        actions = [PlannedAction(target=valve, capability="set_position",
                                 kind="service", params={"port": port})]
        for i in range(cycles):
            actions.append(PlannedAction(target=pump[0], capability="aspirate",
                                         params={"volume": volume}))
            actions.append(PlannedAction(target=pump[0], capability="dispense",
                                         params={"volume": volume,
                                                 "cycle": i + 1}))
        return actions

    # non-fluidic: map to a capability on the device owning the vessel
    capability = {"heat": "heat_to", "stir": "set_stir_speed",
                  "evaporate": "evaporate"}[op.verb]
    vessel = resolve_resource(store, args["vessel"])
    handler = owning_device(store, vessel, capability)
    if handler is None:
        raise MissingCapability(
            f"no device over {args['vessel']!r} offers {capability!r}",
            subject=vessel, capability=capability)
    params = {k: v for k, v in args.items() if k != "vessel"}
    kind = "service" if capability.startswith("set_") else "action"
    return [PlannedAction(target=handler, capability=capability,
                          params=params, kind=kind)]


# -- estimation -----------------------------------------------------------------------------


def estimate(plan: CompiledPlan) -> dict[str, Any]:
    total_cycles = 0
    moved_ul = 0
    per_device: dict[str, int] = {}
    for action in plan.actions:
        per_device[action.target] = per_device.get(action.target, 0) + 1
        if action.crutd is not None and action.crutd["op"] == "Transfer":
            q = action.crutd["params"].get("quantity_ul")
            if isinstance(q, int):
                moved_ul += q
                total_cycles += 1
    return {"total_cycles": total_cycles, "moved_ul": moved_ul,
            "per_device_actions": dict(sorted(per_device.items())),
            "total_actions": len(plan.actions)}


# -- plan to task group ------------------------------------------------------------------------


def plan_to_taskgroup(plan: CompiledPlan, store: ResourceStore,
                      device_node_of: dict[str, str],
                      submitted_by: str = "compiler") -> dict[str, Any]:
    """Linearize the plan into an orchestrator task group; each job depends
    on its predecessor so device actions execute strictly in plan order."""
    jobs = []
    prev_id: str | None = None
    for i, action in enumerate(plan.actions, start=1):
        node_id = device_node_of.get(action.target)
        if node_id is None:
            raise MissingCapability(
                f"device {store.get(action.target).name!r} is not bound to a "
                "bus node", subject=action.target)
        job_id = f"plan-j{i}"
        jobs.append({
            "job_id": job_id, "target": node_id,
            "capability": action.capability, "params": action.params,
            "kind": action.kind, "crutd": action.crutd,
            "depends_on": [prev_id] if prev_id else [],
        })
        prev_id = job_id
    return {"submitted_by": submitted_by, "jobs": jobs}
