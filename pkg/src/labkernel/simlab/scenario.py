"""Scenario loader/runner: fixture + roster + stimuli + assertions.

A .scenario.json file names a fixture tree, the simulated device roster
(devices enroll over the bus, optionally under per-device parents), graph
edges to wire once enrollment resolves names to uuids, a protocol to
compile or task groups to submit, a fault schedule (partitions, crashes),
and declarative assertions evaluated at the end. A (scenario, seed) pair
is fully deterministic: byte-identical event logs and bus traces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..bus.network import SimNetwork
from ..compiler import (
    compile_protocol,
    estimate,
    parse_protocol,
    plan_to_taskgroup,
)
from ..crutd import CrutdEngine, CrutdRequest, write_event_log
from ..errors import ScenarioLoadError, UnresolvedResource
from ..host import HostNode
from ..labfile import load_lab_file
from ..orchestrator import Orchestrator, Policy
from ..resources import ResourceStore, seed_uuids, total_volume_ul
from ..topology import PhysicalEdge
from .controller import ElectrolyzerController
from .devices import (
    SimAgv,
    SimComputeNode,
    SimElectrolyzer,
    SimHeaterStirrer,
    SimLiquidHandler,
    SimRotovap,
    SimStation,
    SimSyringePump,
    SimTdsSensor,
    SimValve,
    stream_topic,
)

DEVICE_KINDS = {
    "liquid_handler": SimLiquidHandler,
    "syringe_pump": SimSyringePump,
    "multiport_valve": SimValve,
    "heater_stirrer": SimHeaterStirrer,
    "tds_sensor": SimTdsSensor,
    "electrolyzer": SimElectrolyzer,
    "agv": SimAgv,
    "rotovap": SimRotovap,
    "compute_node": SimComputeNode,
    "station": SimStation,
}


@dataclass
class Scenario:
    name: str
    seed: int
    duration_s: float
    fixture: str
    base_dir: Path
    enroll_under: str | None = None
    devices: list[dict[str, Any]] = field(default_factory=list)
    graph_edges: list[dict[str, Any]] = field(default_factory=list)
    setup: list[dict[str, Any]] = field(default_factory=list)
    protocol: str | None = None
    task_groups: list[dict[str, Any]] = field(default_factory=list)
    faults: list[dict[str, Any]] = field(default_factory=list)
    controller: dict[str, Any] | None = None
    policy: dict[str, Any] = field(default_factory=dict)
    assertions: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ScenarioLoadError(f"cannot load scenario {path}: {exc}") from exc
        missing = [k for k in ("name", "seed", "duration_s", "fixture")
                   if k not in doc]
        if missing:
            raise ScenarioLoadError(f"scenario {path} lacks fields {missing}")
        return cls(name=doc["name"], seed=int(doc["seed"]),
                   duration_s=float(doc["duration_s"]), fixture=doc["fixture"],
                   base_dir=path.parent,
                   enroll_under=doc.get("enroll_under"),
                   devices=doc.get("devices", []),
                   graph_edges=doc.get("graph_edges", []),
                   setup=doc.get("setup", []),
                   protocol=doc.get("protocol"),
                   task_groups=doc.get("task_groups", []),
                   faults=doc.get("faults", []),
                   controller=doc.get("controller"),
                   policy=doc.get("policy", {}),
                   assertions=doc.get("assertions", []))


@dataclass
class ScenarioResult:
    scenario: Scenario
    network: SimNetwork
    store: ResourceStore
    engine: CrutdEngine
    host: HostNode
    orchestrator: Orchestrator
    devices: dict[str, Any]
    controller: ElectrolyzerController | None
    group_ids: list[str]
    assertion_results: list[tuple[str, bool, str]]
    initial_volume_ul: int
    plan_estimate: dict[str, Any] | None = None

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.assertion_results)

    def summary_lines(self) -> list[str]:
        lines = [f"scenario {self.scenario.name}: "
                 f"{sum(ok for _, ok, _ in self.assertion_results)}/"
                 f"{len(self.assertion_results)} assertions passed"]
        for name, ok, detail in self.assertion_results:
            lines.append(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return lines

    def write_event_log(self, path: str | Path) -> None:
        write_event_log(path, self.engine.events)

    def final_volumes(self) -> dict[str, int]:
        out = {}
        for uid in self.store.query_subtree(self.store.root_uuid):
            rec = self.store.get(uid)
            v = rec.data.get("volume_ul")
            if isinstance(v, int) and not isinstance(v, bool):
                out[rec.name] = v
        return out

    def write_telemetry_csv(self, path: str | Path, sensor: str = "tds-1",
                            step_s: float = 0.1) -> None:
        """Console-facing export: sensor trace plus controller mode over time."""
        device = self.devices[sensor]
        commands = self.controller.commands if self.controller else []
        lines = ["t_s,tds_ppm,mode"]
        t = 0.0
        while t <= self.scenario.duration_s + 1e-9:
            mode = "CC"
            for when, m, _ in commands:
                if when <= t:
                    mode = m
            lines.append(f"{t:.1f},{device.value_at(t):.3f},{mode}")
            t = round(t + step_s, 10)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Runtime:
    """One scenario instantiation; resolves names lazily as devices join."""

    def __init__(self, scenario: Scenario, override_faults=None) -> None:
        self.scenario = scenario
        seed_uuids(scenario.seed)
        self.network = SimNetwork(seed=scenario.seed)
        fixture_path = scenario.base_dir / scenario.fixture
        self.store, self.graph = load_lab_file(fixture_path)
        self.engine = CrutdEngine(self.store, graph=self.graph,
                                  clock=lambda: self.network.now)
        enroll_parent = (self.resolve(scenario.enroll_under)
                         if scenario.enroll_under else self.store.root_uuid)
        policy_doc = dict(scenario.policy)
        self.host = HostNode(
            self.network, self.engine, enroll_parent=enroll_parent,
            heartbeat_period=policy_doc.pop("heartbeat_period", 1.0),
            heartbeat_misses=policy_doc.pop("heartbeat_misses", 3))
        self.orchestrator = Orchestrator(self.host, Policy(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in policy_doc.items()}))
        self.devices: dict[str, Any] = {}
        self.controller: ElectrolyzerController | None = None
        self.group_ids: list[str] = []
        self.faults = scenario.faults if override_faults is None else override_faults
        self.initial_volume = total_volume_ul(self.store)
        self.plan_estimate: dict[str, Any] | None = None

    # -- name resolution -------------------------------------------------------

    def resolve(self, ref: str) -> str:
        """uuid, unique tree name, or "<node_id>/<name>" under a device.
        uuid-shaped refs pass through unresolved so jobs may reference
        records a predecessor job will create."""
        if ref in self.store:
            return ref
        import re
        if re.fullmatch(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-"
                        r"[0-9a-f]{4}-[0-9a-f]{12}", ref):
            return ref
        if "/" in ref:
            node_id, child = ref.split("/", 1)
            entry = self.host.registry.get(node_id)
            if entry is None:
                raise UnresolvedResource(f"node {node_id!r} not admitted",
                                         subject=ref)
            for device_uuid in entry.device_uuids:
                for uid in self.store.query_subtree(device_uuid):
                    if self.store.get(uid).name == child:
                        return uid
            raise UnresolvedResource(f"{child!r} not under node {node_id!r}",
                                     subject=ref)
        matches = self.store.find_by_name(ref)
        if len(matches) != 1:
            raise UnresolvedResource(
                f"{ref!r} matches {len(matches)} records", subject=ref)
        return matches[0]

    # -- construction phases ------------------------------------------------------

    def spawn_devices(self) -> None:
        for spec in self.scenario.devices:
            kind = spec["kind"]
            cls = DEVICE_KINDS.get(kind)
            if cls is None:
                raise ScenarioLoadError(f"unknown device kind {kind!r}")
            params = dict(spec.get("params", {}))
            if spec.get("tree_name"):
                params["tree_name"] = spec["tree_name"]
            if "tds_topic_from" in params:
                params["tds_topic"] = stream_topic(params.pop("tds_topic_from"),
                                                   "get_tds")
            device = cls(self.network, spec["node_id"], **params)
            self.devices[spec["node_id"]] = device

    def await_enrollment(self, timeout: float = 10.0) -> None:
        ok = self.network.run_until(
            lambda: all(d.admitted for d in self.devices.values()),
            timeout=timeout, dt=0.25)
        if not ok:
            stuck = [d.node_id for d in self.devices.values() if not d.admitted]
            raise ScenarioLoadError(f"devices never admitted: {stuck}")

    def wire_graph(self) -> None:
        for edge in self.scenario.graph_edges:
            self.graph.add_edge(PhysicalEdge(
                edge_id=edge["edge_id"],
                endpoints=(self.resolve(edge["a"]), self.resolve(edge["b"])),
                medium=edge.get("medium", "fluidic"),
                directed=bool(edge.get("directed", False)),
                attrs=dict(edge.get("attrs", {}))))

    def wire_controller(self) -> None:
        spec = self.scenario.controller
        if not spec:
            return
        compute = self.devices[spec["compute_node"]]
        self.controller = ElectrolyzerController(
            compute.bus, electrolyzer=spec["electrolyzer"],
            tds_topic=stream_topic(spec["tds_sensor"], "get_tds"),
            threshold_ppm=spec.get("threshold_ppm", 1965.0),
            hold_time_s=spec.get("hold_time_s", 10.0),
            tick_s=spec.get("tick_s", 0.1),
            cc_ma=spec.get("cc_ma", 1500),
            cv_v=spec.get("cv_v", 1.82))

    def apply_setup(self) -> None:
        """Pre-run arrangement (racking vessels into device slots etc.),
        committed through the engine so provenance still covers it."""
        for op in self.scenario.setup:
            if "transfer" in op:
                t = op["transfer"]
                params: dict[str, Any] = {
                    "src_parent": self.resolve(t["src"]),
                    "dst_parent": self.resolve(t["dst"]),
                    "check_path": t.get("check_path", False),
                }
                subject = None
                if t.get("whole_object", True):
                    params["whole_object"] = True
                    params["medium"] = t.get("medium", "robotic")
                    subject = self.resolve(t["subject"])
                else:
                    params["quantity_ul"] = int(t["quantity_ul"])
                self.engine.execute(CrutdRequest(op="Transfer", subject=subject,
                                                 params=params, actor="setup"))
            elif "update" in op:
                u = op["update"]
                self.engine.execute(CrutdRequest(
                    op="Update", subject=self.resolve(u["subject"]),
                    params={"namespace": u["namespace"], "patch": u["patch"]},
                    actor="setup"))

    def submit_protocol(self) -> None:
        if self.scenario.protocol:
            text = (self.scenario.base_dir / self.scenario.protocol).read_text()
            ops = parse_protocol(text)
            plan = compile_protocol(ops, self.store, self.graph)
            self.plan_estimate = estimate(plan)
            group = plan_to_taskgroup(plan, self.store, self.host.device_node_of)
            self.group_ids.append(self.orchestrator.submit(group))
        for group_spec in self.scenario.task_groups:
            self.group_ids.append(
                self.orchestrator.submit(self._resolve_group(group_spec)))

    def _resolve_group(self, spec: dict[str, Any]) -> dict[str, Any]:
        out = {"submitted_by": spec.get("submitted_by", "scenario"),
               "group_id": spec.get("group_id"), "jobs": []}
        for job in spec.get("jobs", []):
            resolved = {k: v for k, v in job.items()
                        if k not in ("transfer", "update", "create", "motion")}
            if "transfer" in job:
                t = job["transfer"]
                params: dict[str, Any] = {
                    "src_parent": self.resolve(t["src"]),
                    "dst_parent": self.resolve(t["dst"]),
                    "check_path": t.get("check_path", True),
                }
                subject = None
                if t.get("whole_object"):
                    params["whole_object"] = True
                    params["medium"] = t.get("medium", "robotic")
                    subject = self.resolve(t["subject"])
                else:
                    params["quantity_ul"] = int(t["quantity_ul"])
                resolved["crutd"] = CrutdRequest(
                    op="Transfer", subject=subject, params=params).to_dict()
            elif "update" in job:
                u = job["update"]
                resolved["crutd"] = CrutdRequest(
                    op="Update", subject=self.resolve(u["subject"]),
                    params={"namespace": u["namespace"],
                            "patch": u["patch"]}).to_dict()
            elif "create" in job:
                c = job["create"]
                resolved["crutd"] = CrutdRequest(
                    op="Create", params={
                        "spec": c["spec"],
                        "parent": self.resolve(c["parent"])}).to_dict()
            if "motion" in job:
                m = dict(job["motion"])
                m["subject"] = self.resolve(m["subject"])
                resolved["motion"] = m
            out["jobs"].append(resolved)
        return out

    def schedule_faults(self) -> None:
        for fault in self.faults:
            kind = fault["kind"]
            if kind == "partition":
                self.network.shim.partition(set(fault["nodes"]),
                                            float(fault["start"]),
                                            float(fault["end"]))
            elif kind == "crash":
                self.network.schedule(
                    max(0.0, float(fault["at"]) - self.network.now),
                    lambda n=fault["node"]: self.network.crash(n))
            elif kind == "revive":
                self.network.schedule(
                    max(0.0, float(fault["at"]) - self.network.now),
                    lambda n=fault["node"]: self.network.revive(n))
            elif kind == "local_update":
                def apply_local(f=fault) -> None:
                    device = self.devices[f["node"]]
                    device.local_update(device.device_uuid, f["namespace"],
                                        f["key"], f["value"])
                self.network.schedule(
                    max(0.0, float(fault["at"]) - self.network.now), apply_local)
            elif kind == "drop":
                self.network.shim.add_rule(
                    "drop", float(fault.get("probability", 0.1)))
            else:
                raise ScenarioLoadError(f"unknown fault kind {kind!r}")

    def prepare(self) -> None:
        """Bring the world up (enrollment, wiring, submissions) without
        advancing to the end; callers may then pump time themselves."""
        self.spawn_devices()
        self.await_enrollment()
        self.wire_graph()
        self.apply_setup()
        self.wire_controller()
        self.schedule_faults()
        self.submit_protocol()

    def run(self) -> ScenarioResult:
        self.prepare()
        while self.network.now < self.scenario.duration_s:
            self.network.step(0.1)
        results = [self._evaluate(a) for a in self.scenario.assertions]
        return ScenarioResult(
            scenario=self.scenario, network=self.network, store=self.store,
            engine=self.engine, host=self.host, orchestrator=self.orchestrator,
            devices=self.devices, controller=self.controller,
            group_ids=self.group_ids, assertion_results=results,
            initial_volume_ul=self.initial_volume,
            plan_estimate=self.plan_estimate)

    # -- assertions ---------------------------------------------------------------

    def _evaluate(self, spec: dict[str, Any]) -> tuple[str, bool, str]:
        check = spec["check"]
        evaluator = getattr(self, f"_check_{check}", None)
        if evaluator is None:
            return check, False, f"unknown check {check!r}"
        try:
            ok, detail = evaluator(spec)
        except Exception as exc:  # an assertion must never crash the report
            return check, False, f"error: {exc}"
        return check, ok, detail

    def _check_volumes_equal(self, spec) -> tuple[bool, str]:
        mismatches = []
        for name, expected in spec["expect"].items():
            actual = self.store.get(self.resolve(name)).data.get("volume_ul")
            if actual != expected:
                mismatches.append(f"{name}={actual}!={expected}")
        return (not mismatches,
                "all volumes exact" if not mismatches else ", ".join(mismatches))

    def _check_conservation(self, spec) -> tuple[bool, str]:
        created = 0
        for event in self.engine.events:
            if event.outcome != "committed" or event.request.op != "Create":
                continue
            for op in event.delta:
                if op[0] == "insert":
                    v = op[1].get("data", {}).get("volume_ul", 0)
                    if isinstance(v, int):
                        created += v
        expected = self.initial_volume + created
        actual = total_volume_ul(self.store)
        return actual == expected, f"{actual} uL vs {expected} uL expected"

    def _check_replay_matches(self, spec) -> tuple[bool, str]:
        final = CrutdEngine.replay(self.engine.events, self.engine.genesis)
        live = self.store.snapshot().hash_hex
        return final.hash_hex == live, f"replay {final.hash_hex[:12]}.. vs live"

    def _check_groups_completed(self, spec) -> tuple[bool, str]:
        statuses = {gid: self.orchestrator.groups[gid].status(self.orchestrator.jobs)
                    for gid in self.group_ids}
        ok = all(s == "completed" for s in statuses.values())
        return ok, str(statuses)

    def _check_mode_commands(self, spec) -> tuple[bool, str]:
        got = [[m, v] for _, m, v in (self.controller.commands
                                      if self.controller else [])]
        return got == spec["expect"], f"commands {got}"

    def _check_switch_latency(self, spec) -> tuple[bool, str]:
        assert self.controller is not None
        sensor = self.devices[spec["tds_sensor"]]
        threshold = self.controller.threshold_ppm
        crossing = None
        for (t0, v0), (t1, v1) in zip(sensor.trace, sensor.trace[1:]):
            if v0 <= threshold < v1:
                crossing = t0 + (t1 - t0) * (threshold - v0) / (v1 - v0)
                break
        cv_times = [t for t, m, _ in self.controller.commands if m == "CV"]
        if crossing is None or not cv_times:
            return False, f"crossing={crossing} cv_times={cv_times}"
        latency = cv_times[0] - crossing
        # publisher and controller each tick at finite rates; the budget is
        # one control tick beyond one sensor sample
        budget = spec.get("max_s", 0.1)
        return latency <= budget + 0.101, f"latency {latency:.3f}s"

    def _check_current_settles(self, spec) -> tuple[bool, str]:
        """Measured current inside the CV window (after a settle second)."""
        target = float(spec["amps"])
        rtol = float(spec.get("rtol", 0.05))
        electrolyzer = self.devices[spec["electrolyzer"]]
        windows = []
        start = None
        for t, mode, _ in electrolyzer.mode_log:
            if mode == "CV" and start is None:
                start = t
            elif mode != "CV" and start is not None:
                windows.append((start, t))
                start = None
        if start is not None:
            windows.append((start, self.network.now))
        samples = [ma for t, ma in electrolyzer.current_log
                   if any(w0 + 1.0 <= t <= w1 for w0, w1 in windows)]
        if not samples:
            return False, "no CV-mode current samples"
        amps = sum(samples) / len(samples) / 1000.0
        ok = abs(amps - target) <= rtol * target
        return ok, f"I = {amps:.4f} A over {len(samples)} samples vs "                    f"{target} A ±{rtol * 100:.0f}%"

    def _check_host_topic_count(self, spec) -> tuple[bool, str]:
        count = self.network.delivered_count(spec["node"], channel="status",
                                             topic=spec["topic"])
        return count == spec["count"], f"{count} frames (want {spec['count']})"

    def _check_stream_rate(self, spec) -> tuple[bool, str]:
        topic = spec["topic"]
        node = spec["node"]
        window = spec.get("window")
        entries = [t for t in self.network.trace
                   if t.delivered and t.target == node and t.topic == topic]
        if window:
            entries = [t for t in entries if window[0] <= t.time <= window[1]]
            span = window[1] - window[0]
        else:
            span = self.scenario.duration_s
        hz = len(entries) / span if span > 0 else 0.0
        ok = spec["min_hz"] <= hz <= spec["max_hz"]
        return ok, f"{hz:.2f} Hz over {span:.0f}s"

    def _check_queue_paused_within(self, spec) -> tuple[bool, str]:
        node = spec["node"]
        pauses = [t for t, n, paused in self.orchestrator.pause_log
                  if n == node and paused]
        if not pauses:
            return False, "queue never paused"
        last_seen = spec["after"]
        delay = pauses[0] - last_seen
        return delay <= spec["max_s"], f"paused {delay:.2f}s after loss start"

    def _check_hashes_equal(self, spec) -> tuple[bool, str]:
        node = spec["node"]
        host_hash = self.host.subtree_hash(node)
        node_hash = self.devices[node].replica_hash()
        return host_hash == node_hash, \
            f"host {host_hash[:12]}.. node {node_hash[:12]}.."

    def _check_lineage_includes(self, spec) -> tuple[bool, str]:
        subject = self.resolve(spec["subject"])
        report = self.engine.lineage(subject)
        missing = [ref for ref in spec["includes"]
                   if self.resolve(ref) not in report.uuids]
        return not missing, ("complete" if not missing
                             else f"missing {missing}")

    def _check_steps_run(self, spec) -> tuple[bool, str]:
        device = self.devices[spec["node"]]
        ok = device.steps_run == spec["expect"]
        return ok, f"{device.steps_run}"

    def _check_job_states(self, spec) -> tuple[bool, str]:
        mismatches = []
        for job_id, state in spec["expect"].items():
            actual = self.orchestrator.jobs[job_id].state
            if actual != state:
                mismatches.append(f"{job_id}={actual}!={state}")
        return not mismatches, ", ".join(mismatches) or "as expected"

    def _check_no_goals_while_lost(self, spec) -> tuple[bool, str]:
        # reconstruct lost windows per node from the liveness log
        windows: dict[str, list[list[float]]] = {}
        for t, node, status in self.orchestrator.liveness_log:
            if status == "lost":
                windows.setdefault(node, []).append([t, float("inf")])
            elif status == "alive" and windows.get(node):
                windows[node][-1][1] = t
        offending = []
        for entry in self.network.trace:
            if entry.kind != "goal" or not entry.delivered:
                continue
            for start, end in windows.get(entry.target, []):
                if start <= entry.time < end:
                    offending.append((entry.time, entry.target))
        return not offending, f"{len(offending)} goals into lost nodes"


ScenarioRuntime = _Runtime


def run_scenario(scenario: Scenario | str | Path,
                 override_faults: list[dict[str, Any]] | None = None
                 ) -> ScenarioResult:
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    runtime = _Runtime(scenario, override_faults=override_faults)
    try:
        return runtime.run()
    finally:
        seed_uuids(None)


def prepare_runtime(scenario: Scenario | str | Path) -> _Runtime:
    """Scenario world ready for external pumping (gateway embedding)."""
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    runtime = _Runtime(scenario)
    runtime.prepare()
    seed_uuids(None)
    return runtime
