"""Host endpoint and device agents: enrollment, heartbeats, tree mirroring.

A device announces itself with periodic beacons carrying its manifest
texts. The host validates the protocol version, rejects duplicate node
ids, registers every manifest into the tree through one atomic Create
each, and replies with the assigned device uuids. Admitted devices
heartbeat once a second; after three consecutive misses the host declares
them lost on the reserved liveness topic, and the next heartbeat brings
them back (triggering a resync upstream).

Station-class devices keep a local replica of their subtree, fed by
host-pushed deltas while connected and reconciled field-by-field after a
partition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from . import canonical
from .bus.envelope import Envelope
from .bus.network import SimNetwork
from .bus.node import (
    BusNode,
    LIVENESS_TOPIC,
    LOG_TOPIC,
    PROTOCOL_VERSION,
)
from .crutd import CrutdEngine, CrutdEvent, CrutdRequest
from .errors import LabError, UnknownUuid
from .manifest import DriverDescriptor, parse_manifest, register_driver

BEACON_PERIOD = 1.0
HEARTBEAT_PERIOD = 1.0
HEARTBEAT_MISSES = 3


@dataclass
class DeviceEntry:
    node_id: str
    info: dict[str, Any]
    device_uuids: list[str]
    descriptors: list[DriverDescriptor]
    last_seen: float
    liveness: str = "alive"  # alive | lost
    refusals: int = 0


class HostNode:
    """Host side of the bus: admission, registration, liveness, materials."""

    def __init__(self, network: SimNetwork, engine: CrutdEngine,
                 node_id: str = "host", enroll_parent: str | None = None,
                 heartbeat_period: float = HEARTBEAT_PERIOD,
                 heartbeat_misses: int = HEARTBEAT_MISSES) -> None:
        self.network = network
        self.engine = engine
        self.store = engine.store
        self.bus = BusNode(network, node_id, role="host")
        self.node_id = node_id
        self.enroll_parent = enroll_parent or self.store.root_uuid
        self.heartbeat_period = heartbeat_period
        self.heartbeat_misses = heartbeat_misses
        self.registry: dict[str, DeviceEntry] = {}
        self.capabilities: dict[str, dict[str, Any]] = {}  # node -> cap -> decl
        self.device_node_of: dict[str, str] = {}  # device uuid -> bus node id
        self.on_liveness_change: Callable[[str, str], None] | None = None
        self.on_admitted: Callable[[DeviceEntry], None] | None = None

        self.loss_log: list[tuple[float, str, float]] = []  # (t, node, since_last)
        self.bus.on_beacon = self._on_beacon
        self.bus.on_heartbeat = self._on_heartbeat
        self.bus.serve("material.sync", self._material_sync)
        # sweep at a tenth of the period: loss is declared promptly once
        # k beats have gone missing
        network.every(heartbeat_period / 10.0, self._sweep_liveness,
                      owner=node_id)
        engine.listeners.append(self._on_event)

    # -- admission -----------------------------------------------------------------

    def _on_beacon(self, env: Envelope) -> None:
        payload = env.payload
        node_id = payload.get("node_id", env.source)

        def refuse(reason: str, code: str) -> None:
            self._reply(env, {"admitted": False, "reason": reason, "code": code})

        if payload.get("protocol_version") != PROTOCOL_VERSION:
            refuse(f"protocol version {payload.get('protocol_version')!r} "
                   f"!= {PROTOCOL_VERSION!r}", "version_mismatch")
            return
        existing = self.registry.get(node_id)
        if existing is not None:
            if existing.info.get("capabilities_digest") == \
                    payload.get("capabilities_digest"):
                # same device re-announcing (e.g. after reconnect): idempotent
                self._reply(env, {"admitted": True,
                                  "parent": self.enroll_parent,
                                  "device_uuids": existing.device_uuids})
            else:
                existing.refusals += 1
                refuse(f"node id {node_id!r} already admitted", "rejected_by_policy")
            return

        manifests = payload.get("manifests", [])
        try:
            descriptors = [parse_manifest(text) for text in manifests]
        except LabError as exc:
            refuse(f"manifest rejected: {exc.message}", exc.code)
            return

        parent = self.enroll_parent
        hint = payload.get("enroll_under")
        if hint:
            matches = self.store.find_by_name(hint)
            if len(matches) == 1:
                parent = matches[0]

        device_uuids: list[str] = []
        try:
            for descriptor in descriptors:
                uid = register_driver(
                    self.engine, descriptor, parent,
                    advertise=lambda u, d, n=node_id: self._advertise(n, u, d),
                    name=payload.get("register_as"),
                    config_overlay=payload.get("device_config"))
                device_uuids.append(uid)
        except LabError as exc:
            refuse(f"registration failed: {exc.message}", exc.code)
            return

        entry = DeviceEntry(node_id=node_id, info=dict(payload),
                            device_uuids=device_uuids, descriptors=descriptors,
                            last_seen=self.network.now)
        self.registry[node_id] = entry
        for uid in device_uuids:
            self.device_node_of[uid] = node_id
        self._reply(env, {"admitted": True, "parent": parent,
                          "device_uuids": device_uuids})
        self._push_subtrees(entry)
        if self.on_admitted is not None:
            self.on_admitted(entry)

    def _advertise(self, node_id: str, device_uuid: str,
                   descriptor: DriverDescriptor) -> None:
        caps = self.capabilities.setdefault(node_id, {})
        for cap in descriptor.capabilities:
            caps[cap.name] = cap.to_dict()
        self.bus.publish("__registry__", {"node": node_id,
                                          "device_uuid": device_uuid,
                                          "driver": descriptor.name})

    def _reply(self, env: Envelope, payload: dict[str, Any]) -> None:
        self.bus._send(Envelope(
            channel="networking", kind="response",
            msg_id=self.bus._next_msg_id(), source=self.node_id,
            target=env.source, correlates=env.msg_id, payload=payload))

    def advertised_capabilities(self, node_id: str) -> list[str]:
        return sorted(self.capabilities.get(node_id, {}))

    # -- liveness ---------------------------------------------------------------------

    def _on_heartbeat(self, env: Envelope) -> None:
        entry = self.registry.get(env.source)
        if entry is None:
            return
        entry.last_seen = self.network.now
        if entry.liveness == "lost":
            entry.liveness = "alive"
            self._announce_liveness(entry.node_id, "alive")

    def _sweep_liveness(self) -> None:
        threshold = self.heartbeat_misses * self.heartbeat_period
        for entry in self.registry.values():
            since = self.network.now - entry.last_seen
            if entry.liveness == "alive" and since >= threshold:
                entry.liveness = "lost"
                self.loss_log.append((self.network.now, entry.node_id, since))
                self._announce_liveness(entry.node_id, "lost")

    def _announce_liveness(self, node_id: str, status: str) -> None:
        self.bus.publish(LIVENESS_TOPIC, {"node": node_id, "status": status,
                                          "time": self.network.now})
        if self.on_liveness_change is not None:
            self.on_liveness_change(node_id, status)

    def liveness(self, node_id: str) -> str:
        entry = self.registry.get(node_id)
        return entry.liveness if entry else "unknown"

    # -- material channel ---------------------------------------------------------------

    def _material_sync(self, args: dict[str, Any], source: str) -> dict[str, Any]:
        request = CrutdRequest.from_dict(args["request"])
        event = self.engine.execute(request, args.get("confirmations", ()))
        return {"seq": event.seq, "outcome": event.outcome}

    # -- subtree mirroring ----------------------------------------------------------------

    def _on_event(self, event: CrutdEvent) -> None:
        self.bus.publish(LOG_TOPIC, {"event": event.to_dict()})
        if event.outcome != "committed":
            return
        for entry in self.registry.values():
            if entry.liveness != "alive":
                continue
            ops = self._ops_for_entry(entry, event)
            if ops:
                self.bus.call_service(entry.node_id, "tree.apply",
                                      {"delta": ops}, timeout=2.0)

    def _subtree_uuids(self, entry: DeviceEntry) -> set[str]:
        out: set[str] = set()
        for uid in entry.device_uuids:
            if uid in self.store:
                out.update(self.store.query_subtree(uid))
        return out

    def _ops_for_entry(self, entry: DeviceEntry,
                       event: CrutdEvent) -> list[list[Any]]:
        member = self._subtree_uuids(entry)
        ops = []
        for op in event.delta:
            uid = op[1]["uuid"] if op[0] == "insert" else op[1]
            if uid in member:
                ops.append(op)
        return ops

    def _push_subtrees(self, entry: DeviceEntry) -> None:
        records: dict[str, Any] = {}
        for uid in sorted(self._subtree_uuids(entry)):
            records[uid] = self.store.get(uid).to_dict()
        self.bus.call_service(entry.node_id, "tree.load",
                              {"records": records}, timeout=2.0)

    def subtree_hash(self, node_id: str) -> str:
        entry = self.registry[node_id]
        records = {uid: self.store.get(uid).to_dict()
                   for uid in sorted(self._subtree_uuids(entry))}
        return canonical.content_hash({"records": records})


class DeviceAgent:
    """Device side: beacons until admitted, heartbeats after, and an
    optional local replica of its own subtree for offline autonomy."""

    def __init__(self, network: SimNetwork, node_id: str,
                 manifest_texts: list[str], role: str = "device",
                 beacon_period: float = BEACON_PERIOD,
                 heartbeat_period: float = HEARTBEAT_PERIOD,
                 protocol_version: str = PROTOCOL_VERSION,
                 claim_node_id: str | None = None,
                 enroll_under: str | None = None,
                 register_as: str | None = None,
                 device_config: dict[str, Any] | None = None) -> None:
        self.network = network
        self.bus = BusNode(network, node_id, role=role,
                           protocol_version=protocol_version)
        if claim_node_id:  # announce under a different identity (policy tests)
            self.bus.info.node_id = claim_node_id
        self.node_id = node_id
        self.enroll_under = enroll_under
        self.register_as = register_as
        self.device_config = dict(device_config or {})
        self.manifest_texts = list(manifest_texts)
        self.descriptors = [parse_manifest(t) for t in manifest_texts]
        digest = canonical.content_hash([d.to_dict() for d in self.descriptors])
        self.bus.info.capabilities_digest = digest
        self.bus.info.protocol_version = protocol_version
        self.admitted = False
        self.device_uuids: list[str] = []
        self.parent_uuid: str | None = None
        self.refused: dict[str, Any] | None = None
        self.on_admitted: Callable[["DeviceAgent"], None] | None = None
        self.local_records: dict[str, dict[str, Any]] = {}

        self.bus.on_response = self._on_response
        self.bus.serve("tree.load", self._tree_load)
        self.bus.serve("tree.apply", self._tree_apply)
        self.bus.serve("tree.snapshot", self._tree_snapshot)
        self._beacon_timer = network.every(beacon_period, self._beacon,
                                           owner=node_id)
        self._hb_timer = network.every(heartbeat_period, self._heartbeat,
                                       owner=node_id)
        self._beacon()  # announce immediately on power-up

    # -- enrollment -----------------------------------------------------------------

    def _beacon(self) -> None:
        if not self.admitted:
            payload: dict[str, Any] = {"manifests": self.manifest_texts}
            if self.enroll_under:
                payload["enroll_under"] = self.enroll_under
            if self.register_as:
                payload["register_as"] = self.register_as
            if self.device_config:
                payload["device_config"] = self.device_config
            self.bus.send_beacon(payload)

    def _heartbeat(self) -> None:
        if self.admitted:
            self.bus.send_heartbeat()

    def _on_response(self, env: Envelope) -> None:
        payload = env.payload
        if "admitted" not in payload:
            return
        if payload["admitted"]:
            if not self.admitted:
                self.admitted = True
                self.device_uuids = list(payload.get("device_uuids", []))
                self.parent_uuid = payload.get("parent")
                self.bus.send_heartbeat()
                if self.on_admitted is not None:
                    self.on_admitted(self)
        else:
            self.refused = dict(payload)

    @property
    def device_uuid(self) -> str | None:
        return self.device_uuids[0] if self.device_uuids else None

    # -- replica ---------------------------------------------------------------------

    def _tree_load(self, args: dict[str, Any], source: str) -> dict[str, Any]:
        self.local_records = {uid: dict(rec)
                              for uid, rec in args.get("records", {}).items()}
        return {"hash": self.replica_hash()}

    def _tree_apply(self, args: dict[str, Any], source: str) -> dict[str, Any]:
        for op in args.get("delta", []):
            kind = op[0]
            if kind == "insert":
                rec = op[1]
                self.local_records[rec["uuid"]] = dict(rec)
            elif kind == "set_field":
                _, uid, ns, key, value = op
                if uid in self.local_records:
                    self.local_records[uid][ns][key] = value
            elif kind == "reparent":
                _, uid, parent = op
                if uid in self.local_records:
                    self.local_records[uid]["parent"] = parent
            elif kind == "set_schedulable":
                _, uid, flag = op
                if uid in self.local_records:
                    self.local_records[uid]["schedulable"] = flag
            elif kind == "set_pose":
                _, uid, pose = op
                if uid in self.local_records:
                    self.local_records[uid]["pose"] = pose
        return {"hash": self.replica_hash()}

    def _tree_snapshot(self, args: dict[str, Any], source: str) -> dict[str, Any]:
        return {"records": {uid: dict(rec)
                            for uid, rec in sorted(self.local_records.items())},
                "hash": self.replica_hash()}

    def replica_hash(self) -> str:
        records = {uid: self.local_records[uid] for uid in sorted(self.local_records)}
        return canonical.content_hash({"records": records})

    def local_update(self, uid: str, namespace: str, key: str, value: Any) -> None:
        """Offline-autonomy write: mutates only the local replica; the host
        adopts it at the next resync."""
        if uid not in self.local_records:
            raise UnknownUuid(f"replica has no record {uid}", subject=uid)
        self.local_records[uid][namespace][key] = value

    def local_create(self, spec: dict[str, Any], parent: str) -> str:
        """Offline creation; surfaces as a structural conflict at resync."""
        from .resources import new_uuid
        uid = spec.get("uuid") or new_uuid()
        rec = {"uuid": uid, "parent": parent, "name": spec.get("name", ""),
               "kind": spec.get("kind", "Resource"), "category": None,
               "pose": None, "dims": None,
               "config": dict(spec.get("config", {})),
               "data": dict(spec.get("data", {})),
               "extra": dict(spec.get("extra", {})), "schedulable": True}
        self.local_records[uid] = rec
        return uid
