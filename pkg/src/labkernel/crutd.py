"""Transactional CRUTD engine with append-only provenance log.

Every state change runs as a two-phase transaction: ``begin`` plans and
validates the full delta (existence, capacity, path feasibility, kind
constraints) and acquires subtree locks; ``commit`` applies the delta
atomically after actuation confirmations, or ``rollback`` discards it. Each
outcome appends one event to a gap-free, hash-chained log that can be
replayed to reconstruct any store state bit-for-bit.

Transfer is first-class: quantity transfers split integer-microliter volumes
between vessels, whole-object transfers reparent a record, and both couple
the ownership update with actuation confirmation in a single event.
"""

from __future__ import annotations

import uuid as uuidlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from . import canonical
from .errors import (
    HashMismatch,
    LabError,
    LockConflict,
    NoFeasiblePath,
    PostconditionFailed,
    PreconditionFailed,
    SequenceGap,
    StaleTransaction,
    UnknownUuid,
    ValueGrammarError,
)
from .resources import (
    EntityKind,
    FUNCTIONAL_CATEGORIES,
    Pose,
    ResourceRecord,
    ResourceStore,
    TreeSnapshot,
    new_uuid,
)
from .topology import PhysicalGraph, TransferPath

CRUTD_OPS = ("Create", "Read", "Update", "Transfer", "Delete")

# Delta primitives are plain lists so events serialize canonically:
#   ["insert", record_dict]
#   ["set_field", uid, namespace, key, value]
#   ["reparent", uid, new_parent]
#   ["set_schedulable", uid, flag]
#   ["set_pose", uid, pose_dict_or_null]
DeltaOp = list


@dataclass
class CrutdRequest:
    op: str
    subject: str | None = None
    params: dict[str, Any] = field(default_factory=dict)
    actor: str = "system"
    requires_actuation: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "op": self.op,
            "subject": self.subject,
            "params": self.params,
            "actor": self.actor,
            "requires_actuation": self.requires_actuation,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CrutdRequest":
        return cls(op=d["op"], subject=d.get("subject"),
                   params=dict(d.get("params", {})), actor=d.get("actor", "system"),
                   requires_actuation=bool(d.get("requires_actuation", False)))


@dataclass
class CrutdEvent:
    seq: int
    request: CrutdRequest
    outcome: str  # "committed" | "rolled_back"
    pre_hash: str
    post_hash: str
    delta: list[DeltaOp]
    touched: list[str]
    error: dict[str, Any] | None = None
    sim_time: float = 0.0
    confirmations: list[dict[str, Any]] = field(default_factory=list)
    info: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "request": self.request.to_dict(),
            "outcome": self.outcome,
            "pre_hash": self.pre_hash,
            "post_hash": self.post_hash,
            "delta": self.delta,
            "touched": self.touched,
            "error": self.error,
            "sim_time": self.sim_time,
            "confirmations": self.confirmations,
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CrutdEvent":
        return cls(
            seq=d["seq"],
            request=CrutdRequest.from_dict(d["request"]),
            outcome=d["outcome"],
            pre_hash=d["pre_hash"],
            post_hash=d["post_hash"],
            delta=[list(op) for op in d.get("delta", [])],
            touched=list(d.get("touched", [])),
            error=d.get("error"),
            sim_time=d.get("sim_time", 0.0),
            confirmations=list(d.get("confirmations", [])),
            info=dict(d.get("info", {})),
        )

    def to_line(self) -> str:
        """Log-line form: the event dict plus a content digest, so any bit of
        the line is integrity-checked on load, not only the fields the tree
        hash chain happens to cover."""
        body = self.to_dict()
        body["event_digest"] = canonical.content_hash(self.to_dict())
        return canonical.canonical_text(body)


# --- locks --------------------------------------------------------------------


@dataclass(frozen=True)
class LockToken:
    holder: str
    held: tuple[tuple[str, str], ...]  # (uuid, "subtree" | "record")
    acquired_seq: int


class LockManager:
    """Subtree locks; two live tokens never overlap in coverage."""

    def __init__(self, store: ResourceStore) -> None:
        self.store = store
        self._tokens: dict[str, LockToken] = {}

    def _covers(self, entry: tuple[str, str], uid: str) -> bool:
        root, mode = entry
        if root == uid:
            return True
        return mode == "subtree" and root in self.store.ancestors(uid)

    def _overlap(self, a: tuple[str, str], b: tuple[str, str]) -> bool:
        return self._covers(a, b[0]) or self._covers(b, a[0])

    def acquire(self, holder: str, entries: list[tuple[str, str]],
                seq: int) -> LockToken:
        for token in self._tokens.values():
            for held in token.held:
                for want in entries:
                    if self._overlap(held, want):
                        raise LockConflict(
                            f"{want[0]} overlaps lock held by {token.holder}",
                            subject=want[0], blocking=token.holder)
        token = LockToken(holder=holder, held=tuple(entries), acquired_seq=seq)
        self._tokens[holder] = token
        return token

    def release(self, holder: str) -> None:
        self._tokens.pop(holder, None)

    def live_tokens(self) -> list[LockToken]:
        return list(self._tokens.values())

    def assert_disjoint(self) -> None:
        tokens = list(self._tokens.values())
        for i, a in enumerate(tokens):
            for b in tokens[i + 1:]:
                for ha in a.held:
                    for hb in b.held:
                        if self._overlap(ha, hb):
                            raise AssertionError(
                                f"overlapping live locks: {a.holder} and {b.holder}")


# --- transactions ---------------------------------------------------------------


@dataclass
class Transaction:
    txn_id: str
    request: CrutdRequest
    delta: list[DeltaOp]
    touched: list[str]
    lock: LockToken | None
    state: str = "live"  # live | committed | rolled_back
    created_uuids: list[str] = field(default_factory=list)
    planned_path: TransferPath | None = None
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def created_uuid(self) -> str | None:
        return self.created_uuids[0] if self.created_uuids else None


class CrutdEngine:
    """Serialized command stream over one store, with provenance logging."""

    def __init__(self, store: ResourceStore, graph: PhysicalGraph | None = None,
                 clock: Callable[[], float] | None = None,
                 log_sink: Callable[[CrutdEvent], None] | None = None) -> None:
        self.store = store
        self.graph = graph
        self.clock = clock or (lambda: 0.0)
        self.events: list[CrutdEvent] = []
        self.locks = LockManager(store)
        self.log_sink = log_sink
        self.listeners: list[Callable[[CrutdEvent], None]] = []
        self.fault_hook: Callable[[str], None] | None = None
        self._next_seq = 1
        # replay baseline: store contents at engine attach time
        self.genesis = store.snapshot()

    # -- helpers ---------------------------------------------------------------

    def _fault(self, phase: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(phase)

    def _live_hash(self) -> str:
        return self.store.snapshot().hash_hex

    def last_hash(self) -> str:
        if self.events:
            return self.events[-1].post_hash
        return self._live_hash()

    # -- planning --------------------------------------------------------------

    def begin(self, request: CrutdRequest) -> Transaction:
        """Plan/validate phase: check preconditions, compute the delta,
        acquire locks. Raises without logging when the plan is infeasible."""
        if request.op not in CRUTD_OPS:
            raise PreconditionFailed(f"unknown op {request.op!r}", phase="plan")
        self._fault("plan.enter")
        planner = getattr(self, f"_plan_{request.op.lower()}")
        delta, touched, lock_entries, info = planner(request)
        self._fault("plan.validated")
        txn_id = str(uuidlib.uuid4())
        lock = None
        if lock_entries:
            lock = self.locks.acquire(txn_id, lock_entries, self._next_seq)
            self.locks.assert_disjoint()
        try:
            self._fault("plan.locked")
        except BaseException:
            self.locks.release(txn_id)
            raise
        path = info.pop("_path", None)
        if path is not None:
            info["path_edges"] = list(path.edge_ids)
        txn = Transaction(txn_id=txn_id, request=request, delta=delta,
                          touched=touched, lock=lock,
                          created_uuids=info.pop("_created", []),
                          planned_path=path, info=info)
        return txn

    def _require(self, uid: str, what: str = "record") -> ResourceRecord:
        if uid not in self.store:
            raise PreconditionFailed(f"{what} {uid} does not exist",
                                     subject=uid, phase="plan", reason="missing")
        return self.store.get(uid)

    def _plan_create(self, request: CrutdRequest):
        params = request.params
        spec = params.get("spec", {})
        parent = params.get("parent")
        if parent is not None:
            self._require(parent, "parent")
        elif self.store.root_uuid is not None:
            raise PreconditionFailed("tree already has a root", phase="plan")

        delta: list[DeltaOp] = []
        created: list[str] = []

        def plan_one(one_spec: dict[str, Any], parent_uuid: str | None) -> str:
            kind_raw = one_spec.get("entity_kind", one_spec.get("kind", "Resource"))
            try:
                kind = EntityKind(kind_raw)
            except ValueError:
                raise PreconditionFailed(f"unknown entity kind {kind_raw!r}",
                                         phase="plan", reason="invalid_kind") from None
            category = one_spec.get("functional_category", one_spec.get("category"))
            if category is not None and category not in FUNCTIONAL_CATEGORIES:
                raise PreconditionFailed(f"unknown category {category!r}",
                                         phase="plan", reason="invalid_kind")
            if parent_uuid is not None:
                parent_rec = (self.store.get(parent_uuid)
                              if parent_uuid in self.store else None)
                if parent_rec is None:
                    planned = next((d[1] for d in delta
                                    if d[0] == "insert" and d[1]["uuid"] == parent_uuid), None)
                    if planned is None:
                        raise PreconditionFailed(f"parent {parent_uuid} does not exist",
                                                 phase="plan", reason="missing")
                    parent_kind = EntityKind(planned["kind"])
                else:
                    parent_kind = parent_rec.entity_kind
                if parent_kind is EntityKind.ACTION and kind.holds_material:
                    raise PreconditionFailed(
                        "Action node cannot contain material record",
                        phase="plan", reason="action_cannot_contain")
            uid = one_spec.get("uuid") or new_uuid()
            if uid in self.store or any(d[0] == "insert" and d[1]["uuid"] == uid
                                        for d in delta):
                raise PreconditionFailed(f"uuid {uid} already present",
                                         subject=uid, phase="plan", reason="duplicate_uuid")
            pose = one_spec.get("pose")
            rec = ResourceRecord(
                uuid=uid, parent_uuid=parent_uuid, name=one_spec.get("name", ""),
                entity_kind=kind, functional_category=category,
                pose=Pose.from_dict(pose) if isinstance(pose, dict) else pose,
                dims=tuple(one_spec["dims"]) if one_spec.get("dims") else None,
                config=dict(one_spec.get("config", {})),
                data=dict(one_spec.get("data", {})),
                extra=dict(one_spec.get("extra", {})),
                schedulable=bool(one_spec.get("schedulable", True)),
            )
            try:
                for ns in ("config", "data", "extra"):
                    canonical.validate_namespace(rec.namespace(ns), name=ns)
            except ValueGrammarError as exc:
                raise PreconditionFailed(str(exc), phase="plan",
                                         reason="value_grammar") from None
            delta.append(["insert", rec.to_dict()])
            created.append(uid)
            return uid

        main_uuid = plan_one(spec, parent)
        if parent is None:
            # root creation brings the trash node with it
            from .resources import TRASH_NAME
            plan_one({"name": TRASH_NAME, "schedulable": False}, main_uuid)
        for child in params.get("children", []):
            ref = child.get("parent_index", 0)
            plan_one(child["spec"], created[ref])

        touched = list(created)
        lock_entries = [(parent, "record")] if parent is not None else []
        return delta, touched, lock_entries, {"_created": created}

    def _plan_read(self, request: CrutdRequest):
        if request.subject is None:
            raise PreconditionFailed("Read requires a subject", phase="plan")
        rec = self._require(request.subject)
        params = request.params
        if any(k in params for k in ("patch", "quantity_ul", "spec")):
            raise PreconditionFailed("Read never carries a mutation payload",
                                     phase="plan")
        namespace = params.get("namespace")
        key = params.get("key")
        value = None
        if namespace and key is not None:
            value = rec.namespace(namespace).get(key)
            if "expect" in params and value != params["expect"]:
                raise PreconditionFailed(
                    f"guard failed: {namespace}.{key} is {value!r}, "
                    f"expected {params['expect']!r}",
                    subject=request.subject, phase="plan", reason="guard")
        return [], [request.subject], [], {"value": value}

    def _plan_update(self, request: CrutdRequest):
        if request.subject is None:
            raise PreconditionFailed("Update requires a subject", phase="plan")
        rec = self._require(request.subject)
        namespace = request.params.get("namespace")
        patch = request.params.get("patch", {})
        if namespace not in ("config", "data", "extra"):
            raise PreconditionFailed(f"unknown namespace {namespace!r}", phase="plan")
        delta: list[DeltaOp] = []
        for key, value in patch.items():
            try:
                canonical.validate_field_value(value, key=key)
            except ValueGrammarError as exc:
                raise PreconditionFailed(str(exc), phase="plan",
                                         reason="value_grammar") from None
            for other in ("config", "data", "extra"):
                if other != namespace and key in rec.namespace(other):
                    raise PreconditionFailed(
                        f"key {key!r} already lives in {other}",
                        subject=request.subject, phase="plan",
                        reason="namespace_collision")
            delta.append(["set_field", request.subject, namespace, key, value])
        return delta, [request.subject], [(request.subject, "record")], {}

    def _plan_transfer(self, request: CrutdRequest):
        params = request.params
        src = params.get("src_parent")
        dst = params.get("dst_parent")
        if not src or not dst:
            raise PreconditionFailed("Transfer names both src_parent and dst_parent",
                                     phase="plan")
        src_rec = self._require(src, "src_parent")
        dst_rec = self._require(dst, "dst_parent")
        whole = bool(params.get("whole_object", False))
        medium = params.get("medium", "robotic" if whole else "fluidic")
        delta: list[DeltaOp] = []
        touched: list[str]
        info: dict[str, Any] = {}

        if whole:
            subject = request.subject
            if subject is None:
                raise PreconditionFailed("whole-object Transfer requires a subject",
                                         phase="plan")
            sub_rec = self._require(subject)
            if sub_rec.parent_uuid != src:
                raise PreconditionFailed(
                    f"subject parent is {sub_rec.parent_uuid}, not {src}",
                    subject=subject, phase="plan", reason="stale_parent")
            if dst_rec.entity_kind is EntityKind.ACTION and sub_rec.entity_kind.holds_material:
                raise PreconditionFailed("destination Action cannot own material",
                                         subject=dst, phase="plan",
                                         reason="action_cannot_contain")
            if dst == subject or subject in self.store.ancestors(dst):
                raise PreconditionFailed("transfer would create a containment cycle",
                                         subject=subject, phase="plan", reason="cycle")
            delta.append(["reparent", subject, dst])
            pose = params.get("target_pose")
            if pose is not None:
                delta.append(["set_pose", subject, pose])
            touched = [subject, src, dst]
        else:
            quantity = params.get("quantity_ul")
            if not isinstance(quantity, int) or isinstance(quantity, bool) or quantity <= 0:
                raise PreconditionFailed("quantity_ul must be a positive integer",
                                         phase="plan", reason="bad_quantity")
            src_vol = src_rec.data.get("volume_ul", 0)
            if not isinstance(src_vol, int) or src_vol < quantity:
                raise PreconditionFailed(
                    f"source holds {src_vol} uL, cannot move {quantity} uL",
                    subject=src, phase="plan", reason="insufficient_volume")
            dst_vol = dst_rec.data.get("volume_ul", 0)
            capacity = dst_rec.config.get("capacity_ul")
            if isinstance(capacity, int) and dst_vol + quantity > capacity:
                raise PreconditionFailed(
                    f"destination capacity {capacity} uL exceeded "
                    f"({dst_vol} + {quantity})",
                    subject=dst, phase="plan", reason="capacity_exceeded")
            if not dst_rec.entity_kind.holds_material:
                raise PreconditionFailed("destination cannot hold material",
                                         subject=dst, phase="plan",
                                         reason="action_cannot_contain")
            delta.append(["set_field", src, "data", "volume_ul", src_vol - quantity])
            delta.append(["set_field", dst, "data", "volume_ul", dst_vol + quantity])
            touched = [src, dst]

        if self.graph is not None and params.get("check_path", True):
            paths = self.graph.find_paths(src, dst, medium=medium, limit=1)
            if not paths:
                raise NoFeasiblePath(
                    f"no {medium} path from {src_rec.name!r} to {dst_rec.name!r}",
                    subject=src, phase="plan", dst=dst)
            info["_path"] = paths[0]

        lock_entries = [(src, "subtree"), (dst, "subtree")]
        return delta, touched, lock_entries, info

    def _plan_delete(self, request: CrutdRequest):
        if request.subject is None:
            raise PreconditionFailed("Delete requires a subject", phase="plan")
        rec = self._require(request.subject)
        if request.subject == self.store.root_uuid:
            raise PreconditionFailed("cannot archive the root", phase="plan",
                                     subject=request.subject, reason="root")
        if request.subject == self.store.trash_uuid:
            raise PreconditionFailed("cannot archive the trash node", phase="plan",
                                     subject=request.subject, reason="trash")
        assert self.store.trash_uuid is not None
        delta: list[DeltaOp] = []
        old_parent = rec.parent_uuid
        if not self.store.in_trash(request.subject):
            delta.append(["reparent", request.subject, self.store.trash_uuid])
            for uid in self.store.query_subtree(request.subject):
                if self.store.get(uid).schedulable:
                    delta.append(["set_schedulable", uid, False])
        touched = [request.subject]
        return (delta, touched, [(request.subject, "subtree")],
                {"old_parent": old_parent})

    # -- execution ---------------------------------------------------------------

    def _apply(self, delta: list[DeltaOp],
               undo: list[Callable[[], None]] | None = None) -> list[Callable[[], None]]:
        """Apply delta ops one by one, appending to ``undo`` as each lands so
        a failure mid-way (the mid_apply fault point fires between ops) leaves
        the caller holding everything needed to reverse the partial write."""
        if undo is None:
            undo = []
        store = self.store
        for i, op in enumerate(delta):
            if i:
                self._fault("commit.mid_apply")
            kind = op[0]
            if kind == "insert":
                rec = ResourceRecord.from_dict(op[1])
                store.insert(rec)
                undo.append(lambda uid=rec.uuid: store.remove(uid))
            elif kind == "set_field":
                _, uid, ns, key, value = op
                target = store.get(uid).namespace(ns)
                had = key in target
                old = target.get(key)

                def undo_set(uid=uid, ns=ns, key=key, had=had, old=old) -> None:
                    space = store.get(uid).namespace(ns)
                    if had:
                        space[key] = old
                    else:
                        space.pop(key, None)
                store.set_field(uid, ns, key, value)
                undo.append(undo_set)
            elif kind == "reparent":
                _, uid, new_parent = op
                rec = store.get(uid)
                old_parent = rec.parent_uuid
                old_index = (store._children[old_parent].index(uid)
                             if old_parent is not None else 0)

                def undo_reparent(uid=uid, old_parent=old_parent,
                                  old_index=old_index) -> None:
                    rec = store.get(uid)
                    if rec.parent_uuid is not None:
                        store._children[rec.parent_uuid].remove(uid)
                    rec.parent_uuid = old_parent
                    if old_parent is not None:
                        store._children[old_parent].insert(old_index, uid)
                store.reparent(uid, new_parent)
                undo.append(undo_reparent)
            elif kind == "set_schedulable":
                _, uid, flag = op
                old_flag = store.get(uid).schedulable
                store.set_schedulable(uid, flag)
                undo.append(lambda uid=uid, old=old_flag: store.set_schedulable(uid, old))
            elif kind == "set_pose":
                _, uid, pose_dict = op
                old_pose = store.get(uid).pose
                store.set_pose(uid, Pose.from_dict(pose_dict) if pose_dict else None)
                undo.append(lambda uid=uid, old=old_pose: store.set_pose(uid, old))
            else:
                raise PostconditionFailed(f"unknown delta op {kind!r}", phase="confirm")
        return undo

    @staticmethod
    def _unwind(undo: list[Callable[[], None]]) -> None:
        for fn in reversed(undo):
            fn()

    def _append_event(self, event: CrutdEvent) -> None:
        self.events.append(event)
        self._next_seq = event.seq + 1
        if self.log_sink is not None:
            self.log_sink(event)
        for listener in self.listeners:
            listener(event)

    def commit(self, txn: Transaction,
               confirmations: Iterable[dict[str, Any]] = ()) -> CrutdEvent:
        """Execute/confirm phase. On any post-condition failure the planned
        delta is fully unwound and a rolled_back event is logged before the
        error propagates."""
        if txn.state != "live":
            raise StaleTransaction(f"transaction is {txn.state}", subject=txn.txn_id)
        confirmations = list(confirmations)
        pre_hash = self._live_hash()
        undo: list[Callable[[], None]] = []
        try:
            self._fault("confirm.enter")
            if txn.request.requires_actuation:
                if not confirmations:
                    raise PostconditionFailed("actuation requires confirmations",
                                              phase="confirm", reason="no_confirmation")
                bad = [c for c in confirmations if not c.get("ok", False)]
                if bad:
                    raise PostconditionFailed(
                        "negative device confirmation",
                        phase="confirm", reason="negative_confirmation",
                        devices=[c.get("device", "?") for c in bad])
            self._fault("commit.before_apply")
            self._apply(txn.delta, undo)
            self._fault("commit.after_apply")
            self._fault("commit.before_log")
        except BaseException as exc:
            self._unwind(undo)
            err = exc if isinstance(exc, LabError) else PostconditionFailed(
                str(exc) or type(exc).__name__, phase="confirm")
            self._log_rollback(txn, err)
            raise err from exc
        event = CrutdEvent(
            seq=self._next_seq, request=txn.request, outcome="committed",
            pre_hash=pre_hash, post_hash=self._live_hash(), delta=txn.delta,
            touched=txn.touched, sim_time=self.clock(),
            confirmations=confirmations, info=dict(txn.info))
        self._append_event(event)
        self.locks.release(txn.txn_id)
        txn.state = "committed"
        return event

    def _log_rollback(self, txn: Transaction, error: LabError) -> CrutdEvent:
        live = self._live_hash()
        event = CrutdEvent(
            seq=self._next_seq, request=txn.request, outcome="rolled_back",
            pre_hash=live, post_hash=live, delta=[], touched=txn.touched,
            error=error.to_dict(), sim_time=self.clock(), info=dict(txn.info))
        self._append_event(event)
        self.locks.release(txn.txn_id)
        txn.state = "rolled_back"
        return event

    def rollback(self, txn: Transaction, error: LabError | str) -> CrutdEvent:
        if txn.state != "live":
            raise StaleTransaction(f"transaction is {txn.state}", subject=txn.txn_id)
        if isinstance(error, str):
            error = LabError(error, phase="confirm")
        return self._log_rollback(txn, error)

    def execute(self, request: CrutdRequest,
                confirmations: Iterable[dict[str, Any]] = ()) -> CrutdEvent:
        """begin + commit in one step, for purely digital operations."""
        txn = self.begin(request)
        return self.commit(txn, confirmations)

    # -- replay and lineage --------------------------------------------------------

    @staticmethod
    def replay(events: list[CrutdEvent], initial: TreeSnapshot,
               initial_seq: int = 0) -> TreeSnapshot:
        """Reapply recorded deltas onto the initial snapshot, verifying the
        hash chain at every step. A log whose first event is beyond
        initial_seq+1 is a SequenceGap (missing prefix); any in-stream
        corruption surfaces as HashMismatch{at seq}."""
        import json

        store = ResourceStore.from_tree_dict(json.loads(initial.text))
        live = store.snapshot().hash_hex
        if live != initial.hash_hex:
            raise HashMismatch("initial snapshot does not match its hash",
                               at=initial_seq)
        if events and events[0].seq > initial_seq + 1:
            raise SequenceGap(
                f"log starts at seq {events[0].seq}, expected {initial_seq + 1}",
                at=events[0].seq)
        expected_seq = initial_seq + 1
        for event in events:
            if event.seq != expected_seq:
                raise HashMismatch(
                    f"sequence discontinuity: got {event.seq}, expected {expected_seq}",
                    at=event.seq)
            expected_seq = event.seq + 1
            live = store.snapshot().hash_hex
            if event.pre_hash != live:
                raise HashMismatch(f"pre_hash mismatch at seq {event.seq}",
                                   at=event.seq)
            if event.outcome == "committed":
                engine = CrutdEngine(store)
                try:
                    engine._apply(event.delta)
                except LabError as exc:
                    raise HashMismatch(
                        f"delta not applicable at seq {event.seq}: {exc.message}",
                        at=event.seq) from exc
                live = store.snapshot().hash_hex
                if live != event.post_hash:
                    raise HashMismatch(f"post_hash mismatch at seq {event.seq}",
                                       at=event.seq)
            elif event.outcome == "rolled_back":
                if event.post_hash != event.pre_hash:
                    raise HashMismatch(
                        f"rolled_back event {event.seq} claims a state change",
                        at=event.seq)
            else:
                raise HashMismatch(f"unknown outcome {event.outcome!r} at {event.seq}",
                                   at=event.seq)
        return store.snapshot()

    def lineage(self, subject: str) -> "LineageReport":
        """Provenance closure: every record whose material flowed into the
        subject, plus the Create/Transfer events that carried it."""
        known = subject in self.store or any(
            subject in e.touched for e in self.events)
        if not known:
            raise UnknownUuid(f"no record {subject}", subject=subject)

        uuids = {subject}
        changed = True
        while changed:
            changed = False
            for e in self.events:
                if e.outcome != "committed" or e.request.op != "Transfer":
                    continue
                params = e.request.params
                dst = params.get("dst_parent")
                if dst not in uuids:
                    continue
                sources = {params.get("src_parent")}
                if params.get("whole_object"):
                    sources.add(e.request.subject)
                for uid in sources:
                    if uid and uid not in uuids:
                        uuids.add(uid)
                        changed = True

        events_out: list[CrutdEvent] = []
        for e in self.events:
            if e.outcome != "committed":
                continue
            if e.request.op == "Create" and any(u in uuids for u in e.touched):
                events_out.append(e)
            elif e.request.op == "Transfer":
                params = e.request.params
                if (params.get("dst_parent") in uuids
                        or params.get("src_parent") in uuids
                        or e.request.subject in uuids):
                    events_out.append(e)
        return LineageReport(subject=subject, uuids=sorted(uuids),
                             events=events_out)


@dataclass
class LineageReport:
    subject: str
    uuids: list[str]
    events: list[CrutdEvent]

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "uuids": self.uuids,
            "events": [e.to_dict() for e in self.events],
        }


# --- event log files -------------------------------------------------------------


def write_event_log(path, events: Iterable[CrutdEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_line() + "\n")


def load_event_log(path) -> list[CrutdEvent]:
    """Parse a .crutd.log file, verifying each line's content digest and its
    canonical surface form. Every corruption surfaces as HashMismatch so
    tamper detection is uniform for callers."""
    import json

    events: list[CrutdEvent] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError as exc:
                raise HashMismatch(f"undecodable bytes at line {lineno}",
                                   at=lineno) from exc
            if not line:
                continue
            try:
                body = json.loads(line)
                digest = body.pop("event_digest", None)
                event = CrutdEvent.from_dict(body)
            except (ValueError, KeyError, TypeError) as exc:
                raise HashMismatch(f"unreadable event at line {lineno}",
                                   at=lineno) from exc
            if canonical.content_hash(event.to_dict()) != digest:
                raise HashMismatch(f"event digest mismatch at line {lineno}",
                                   at=lineno)
            if event.to_line() != line:
                raise HashMismatch(f"non-canonical event line {lineno}",
                                   at=lineno)
            events.append(event)
    return events


class EventLogWriter:
    """Append-only ndjson sink for engine events."""

    def __init__(self, path) -> None:
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, event: CrutdEvent) -> None:
        self._fh.write(event.to_line() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
