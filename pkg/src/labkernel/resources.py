"""Canonical in-memory store of laboratory entities.

One rooted tree holds every entity. Each record carries three disjoint field
namespaces (``config`` static spec, ``data`` runtime state, ``extra``
provenance notes), an optional 6-DOF pose, and a schedulable flag. Deleting
is archival: records move under a reserved ``__trash__`` node and become
non-schedulable, never disappearing. Snapshots are bit-stable canonical
serializations hashed with SHA-256.
"""

from __future__ import annotations

import copy
import uuid as uuidlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from . import canonical
from .errors import (
    ActionCannotContain,
    CannotArchiveRoot,
    DuplicateUuid,
    InvalidKind,
    NamespaceCollision,
    UnknownParent,
    UnknownUuid,
    ValueGrammarError,
)

TRASH_NAME = "__trash__"

FUNCTIONAL_CATEGORIES = frozenset({
    "sensor", "connector", "material_processing",
    "characterization", "logistics", "virtual",
})

NAMESPACES = ("config", "data", "extra")


class EntityKind(str, Enum):
    RESOURCE = "Resource"
    ACTION = "Action"
    ACTION_RESOURCE = "ActionResource"

    @property
    def holds_material(self) -> bool:
        return self is not EntityKind.ACTION


@dataclass
class Pose:
    """6-DOF pose in a shared frame; ignored by geometry checks until known."""

    frame: str = "lab"
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    known: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame": self.frame,
            "position": list(self.position),
            "orientation": list(self.orientation),
            "known": self.known,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Pose":
        return cls(
            frame=d.get("frame", "lab"),
            position=tuple(d.get("position", (0.0, 0.0, 0.0))),
            orientation=tuple(d.get("orientation", (0.0, 0.0, 0.0))),
            known=bool(d.get("known", False)),
        )


@dataclass
class ResourceRecord:
    uuid: str
    parent_uuid: str | None
    name: str
    entity_kind: EntityKind = EntityKind.RESOURCE
    functional_category: str | None = None
    pose: Pose | None = None
    dims: tuple[float, float, float] | None = None
    config: dict[str, Any] = field(default_factory=dict)
    data: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    schedulable: bool = True

    def namespace(self, name: str) -> dict[str, Any]:
        if name not in NAMESPACES:
            raise ValueGrammarError(f"unknown namespace {name!r}", namespace=name)
        return getattr(self, name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "uuid": self.uuid,
            "parent": self.parent_uuid,
            "name": self.name,
            "kind": self.entity_kind.value,
            "category": self.functional_category,
            "pose": self.pose.to_dict() if self.pose else None,
            "dims": list(self.dims) if self.dims else None,
            "config": dict(self.config),
            "data": dict(self.data),
            "extra": dict(self.extra),
            "schedulable": self.schedulable,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ResourceRecord":
        return cls(
            uuid=d["uuid"],
            parent_uuid=d.get("parent"),
            name=d.get("name", ""),
            entity_kind=EntityKind(d.get("kind", "Resource")),
            functional_category=d.get("category"),
            pose=Pose.from_dict(d["pose"]) if d.get("pose") else None,
            dims=tuple(d["dims"]) if d.get("dims") else None,
            config=dict(d.get("config", {})),
            data=dict(d.get("data", {})),
            extra=dict(d.get("extra", {})),
            schedulable=bool(d.get("schedulable", True)),
        )


@dataclass(frozen=True)
class TreeSnapshot:
    """Canonical serialized tree plus its SHA-256 content hash."""

    text: str
    hash_hex: str

    @classmethod
    def of(cls, tree_dict: dict[str, Any]) -> "TreeSnapshot":
        text = canonical.canonical_text(tree_dict)
        return cls(text=text, hash_hex=canonical.hash_bytes(text.encode("utf-8")))


_uuid_rng: "random.Random | None" = None


def seed_uuids(seed: int | None) -> None:
    """Make uuid generation reproducible (scenario determinism). Pass None
    to restore entropy-backed uuids."""
    global _uuid_rng
    import random
    _uuid_rng = random.Random(seed) if seed is not None else None


def new_uuid() -> str:
    if _uuid_rng is not None:
        return str(uuidlib.UUID(int=_uuid_rng.getrandbits(128), version=4))
    return str(uuidlib.uuid4())


def _check_disjoint(config: dict, data: dict, extra: dict) -> None:
    pairs = (("config", config, "data", data), ("config", config, "extra", extra),
             ("data", data, "extra", extra))
    for name_a, a, name_b, b in pairs:
        shared = set(a) & set(b)
        if shared:
            raise NamespaceCollision(
                f"keys {sorted(shared)} present in both {name_a} and {name_b}",
                keys=sorted(shared))


class ResourceStore:
    """Rooted tree of ResourceRecords with deterministic traversal order.

    The first record created with no parent becomes the root, and a
    ``__trash__`` child is created alongside it. All reads are cheap;
    mutations must be serialized by the caller (the CRUTD engine funnels
    everything through one command stream).
    """

    def __init__(self) -> None:
        self._records: dict[str, ResourceRecord] = {}
        self._children: dict[str, list[str]] = {}
        self.root_uuid: str | None = None
        self.trash_uuid: str | None = None

    # -- basic access --------------------------------------------------------

    def __contains__(self, uid: str) -> bool:
        return uid in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, uid: str) -> ResourceRecord:
        try:
            return self._records[uid]
        except KeyError:
            raise UnknownUuid(f"no record {uid}", subject=uid) from None

    def children(self, uid: str) -> list[str]:
        self.get(uid)
        return list(self._children.get(uid, ()))

    def ancestors(self, uid: str) -> list[str]:
        """Ancestor uuids from immediate parent up to the root."""
        rec = self.get(uid)
        out: list[str] = []
        while rec.parent_uuid is not None:
            out.append(rec.parent_uuid)
            rec = self.get(rec.parent_uuid)
        return out

    def find_by_name(self, name: str, *, under: str | None = None) -> list[str]:
        start = under if under is not None else self.root_uuid
        if start is None:
            return []
        return self.query_subtree(start, predicate=lambda r: r.name == name)

    def in_trash(self, uid: str) -> bool:
        if self.trash_uuid is None:
            return False
        return uid == self.trash_uuid or self.trash_uuid in self.ancestors(uid)

    # -- mutation primitives (no event logging; engine wraps these) ----------

    def insert(self, rec: ResourceRecord) -> None:
        if rec.uuid in self._records:
            raise DuplicateUuid(f"uuid {rec.uuid} already present", subject=rec.uuid)
        if rec.parent_uuid is None:
            if self.root_uuid is not None:
                raise UnknownParent("tree already has a root; parent required",
                                    subject=rec.uuid)
        else:
            parent = self.get(rec.parent_uuid)
            if parent.entity_kind is EntityKind.ACTION and rec.entity_kind.holds_material:
                raise ActionCannotContain(
                    f"Action node {parent.name!r} cannot contain material record",
                    subject=rec.parent_uuid, child=rec.uuid)
        _check_disjoint(rec.config, rec.data, rec.extra)
        for ns in NAMESPACES:
            canonical.validate_namespace(rec.namespace(ns), name=ns)
        self._records[rec.uuid] = rec
        self._children.setdefault(rec.uuid, [])
        if rec.parent_uuid is None:
            self.root_uuid = rec.uuid
        else:
            self._children.setdefault(rec.parent_uuid, []).append(rec.uuid)
        if rec.name == TRASH_NAME and self.trash_uuid is None:
            self.trash_uuid = rec.uuid

    def remove(self, uid: str) -> ResourceRecord:
        """Physically drop a record (undo support only; Delete archives)."""
        rec = self.get(uid)
        if self._children.get(uid):
            raise UnknownParent("cannot remove a record with children", subject=uid)
        del self._records[uid]
        self._children.pop(uid, None)
        if rec.parent_uuid is not None:
            self._children[rec.parent_uuid].remove(uid)
        if self.root_uuid == uid:
            self.root_uuid = None
        if self.trash_uuid == uid:
            self.trash_uuid = None
        return rec

    def set_field(self, uid: str, namespace: str, key: str, value: Any) -> None:
        rec = self.get(uid)
        canonical.validate_field_value(value, key=key)
        for other in NAMESPACES:
            if other != namespace and key in rec.namespace(other):
                raise NamespaceCollision(
                    f"key {key!r} already lives in {other}", subject=uid, key=key)
        rec.namespace(namespace)[key] = value

    def reparent(self, uid: str, new_parent: str) -> None:
        rec = self.get(uid)
        parent = self.get(new_parent)
        if uid == self.root_uuid:
            raise CannotArchiveRoot("root cannot be reparented", subject=uid)
        if new_parent == uid or uid in self.ancestors(new_parent):
            raise UnknownParent("reparent would create a cycle", subject=uid)
        if parent.entity_kind is EntityKind.ACTION and rec.entity_kind.holds_material:
            raise ActionCannotContain(
                f"Action node {parent.name!r} cannot contain material record",
                subject=new_parent, child=uid)
        if rec.parent_uuid is not None:
            self._children[rec.parent_uuid].remove(uid)
        rec.parent_uuid = new_parent
        self._children.setdefault(new_parent, []).append(uid)

    def set_schedulable(self, uid: str, flag: bool) -> None:
        self.get(uid).schedulable = flag

    def set_pose(self, uid: str, pose: Pose | None) -> None:
        self.get(uid).pose = pose

    # -- spec operations ------------------------------------------------------

    def create_record(self, spec: dict[str, Any], parent: str | None = None) -> str:
        """Insert a record from a partial spec; returns the fresh uuid.

        The first no-parent record becomes the root and the trash node is
        created beside it.
        """
        kind_raw = spec.get("entity_kind", spec.get("kind", "Resource"))
        try:
            kind = kind_raw if isinstance(kind_raw, EntityKind) else EntityKind(kind_raw)
        except ValueError:
            raise InvalidKind(f"unknown entity kind {kind_raw!r}") from None
        category = spec.get("functional_category", spec.get("category"))
        if category is not None and category not in FUNCTIONAL_CATEGORIES:
            raise InvalidKind(f"unknown functional category {category!r}")
        if parent is not None and parent not in self._records:
            raise UnknownParent(f"parent {parent} does not exist", subject=parent)

        uid = spec.get("uuid") or new_uuid()
        pose = spec.get("pose")
        if isinstance(pose, dict):
            pose = Pose.from_dict(pose)
        dims = spec.get("dims")
        rec = ResourceRecord(
            uuid=uid,
            parent_uuid=parent,
            name=spec.get("name", ""),
            entity_kind=kind,
            functional_category=category,
            pose=pose,  # defaults to None: position unknown until confirmed
            dims=tuple(dims) if dims else None,
            config=dict(spec.get("config", {})),
            data=dict(spec.get("data", {})),
            extra=dict(spec.get("extra", {})),
            schedulable=bool(spec.get("schedulable", True)),
        )
        self.insert(rec)
        if parent is None and self.trash_uuid is None:
            trash = ResourceRecord(uuid=new_uuid(), parent_uuid=uid, name=TRASH_NAME,
                                   schedulable=False)
            self.insert(trash)
            self.trash_uuid = trash.uuid
        return uid

    def query_subtree(self, root: str,
                      kind: EntityKind | str | None = None,
                      category: str | None = None,
                      name: str | None = None,
                      predicate: Callable[[ResourceRecord], bool] | None = None,
                      schedulable_only: bool = False) -> list[str]:
        """All matching descendants (root included) in deterministic pre-order."""
        self.get(root)
        if isinstance(kind, str):
            kind = EntityKind(kind)
        out: list[str] = []
        stack = [root]
        while stack:
            uid = stack.pop()
            rec = self._records[uid]
            ok = True
            if kind is not None and rec.entity_kind is not kind:
                ok = False
            if category is not None and rec.functional_category != category:
                ok = False
            if name is not None and rec.name != name:
                ok = False
            if schedulable_only and not rec.schedulable:
                ok = False
            if predicate is not None and not predicate(rec):
                ok = False
            if ok:
                out.append(uid)
            stack.extend(reversed(self._children.get(uid, ())))
        return out

    def update_fields(self, target: str, namespace: str,
                      patch: dict[str, Any]) -> str:
        """Apply a patch to one namespace; returns the new snapshot hash."""
        rec = self.get(target)
        if namespace not in NAMESPACES:
            raise ValueGrammarError(f"unknown namespace {namespace!r}", namespace=namespace)
        for key, value in patch.items():
            canonical.validate_field_value(value, key=key)
            for other in NAMESPACES:
                if other != namespace and key in rec.namespace(other):
                    raise NamespaceCollision(
                        f"key {key!r} already lives in {other}", subject=target, key=key)
        rec.namespace(namespace).update(patch)
        return self.snapshot().hash_hex

    def archive(self, target: str) -> str:
        """Move target under the trash node; whole subtree becomes
        non-schedulable. Idempotent for already-archived records."""
        rec = self.get(target)
        if target == self.root_uuid:
            raise CannotArchiveRoot("cannot archive the root", subject=target)
        if target == self.trash_uuid:
            raise CannotArchiveRoot("cannot archive the trash node", subject=target)
        assert self.trash_uuid is not None
        if self.in_trash(target):
            assert rec.parent_uuid is not None
            return rec.parent_uuid
        self.reparent(target, self.trash_uuid)
        for uid in self.query_subtree(target):
            self._records[uid].schedulable = False
        return self.trash_uuid

    def snapshot(self) -> TreeSnapshot:
        return TreeSnapshot.of(self.to_tree_dict())

    def subtree_snapshot(self, root: str) -> TreeSnapshot:
        recs = {uid: self._records[uid].to_dict() for uid in self.query_subtree(root)}
        return TreeSnapshot.of({"records": recs})

    # -- serialization --------------------------------------------------------

    def to_tree_dict(self) -> dict[str, Any]:
        return {"records": {uid: rec.to_dict() for uid, rec in self._records.items()}}

    @classmethod
    def from_tree_dict(cls, tree: dict[str, Any]) -> "ResourceStore":
        store = cls()
        records = {uid: ResourceRecord.from_dict(d) for uid, d in tree["records"].items()}
        inserted: set[str] = set()

        def insert_with_parents(uid: str) -> None:
            if uid in inserted:
                return
            rec = records[uid]
            if rec.parent_uuid is not None:
                insert_with_parents(rec.parent_uuid)
            store.insert(copy.deepcopy(rec))
            inserted.add(uid)
            if rec.parent_uuid is None:
                store.root_uuid = uid
            if rec.name == TRASH_NAME and store.trash_uuid is None:
                store.trash_uuid = uid

        for uid in sorted(records):
            insert_with_parents(uid)
        return store

    def clone(self) -> "ResourceStore":
        """Independent deep copy (used by the digital-twin look-ahead)."""
        other = ResourceStore.from_tree_dict(self.to_tree_dict())
        # preserve sibling order rather than the sorted-import order
        other._children = {uid: list(kids) for uid, kids in self._children.items()}
        return other

    # -- invariants (test-mode checks) ----------------------------------------

    def verify_invariants(self) -> None:
        roots = [u for u, r in self._records.items() if r.parent_uuid is None]
        if self._records and len(roots) != 1:
            raise AssertionError(f"expected exactly one root, found {roots}")
        for uid, rec in self._records.items():
            if rec.parent_uuid is not None:
                parent = self._records.get(rec.parent_uuid)
                if parent is None:
                    raise AssertionError(f"{uid} has dangling parent {rec.parent_uuid}")
                if parent.entity_kind is EntityKind.ACTION and rec.entity_kind.holds_material:
                    raise AssertionError(f"Action {parent.uuid} contains material {uid}")
                if uid not in self._children.get(rec.parent_uuid, ()):
                    raise AssertionError(f"{uid} missing from parent child list")
            seen = set()
            cursor = rec
            while cursor.parent_uuid is not None:
                if cursor.uuid in seen:
                    raise AssertionError(f"parent cycle through {cursor.uuid}")
                seen.add(cursor.uuid)
                cursor = self._records[cursor.parent_uuid]
        if self.root_uuid is not None and roots and roots[0] != self.root_uuid:
            raise AssertionError("root_uuid out of sync")


def total_volume_ul(store: ResourceStore) -> int:
    """Sum of data.volume_ul across all records (conservation checks)."""
    total = 0
    for rec in store._records.values():
        v = rec.data.get("volume_ul")
        if isinstance(v, int) and not isinstance(v, bool):
            total += v
    return total


def iter_records(store: ResourceStore) -> Iterable[ResourceRecord]:
    return store._records.values()
