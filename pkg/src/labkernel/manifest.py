"""Declarative driver-manifest language.

A ``.driver`` file declares what a device can do before it is allowed into
the tree: a header naming the driver, its A/AR/R kind and functional
category, then one line per capability (stream / action / service, or
``cap`` to let the classifier infer the channel), plus material slots.

    driver heater_stirrer kind=AR category=material_processing
    doc "hotplate with integrated magnetic stirrer"
    stream get_temperature() -> decimal C @10Hz
    action heat_to(target: decimal C) -> bool feedback(current: decimal C) cancellable
    service set_stir_speed(speed: int rpm) -> bool
    slot vessel capacity=1

Parsing is pure and must be a fixpoint under serialize: every error carries
a 1-based line/column and the tokens that would have been accepted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Callable

from . import canonical
from .crutd import CrutdEngine, CrutdRequest
from .errors import (
    AmbiguousChannel,
    DuplicateCapability,
    ManifestSyntaxError,
    NonConformant,
    UnknownParent,
    UnknownUnit,
)
from .resources import FUNCTIONAL_CATEGORIES, EntityKind

UNITS = ("uL", "mL", "C", "rpm", "mA", "V", "ppm", "mm", "s", "Hz", "percent")
PARAM_TYPES = ("int", "decimal", "bool", "text")
CHANNELS = ("stream", "action", "service")
KIND_CODES = {"A": EntityKind.ACTION, "AR": EntityKind.ACTION_RESOURCE,
              "R": EntityKind.RESOURCE}
_KIND_TO_CODE = {v: k for k, v in KIND_CODES.items()}

DEFAULT_STREAM_RATE = 10
RATE_MIN, RATE_MAX = 1, 1000

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"[0-9]+")


@dataclass
class ParamDecl:
    name: str
    type: str
    unit: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "type": self.type, "unit": self.unit}


@dataclass
class CapabilityDecl:
    name: str
    channel: str | None = None  # None until classified
    params: list[ParamDecl] = field(default_factory=list)
    returns: str | None = None
    returns_unit: str | None = None
    rate_hz: int | None = None
    feedback: list[ParamDecl] = field(default_factory=list)
    cancellable: bool = False
    doc: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "channel": self.channel,
            "params": [p.to_dict() for p in self.params],
            "returns": self.returns,
            "returns_unit": self.returns_unit,
            "rate_hz": self.rate_hz,
            "feedback": [p.to_dict() for p in self.feedback],
            "cancellable": self.cancellable,
            "doc": self.doc,
        }


@dataclass
class SlotDecl:
    name: str
    capacity: int

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "capacity": self.capacity}


@dataclass
class DriverDescriptor:
    name: str
    entity_kind: EntityKind
    functional_category: str
    capabilities: list[CapabilityDecl] = field(default_factory=list)
    slots: list[SlotDecl] = field(default_factory=list)
    doc: str | None = None

    def capability(self, name: str) -> CapabilityDecl | None:
        for cap in self.capabilities:
            if cap.name == name:
                return cap
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": _KIND_TO_CODE[self.entity_kind],
            "category": self.functional_category,
            "capabilities": [c.to_dict() for c in self.capabilities],
            "slots": [s.to_dict() for s in self.slots],
            "doc": self.doc,
        }

    def digest(self) -> str:
        return canonical.content_hash(self.to_dict())


# --- parsing -------------------------------------------------------------------


class _Cursor:
    """Single-line scanner with 1-based column reporting."""

    def __init__(self, text: str, line_no: int) -> None:
        self.text = text
        self.line = line_no
        self.pos = 0

    @property
    def col(self) -> int:
        return self.pos + 1

    def error(self, message: str, expected: list[str] | None = None,
              cls: type = ManifestSyntaxError) -> ManifestSyntaxError:
        return cls(message, self.line, self.col, expected)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def peek(self, literal: str) -> bool:
        self.skip_ws()
        return self.text.startswith(literal, self.pos)

    def take(self, literal: str) -> bool:
        if self.peek(literal):
            self.pos += len(literal)
            return True
        return False

    def expect(self, literal: str) -> None:
        if not self.take(literal):
            raise self.error(f"expected {literal!r}", expected=[literal])

    def ident(self, what: str = "identifier") -> str:
        self.skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            raise self.error(f"expected {what}", expected=[what])
        self.pos = m.end()
        return m.group(0)

    def number(self, what: str = "number") -> int:
        self.skip_ws()
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise self.error(f"expected {what}", expected=[what])
        self.pos = m.end()
        return int(m.group(0))

    def quoted(self) -> str:
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != '"':
            raise self.error("expected quoted text", expected=['"'])
        end = self.text.find('"', self.pos + 1)
        if end < 0:
            raise self.error("unterminated quote", expected=['"'])
        value = self.text[self.pos + 1:end]
        self.pos = end + 1
        return value


def _parse_unit(cur: _Cursor) -> str | None:
    cur.skip_ws()
    m = _IDENT.match(cur.text, cur.pos)
    if not m:
        return None
    word = m.group(0)
    if word in ("feedback", "cancellable"):
        return None
    if word not in UNITS:
        raise cur.error(f"unknown unit {word!r}", expected=list(UNITS),
                        cls=UnknownUnit)
    cur.pos = m.end()
    return word


def _parse_params(cur: _Cursor) -> list[ParamDecl]:
    cur.expect("(")
    params: list[ParamDecl] = []
    if cur.take(")"):
        return params
    while True:
        name = cur.ident("parameter name")
        cur.expect(":")
        ptype = cur.ident("parameter type")
        if ptype not in PARAM_TYPES:
            raise cur.error(f"unknown type {ptype!r}", expected=list(PARAM_TYPES))
        unit = _parse_unit(cur)
        params.append(ParamDecl(name=name, type=ptype, unit=unit))
        if cur.take(")"):
            return params
        cur.expect(",")


def _parse_capability(cur: _Cursor, keyword: str) -> CapabilityDecl:
    name = cur.ident("capability name")
    decl = CapabilityDecl(name=name,
                          channel=keyword if keyword in CHANNELS else None)
    decl.params = _parse_params(cur)
    while not cur.at_end():
        if cur.take("->"):
            rtype = cur.ident("return type")
            if rtype not in PARAM_TYPES:
                raise cur.error(f"unknown type {rtype!r}", expected=list(PARAM_TYPES))
            decl.returns = rtype
            decl.returns_unit = _parse_unit(cur)
        elif cur.take("@"):
            rate = cur.number("rate")
            cur.expect("Hz")
            # out-of-range rates are clamped, not rejected
            decl.rate_hz = max(RATE_MIN, min(RATE_MAX, rate))
        elif cur.take("feedback"):
            decl.feedback = _parse_params(cur)
        elif cur.take("cancellable"):
            decl.cancellable = True
        else:
            raise cur.error("unexpected trailing tokens",
                            expected=["->", "@", "feedback", "cancellable"])
    return decl


def classify_capability(decl: CapabilityDecl) -> str:
    """Channel for a capability: an explicit declaration wins, otherwise the
    naming/shape heuristics (get_* streams, set_* services, rate implies a
    stream, feedback or cancellability implies an action)."""
    if decl.channel in CHANNELS:
        return decl.channel
    if decl.name.startswith("get_"):
        return "stream"
    if decl.name.startswith("set_"):
        return "service"
    if decl.rate_hz is not None:
        return "stream"
    if decl.feedback or decl.cancellable:
        return "action"
    raise AmbiguousChannel(
        f"cannot infer channel for {decl.name!r}; declare stream/action/service",
        1, 1, expected=list(CHANNELS))


def parse_manifest(text: str) -> DriverDescriptor:
    """Parse one .driver document into a descriptor, classifying every
    capability. Raises a positioned error on the first problem."""
    descriptor: DriverDescriptor | None = None
    last_capability: CapabilityDecl | None = None
    seen_caps: dict[str, int] = {}

    lines = text.split("\n")
    for line_no, raw in enumerate(lines, start=1):
        stripped = raw.split("#", 1)[0]
        if not stripped.strip():
            continue
        cur = _Cursor(stripped.rstrip(), line_no)
        if descriptor is None:
            cur.expect("driver")
            name = cur.ident("driver name")
            cur.expect("kind=")
            kind_code = cur.ident("kind code")
            if kind_code not in KIND_CODES:
                raise cur.error(f"unknown kind {kind_code!r}",
                                expected=sorted(KIND_CODES))
            cur.expect("category=")
            category = cur.ident("category")
            if category not in FUNCTIONAL_CATEGORIES:
                raise cur.error(f"unknown category {category!r}",
                                expected=sorted(FUNCTIONAL_CATEGORIES))
            if not cur.at_end():
                raise cur.error("unexpected trailing tokens")
            descriptor = DriverDescriptor(name=name, entity_kind=KIND_CODES[kind_code],
                                          functional_category=category)
            continue

        cur.skip_ws()
        keyword_match = _IDENT.match(cur.text, cur.pos)
        keyword = keyword_match.group(0) if keyword_match else ""
        if keyword == "doc":
            cur.pos = keyword_match.end()
            doc = cur.quoted()
            if last_capability is not None:
                last_capability.doc = doc
            else:
                descriptor.doc = doc
        elif keyword == "slot":
            cur.pos = keyword_match.end()
            slot_name = cur.ident("slot name")
            cur.expect("capacity=")
            col_before = cur.col
            capacity = cur.number("capacity")
            if capacity < 1:
                cur.pos = col_before - 1
                raise cur.error("capacity must be >= 1")
            descriptor.slots.append(SlotDecl(name=slot_name, capacity=capacity))
            last_capability = None
        elif keyword in CHANNELS or keyword == "cap":
            cur.pos = keyword_match.end()
            name_col = cur.col
            decl = _parse_capability(cur, keyword)
            if decl.name in seen_caps:
                raise DuplicateCapability(
                    f"capability {decl.name!r} already declared on line "
                    f"{seen_caps[decl.name]}", line_no, name_col)
            seen_caps[decl.name] = line_no
            try:
                decl.channel = classify_capability(decl)
            except AmbiguousChannel as exc:
                raise AmbiguousChannel(exc.message, line_no, name_col,
                                       expected=exc.expected) from None
            if decl.channel == "stream" and decl.rate_hz is None:
                decl.rate_hz = DEFAULT_STREAM_RATE
            descriptor.capabilities.append(decl)
            last_capability = decl
        else:
            raise cur.error(f"unknown directive {keyword!r}" if keyword
                            else "expected a directive",
                            expected=["stream", "action", "service", "cap",
                                      "slot", "doc"])

    if descriptor is None:
        raise ManifestSyntaxError("empty manifest", 1, 1, expected=["driver"])
    return descriptor


# --- serialization (parse . serialize . parse is a fixpoint) ---------------------


def _format_params(params: list[ParamDecl]) -> str:
    return ", ".join(
        f"{p.name}: {p.type}" + (f" {p.unit}" if p.unit else "") for p in params)


def serialize_manifest(descriptor: DriverDescriptor) -> str:
    lines = [f"driver {descriptor.name} kind={_KIND_TO_CODE[descriptor.entity_kind]} "
             f"category={descriptor.functional_category}"]
    if descriptor.doc:
        lines.append(f'doc "{descriptor.doc}"')
    for cap in descriptor.capabilities:
        parts = [f"{cap.channel} {cap.name}({_format_params(cap.params)})"]
        if cap.returns:
            parts.append(f"-> {cap.returns}" + (f" {cap.returns_unit}"
                                                if cap.returns_unit else ""))
        if cap.channel == "stream" and cap.rate_hz is not None:
            parts.append(f"@{cap.rate_hz}Hz")
        if cap.feedback:
            parts.append(f"feedback({_format_params(cap.feedback)})")
        if cap.cancellable:
            parts.append("cancellable")
        lines.append(" ".join(parts))
        if cap.doc:
            lines.append(f'doc "{cap.doc}"')
    for slot in descriptor.slots:
        lines.append(f"slot {slot.name} capacity={slot.capacity}")
    return "\n".join(lines) + "\n"


# --- conformance ------------------------------------------------------------------


def validate_conventions(descriptor: DriverDescriptor) -> list[dict[str, Any]]:
    """A/R/A&R convention report; an empty report means registrable."""
    report: list[dict[str, Any]] = []
    if descriptor.entity_kind is EntityKind.ACTION and descriptor.slots:
        report.append({"code": "ActionOwnsMaterial",
                       "message": "pure-Action driver declares material slots",
                       "slots": [s.name for s in descriptor.slots]})
    if descriptor.entity_kind is EntityKind.ACTION_RESOURCE and not descriptor.slots:
        report.append({"code": "MissingSlots",
                       "message": "Action&Resource driver declares no material slots"})
    if descriptor.entity_kind is EntityKind.RESOURCE and descriptor.capabilities:
        report.append({"code": "ResourceWithCapabilities",
                       "message": "pure-Resource driver declares capabilities",
                       "capabilities": [c.name for c in descriptor.capabilities]})
    seen_slots: set[str] = set()
    for slot in descriptor.slots:
        if slot.name in seen_slots:
            report.append({"code": "DuplicateSlot", "message":
                           f"slot {slot.name!r} declared twice", "slot": slot.name})
        seen_slots.add(slot.name)
    for cap in descriptor.capabilities:
        if cap.channel == "action" and cap.returns is None:
            report.append({"code": "MissingResult",
                           "message": f"action {cap.name!r} declares no result type",
                           "capability": cap.name})
        if cap.channel != "action" and (cap.feedback or cap.cancellable):
            report.append({"code": "FeedbackOnNonAction",
                           "message": f"{cap.channel} {cap.name!r} carries "
                                      "action-only markers",
                           "capability": cap.name})
        if cap.channel != "stream" and cap.rate_hz is not None:
            report.append({"code": "RateOnNonStream",
                           "message": f"{cap.channel} {cap.name!r} declares a rate",
                           "capability": cap.name})
    return report


# --- registration -------------------------------------------------------------------


def device_spec_from_descriptor(descriptor: DriverDescriptor,
                                name: str | None = None,
                                config_overlay: dict[str, Any] | None = None,
                                ) -> dict[str, Any]:
    config: dict[str, Any] = {
        "driver": descriptor.name,
        "device_class": descriptor.name,
        "capabilities": sorted(c.name for c in descriptor.capabilities),
        "manifest_sha": descriptor.digest(),
    }
    if config_overlay:
        config.update(config_overlay)
    extra: dict[str, Any] = {}
    if descriptor.doc:
        extra["doc"] = descriptor.doc
    return {
        "name": name or descriptor.name,
        "entity_kind": descriptor.entity_kind.value,
        "functional_category": descriptor.functional_category,
        "config": config,
        "data": {"occupied": False},
        "extra": extra,
    }


def register_driver(engine: CrutdEngine, descriptor: DriverDescriptor,
                    parent: str,
                    advertise: Callable[[str, DriverDescriptor], None] | None = None,
                    actor: str = "host", name: str | None = None,
                    config_overlay: dict[str, Any] | None = None) -> str:
    """Create the device node plus its slot children in one atomic Create
    transaction, then advertise capabilities. Returns the device uuid.

    The single-transaction shape is what makes registration all-or-nothing:
    a fault mid-way rolls the whole subtree back and nothing is advertised.
    """
    report = validate_conventions(descriptor)
    if report:
        raise NonConformant(f"driver {descriptor.name!r} fails conventions",
                            subject=descriptor.name, report=report)
    if parent not in engine.store:
        raise UnknownParent(f"parent {parent} does not exist", subject=parent)

    taken = {engine.store.get(uid).name for uid in engine.store.children(parent)}
    base = name or descriptor.name
    name = base
    suffix = 2
    while name in taken:
        name = f"{base}_{suffix}"
        suffix += 1

    children = [{"spec": {
        "name": slot.name,
        "entity_kind": "Resource",
        "config": {"slot_capacity": slot.capacity},
    }, "parent_index": 0} for slot in descriptor.slots]
    event = engine.execute(CrutdRequest(
        op="Create", actor=actor,
        params={"spec": device_spec_from_descriptor(descriptor, name,
                                                    config_overlay),
                "parent": parent, "children": children}))
    device_uuid = event.touched[0]
    if advertise is not None:
        advertise(device_uuid, descriptor)  # fenced: runs before we return
    return device_uuid
