import random
from pathlib import Path

import pytest

from labkernel.crutd import CrutdEngine
from labkernel.errors import (
    AmbiguousChannel,
    DuplicateCapability,
    ManifestSyntaxError,
    NonConformant,
    UnknownParent,
    UnknownUnit,
)
from labkernel.manifest import (
    CapabilityDecl,
    DriverDescriptor,
    ParamDecl,
    SlotDecl,
    UNITS,
    classify_capability,
    parse_manifest,
    register_driver,
    serialize_manifest,
    validate_conventions,
)
from labkernel.resources import EntityKind, ResourceStore

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "manifests"


def test_heater_fixture_shape():
    desc = parse_manifest((FIXTURES / "heater_stirrer.driver").read_text())
    assert desc.name == "heater_stirrer"
    assert desc.entity_kind is EntityKind.ACTION_RESOURCE
    assert desc.functional_category == "material_processing"
    assert [c.name for c in desc.capabilities] == [
        "get_temperature", "heat_to", "set_stir_speed"]
    temp, heat, stir = desc.capabilities
    assert temp.channel == "stream" and temp.rate_hz == 10
    assert heat.channel == "action" and heat.cancellable
    assert heat.feedback[0].name == "current" and heat.feedback[0].unit == "C"
    assert stir.channel == "service"
    assert desc.slots == [SlotDecl(name="vessel", capacity=1)]


def test_all_valid_fixtures_parse_and_conform():
    files = sorted(FIXTURES.glob("*.driver"))
    assert len(files) >= 8
    categories = set()
    for path in files:
        desc = parse_manifest(path.read_text())
        categories.add(desc.functional_category)
        assert validate_conventions(desc) == []
    assert categories == {"sensor", "connector", "material_processing",
                          "characterization", "logistics", "virtual"}


def test_empty_input_position():
    with pytest.raises(ManifestSyntaxError) as exc:
        parse_manifest("")
    assert (exc.value.line, exc.value.col) == (1, 1)


def test_duplicate_capability():
    text = (FIXTURES / "invalid" / "dup_cap.driver").read_text()
    with pytest.raises(DuplicateCapability) as exc:
        parse_manifest(text)
    assert exc.value.line == 3


def test_unknown_unit_position():
    text = (FIXTURES / "invalid" / "unknown_unit.driver").read_text()
    with pytest.raises(UnknownUnit) as exc:
        parse_manifest(text)
    assert exc.value.line == 2
    assert "furlongs" in exc.value.message


def test_invalid_fixtures_have_in_bounds_positions():
    for path in sorted((FIXTURES / "invalid").glob("*.driver")):
        text = path.read_text()
        with pytest.raises(ManifestSyntaxError) as exc:
            parse_manifest(text)
        err = exc.value
        lines = text.split("\n")
        assert 1 <= err.line <= max(len(lines), 1), path.name
        line_text = lines[err.line - 1] if err.line <= len(lines) else ""
        assert 1 <= err.col <= max(len(line_text) + 1, 1), path.name


def test_rate_clamped():
    desc = parse_manifest(
        "driver s kind=A category=sensor\nstream get_x() -> int @5000Hz\n")
    assert desc.capabilities[0].rate_hz == 1000
    desc = parse_manifest(
        "driver s kind=A category=sensor\nstream get_x() -> int\n")
    assert desc.capabilities[0].rate_hz == 10  # default


def test_classify_heuristics():
    assert classify_capability(CapabilityDecl(name="get_sensor_data")) == "stream"
    assert classify_capability(CapabilityDecl(name="set_speed")) == "service"
    assert classify_capability(CapabilityDecl(
        name="heat_to", feedback=[ParamDecl("current", "decimal", "C")])) == "action"
    assert classify_capability(CapabilityDecl(name="move_to_well",
                                              cancellable=True)) == "action"
    with pytest.raises(AmbiguousChannel):
        classify_capability(CapabilityDecl(name="do_thing"))


def test_roundtrip_fixpoint_on_fixtures():
    for path in sorted(FIXTURES.glob("*.driver")):
        desc = parse_manifest(path.read_text())
        text = serialize_manifest(desc)
        again = parse_manifest(text)
        assert again == desc, path.name
        assert serialize_manifest(again) == text, path.name


# -- generator used by the round-trip property (shared with acceptance) -------

def random_descriptor(rng: random.Random) -> DriverDescriptor:
    kind = rng.choice(["A", "AR", "R"])
    category = rng.choice(["sensor", "connector", "material_processing",
                           "characterization", "logistics", "virtual"])
    ident = lambda: "".join(rng.choice("abcdefgh_") for _ in range(rng.randint(3, 10)))
    params = lambda: [ParamDecl(name=f"p{i}_{ident()}",
                                type=rng.choice(["int", "decimal", "bool", "text"]),
                                unit=rng.choice([None, *UNITS]))
                      for i in range(rng.randint(0, 3))]
    caps = []
    if kind != "R":
        for i in range(rng.randint(1, 5)):
            channel = rng.choice(["stream", "action", "service"])
            cap = CapabilityDecl(name=f"c{i}_{ident()}", channel=channel,
                                 params=params())
            if channel == "stream":
                cap.rate_hz = rng.randint(1, 1000)
                cap.returns = rng.choice(["int", "decimal", "text"])
            elif channel == "action":
                cap.returns = rng.choice(["int", "decimal", "bool", "text"])
                cap.returns_unit = rng.choice([None, *UNITS])
                if rng.random() < 0.5:
                    cap.feedback = params()
                cap.cancellable = rng.random() < 0.5
            else:
                cap.returns = rng.choice([None, "bool", "int"])
            if rng.random() < 0.3:
                cap.doc = "generated capability"
            caps.append(cap)
    slots = []
    if kind == "AR":
        slots = [SlotDecl(name=f"s{i}_{ident()}", capacity=rng.randint(1, 96))
                 for i in range(rng.randint(1, 3))]
    return DriverDescriptor(
        name=ident(), entity_kind={"A": EntityKind.ACTION,
                                   "AR": EntityKind.ACTION_RESOURCE,
                                   "R": EntityKind.RESOURCE}[kind],
        functional_category=category, capabilities=caps, slots=slots,
        doc="generated driver" if rng.random() < 0.5 else None)


def test_roundtrip_fixpoint_generated():
    rng = random.Random(1234)
    for _ in range(300):
        desc = random_descriptor(rng)
        text = serialize_manifest(desc)
        parsed = parse_manifest(text)
        assert parsed == desc
        assert serialize_manifest(parsed) == text


def test_fuzz_arbitrary_bytes_never_crash():
    rng = random.Random(77)
    for _ in range(500):
        blob = bytes(rng.randrange(256) for _ in range(rng.randint(0, 200)))
        text = blob.decode("utf-8", errors="replace")
        try:
            parse_manifest(text)
        except ManifestSyntaxError as exc:
            assert exc.line >= 1 and exc.col >= 1
        # any other exception type is a bug and fails the test


def test_conventions_violations():
    bad_pump = DriverDescriptor(
        name="pump", entity_kind=EntityKind.ACTION, functional_category="connector",
        capabilities=[CapabilityDecl(name="dose", channel="action", returns="bool")],
        slots=[SlotDecl(name="barrel", capacity=1)])
    report = validate_conventions(bad_pump)
    assert any(v["code"] == "ActionOwnsMaterial" for v in report)

    empty_ar = DriverDescriptor(name="x", entity_kind=EntityKind.ACTION_RESOURCE,
                                functional_category="virtual",
                                capabilities=[CapabilityDecl(
                                    name="go", channel="action", returns="bool")])
    assert any(v["code"] == "MissingSlots" for v in validate_conventions(empty_ar))

    ok = parse_manifest((FIXTURES / "liquid_handler.driver").read_text())
    assert validate_conventions(ok) == []


# -- registration ----------------------------------------------------------------


def setup_engine():
    store = ResourceStore()
    root = store.create_record({"name": "lab"})
    bench = store.create_record({"name": "bench"}, parent=root)
    return CrutdEngine(store), bench


def test_register_driver_creates_device_and_slots():
    engine, bench = setup_engine()
    desc = parse_manifest((FIXTURES / "heater_stirrer.driver").read_text())
    advertised = []
    uid = register_driver(engine, desc, bench,
                          advertise=lambda u, d: advertised.append((u, d.name)))
    rec = engine.store.get(uid)
    assert rec.name == "heater_stirrer"
    assert rec.entity_kind is EntityKind.ACTION_RESOURCE
    slots = engine.store.children(uid)
    assert [engine.store.get(s).name for s in slots] == ["vessel"]
    assert advertised == [(uid, "heater_stirrer")]
    assert rec.config["capabilities"] == ["get_temperature", "heat_to",
                                          "set_stir_speed"]
    # the whole registration is one committed Create event
    creates = [e for e in engine.events if e.request.op == "Create"]
    assert len(creates) == 1 and len(creates[0].touched) == 2


def test_register_twice_disambiguates():
    engine, bench = setup_engine()
    desc = parse_manifest((FIXTURES / "tds_sensor.driver").read_text())
    a = register_driver(engine, desc, bench)
    b = register_driver(engine, desc, bench)
    assert a != b
    assert engine.store.get(a).name == "tds_sensor"
    assert engine.store.get(b).name == "tds_sensor_2"


def test_register_nonconformant_rejected():
    engine, bench = setup_engine()
    bad = DriverDescriptor(name="pump", entity_kind=EntityKind.ACTION,
                           functional_category="connector",
                           slots=[SlotDecl(name="s", capacity=1)])
    with pytest.raises(NonConformant):
        register_driver(engine, bad, bench)
    with pytest.raises(UnknownParent):
        register_driver(engine, DriverDescriptor(
            name="ok", entity_kind=EntityKind.ACTION,
            functional_category="sensor",
            capabilities=[CapabilityDecl(name="get_x", channel="stream",
                                         rate_hz=10)]), "ghost")


def test_registration_atomic_under_fault():
    engine, bench = setup_engine()
    desc = parse_manifest((FIXTURES / "liquid_handler.driver").read_text())

    class Boom(RuntimeError):
        pass

    def hook(phase):
        if phase == "commit.mid_apply":
            raise Boom()

    engine.fault_hook = hook
    before = engine.store.snapshot().text
    advertised = []
    with pytest.raises(Exception):
        register_driver(engine, desc, bench,
                        advertise=lambda u, d: advertised.append(u))
    engine.fault_hook = None
    assert engine.store.snapshot().text == before
    assert advertised == []
