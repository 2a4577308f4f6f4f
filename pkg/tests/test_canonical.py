import pytest

from labkernel import canonical
from labkernel.errors import ValueGrammarError


def test_key_order_irrelevant():
    a = {"b": 1, "a": "x", "c": [1, 2, "3 uL"]}
    b = {"c": [1, 2, "3 uL"], "a": "x", "b": 1}
    assert canonical.canonical_bytes(a) == canonical.canonical_bytes(b)
    assert canonical.content_hash(a) == canonical.content_hash(b)


def test_compact_and_sorted_form():
    assert canonical.canonical_text({"b": 1, "a": None}) == '{"a":null,"b":1}'


def test_unicode_is_utf8_not_escaped():
    text = canonical.canonical_text({"name": "μL flask"})
    assert "μL" in text
    assert "\\u" not in text


def test_floats_shortest_roundtrip():
    assert canonical.canonical_text([0.1, 1.0, 2.5]) == "[0.1,1.0,2.5]"


def test_nan_rejected():
    with pytest.raises(ValueGrammarError):
        canonical.canonical_text({"x": float("nan")})


def test_field_value_grammar():
    for ok in (None, True, 42, "150 uL", ["a", 1, None]):
        canonical.validate_field_value(ok, key="k")
    for bad in (1.5, {"nested": 1}, [[1]], [{"x": 1}], object()):
        with pytest.raises(ValueGrammarError):
            canonical.validate_field_value(bad, key="k")


def test_hash_is_sha256_hex():
    h = canonical.content_hash({})
    assert len(h) == 64
    int(h, 16)
