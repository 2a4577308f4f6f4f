"""Canonical serialization and content hashing.

All cross-process comparisons (snapshot equality, resync, the event log hash
chain) rely on one bit-stable form: UTF-8 JSON with bytewise-sorted keys,
compact separators, integers without leading zeros, and floats in shortest
round-trip notation. Namespace field values are restricted to a closed
grammar so the canonical form is total over store contents.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

from .errors import ValueGrammarError

# Scalar grammar for config/data/extra values: null, bool, int, text.
# Decimal quantities are carried as text with a unit suffix ("150 uL"),
# keeping hashing exact. Lists are flat lists of these scalars.
_SCALARS = (bool, int, str, type(None))


def validate_field_value(value: Any, *, key: str = "") -> None:
    """Reject values outside the closed namespace-value grammar."""
    if isinstance(value, _SCALARS):
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            if not isinstance(item, _SCALARS):
                raise ValueGrammarError(
                    f"list element {i} of field {key!r} is not a scalar",
                    key=key, index=i, type=type(item).__name__)
        return
    raise ValueGrammarError(
        f"field {key!r} has unsupported value type {type(value).__name__}",
        key=key, type=type(value).__name__)


def validate_namespace(ns: dict[str, Any], *, name: str = "") -> None:
    for k, v in ns.items():
        if not isinstance(k, str):
            raise ValueGrammarError(f"non-text key in namespace {name!r}", namespace=name)
        validate_field_value(v, key=k)


def _check_tree(obj: Any, path: str) -> None:
    if obj is None or isinstance(obj, (bool, int, str)):
        return
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueGrammarError(f"non-finite float at {path}", path=path)
        return
    if isinstance(obj, list):
        for i, item in enumerate(obj):
            _check_tree(item, f"{path}[{i}]")
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise ValueGrammarError(f"non-text key at {path}", path=path)
            _check_tree(v, f"{path}.{k}")
        return
    raise ValueGrammarError(
        f"unserializable {type(obj).__name__} at {path}", path=path)


def canonical_text(obj: Any) -> str:
    """Canonical JSON text for any serializable structure."""
    _check_tree(obj, "$")
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_text(obj).encode("utf-8")


def content_hash(obj: Any) -> str:
    """SHA-256 hex digest of the canonical form."""
    return hashlib.sha256(canonical_bytes(obj)).hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
