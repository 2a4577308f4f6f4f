"""Envelope schema and length-prefixed frame codec.

decode_frame is total: arbitrary bytes either produce a valid Envelope or a
MalformedFrame error with the offending offset, never a crash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any

from .. import canonical
from ..errors import FrameTooLarge, MalformedFrame

CHANNELS = ("networking", "material", "action", "status")
KINDS = ("request", "response", "goal", "feedback", "result", "cancel",
         "publish", "beacon", "heartbeat")
_CORRELATED_KINDS = ("response", "feedback", "result")

MAX_FRAME_BYTES = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


@dataclass
class Envelope:
    channel: str
    kind: str
    msg_id: str
    source: str
    target: str | None = None  # absent for publish/beacon broadcast
    correlates: str | None = None
    payload: dict[str, Any] = field(default_factory=dict)
    seq: int = 0

    def validate(self) -> None:
        if self.channel not in CHANNELS:
            raise MalformedFrame(f"unknown channel {self.channel!r}")
        if self.kind not in KINDS:
            raise MalformedFrame(f"unknown kind {self.kind!r}")
        if self.kind in _CORRELATED_KINDS and not self.correlates:
            raise MalformedFrame(f"{self.kind} frame must correlate to a msg_id")
        if self.kind == "publish" and "topic" not in self.payload:
            raise MalformedFrame("publish frame must carry payload.topic")
        if not isinstance(self.payload, dict):
            raise MalformedFrame("payload must be a map")

    @property
    def topic(self) -> str | None:
        return self.payload.get("topic")

    def to_dict(self) -> dict[str, Any]:
        return {
            "channel": self.channel,
            "kind": self.kind,
            "msg_id": self.msg_id,
            "source": self.source,
            "target": self.target,
            "correlates": self.correlates,
            "payload": self.payload,
            "seq": self.seq,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Envelope":
        try:
            env = cls(channel=d["channel"], kind=d["kind"], msg_id=d["msg_id"],
                      source=d["source"], target=d.get("target"),
                      correlates=d.get("correlates"),
                      payload=d.get("payload", {}), seq=int(d.get("seq", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFrame(f"envelope missing fields: {exc}") from exc
        env.validate()
        return env


def encode_frame(envelope: Envelope) -> bytes:
    envelope.validate()
    body = canonical.canonical_bytes(envelope.to_dict())
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"payload of {len(body)} bytes exceeds 16 MiB",
                            size=len(body))
    return _LEN.pack(len(body)) + body


def decode_frame(data: bytes) -> Envelope:
    """Decode one complete frame. Never raises anything but MalformedFrame /
    FrameTooLarge on arbitrary input."""
    if len(data) < _LEN.size:
        raise MalformedFrame("truncated length prefix", offset=len(data))
    (length,) = _LEN.unpack_from(data, 0)
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared length {length} exceeds 16 MiB", size=length)
    if len(data) != _LEN.size + length:
        raise MalformedFrame(
            f"frame length {len(data) - _LEN.size} != declared {length}",
            offset=min(len(data), _LEN.size + length))
    body = data[_LEN.size:]
    try:
        parsed = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        offset = getattr(exc, "pos", getattr(exc, "start", 0))
        raise MalformedFrame(f"unparsable frame body: {exc}",
                             offset=_LEN.size + int(offset or 0)) from exc
    if not isinstance(parsed, dict):
        raise MalformedFrame("frame body is not a map", offset=_LEN.size)
    return Envelope.from_dict(parsed)


class FrameDecoder:
    """Incremental reassembly for stream transports."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf.extend(data)
        out: list[Envelope] = []
        while True:
            if len(self._buf) < _LEN.size:
                return out
            (length,) = _LEN.unpack_from(self._buf, 0)
            if length > MAX_FRAME_BYTES:
                raise FrameTooLarge(f"declared length {length} exceeds 16 MiB",
                                    size=length)
            if len(self._buf) < _LEN.size + length:
                return out
            frame = bytes(self._buf[:_LEN.size + length])
            del self._buf[:_LEN.size + length]
            out.append(decode_frame(frame))
