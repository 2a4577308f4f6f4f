"""Deterministic simulated fabric: virtual clock, event heap, fault shim.

All nodes share one single-threaded event loop. Frames move as encoded
bytes; delivery happens via scheduled events so causality is clean and a
given (seed, schedule) always produces the same trace. The fault shim can
drop, delay, duplicate, or partition traffic, either probabilistically
(seeded) or through scripted windows.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass
from typing import Any, Callable

from .envelope import Envelope, decode_frame


@dataclass
class TraceEntry:
    time: float
    source: str
    target: str
    channel: str
    kind: str
    topic: str | None
    msg_id: str
    delivered: bool
    note: str = ""


@dataclass
class _Rule:
    kind: str  # "drop" | "delay" | "duplicate"
    probability: float
    delay: float = 0.0
    match: Callable[[Envelope, str, str], bool] | None = None


class FaultShim:
    """Per-delivery fault decisions; deterministic under a fixed seed."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = random.Random(seed)
        self.rules: list[_Rule] = []
        # partition windows: (frozenset(group), start, end); frames crossing
        # the group boundary inside the window are dropped
        self.partitions: list[tuple[frozenset[str], float, float]] = []

    def add_rule(self, kind: str, probability: float, delay: float = 0.0,
                 match: Callable[[Envelope, str, str], bool] | None = None) -> None:
        self.rules.append(_Rule(kind, probability, delay, match))

    def partition(self, group: set[str], start: float, end: float) -> None:
        self.partitions.append((frozenset(group), start, end))

    def partitioned(self, a: str, b: str, now: float) -> bool:
        for group, start, end in self.partitions:
            if start <= now < end and ((a in group) != (b in group)):
                return True
        return False

    def decide(self, env: Envelope, source: str, target: str,
               now: float) -> tuple[bool, float, int]:
        """Returns (deliver, extra_delay, copies)."""
        if self.partitioned(source, target, now):
            return False, 0.0, 0
        deliver, delay, copies = True, 0.0, 1
        for rule in self.rules:
            if rule.match is not None and not rule.match(env, source, target):
                continue
            if self.rng.random() >= rule.probability:
                continue
            if rule.kind == "drop":
                deliver = False
            elif rule.kind == "delay":
                delay += rule.delay
            elif rule.kind == "duplicate":
                copies += 1
        return deliver, delay, copies


class SimNetwork:
    """Virtual-clock event loop owning every bus endpoint."""

    def __init__(self, seed: int = 0, latency: float = 0.0) -> None:
        self.now = 0.0
        self.latency = latency
        self.shim = FaultShim(seed)
        self.nodes: dict[str, Any] = {}  # node_id -> BusNode
        self.trace: list[TraceEntry] = []
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._tick = itertools.count()
        self._down: set[str] = set()

    # -- registry ---------------------------------------------------------------

    def add_node(self, node: Any) -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"node id {node.node_id} already on the fabric")
        self.nodes[node.node_id] = node

    def crash(self, node_id: str) -> None:
        """Hard-kill a node: it neither sends, receives, nor runs timers."""
        self._down.add(node_id)

    def revive(self, node_id: str) -> None:
        self._down.discard(node_id)

    def is_down(self, node_id: str) -> bool:
        return node_id in self._down

    # -- scheduling ----------------------------------------------------------------

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (self.now + max(delay, 0.0),
                                    next(self._tick), fn))

    def every(self, period: float, fn: Callable[[], None],
              owner: str | None = None) -> "PeriodicTimer":
        timer = PeriodicTimer(self, period, fn, owner)
        timer.arm()
        return timer

    def step(self, dt: float) -> None:
        """Advance virtual time by dt, firing everything due in order."""
        deadline = self.now + dt
        while self._heap and self._heap[0][0] <= deadline:
            when, _, fn = heapq.heappop(self._heap)
            self.now = max(self.now, when)
            fn()
        self.now = deadline

    def run_until(self, pred: Callable[[], bool], timeout: float = 60.0,
                  dt: float = 0.05) -> bool:
        deadline = self.now + timeout
        while self.now < deadline:
            if pred():
                return True
            self.step(dt)
        return pred()

    # -- frame transport --------------------------------------------------------------

    def send(self, frame: bytes, source: str, target: str | None) -> None:
        """Submit an encoded frame. target None broadcasts to every other
        node. Down sources cannot transmit."""
        if source in self._down:
            return
        env = decode_frame(frame)
        targets = ([target] if target is not None
                   else [nid for nid in sorted(self.nodes) if nid != source])
        for tgt in targets:
            self._route(frame, env, source, tgt)

    def _route(self, frame: bytes, env: Envelope, source: str, target: str) -> None:
        known = target in self.nodes and target not in self._down
        deliver, delay, copies = self.shim.decide(env, source, target, self.now)
        if not known:
            deliver = False
        self.trace.append(TraceEntry(
            time=self.now, source=source, target=target, channel=env.channel,
            kind=env.kind, topic=env.topic, msg_id=env.msg_id,
            delivered=deliver, note="" if deliver else "dropped"))
        if not deliver:
            return
        for _ in range(copies):
            self.schedule(self.latency + delay,
                          lambda f=frame, s=source, t=target: self._deliver(f, s, t))

    def _deliver(self, frame: bytes, source: str, target: str) -> None:
        node = self.nodes.get(target)
        if node is None or target in self._down:
            return
        node.on_frame(frame, source)

    # -- trace queries ------------------------------------------------------------------

    def delivered_count(self, target: str, channel: str | None = None,
                        topic: str | None = None, kind: str | None = None) -> int:
        n = 0
        for t in self.trace:
            if not t.delivered or t.target != target:
                continue
            if channel is not None and t.channel != channel:
                continue
            if topic is not None and t.topic != topic:
                continue
            if kind is not None and t.kind != kind:
                continue
            n += 1
        return n

    def goal_frames_to(self, target: str) -> list[TraceEntry]:
        return [t for t in self.trace
                if t.target == target and t.kind == "goal" and t.delivered]


class PeriodicTimer:
    def __init__(self, network: SimNetwork, period: float,
                 fn: Callable[[], None], owner: str | None) -> None:
        self.network = network
        self.period = period
        self.fn = fn
        self.owner = owner
        self.cancelled = False

    def arm(self) -> None:
        self.network.schedule(self.period, self._fire)

    def _fire(self) -> None:
        if self.cancelled:
            return
        if self.owner is None or not self.network.is_down(self.owner):
            self.fn()
        self.arm()

    def cancel(self) -> None:
        self.cancelled = True
