"""Bus endpoint: services, actions, topics, beacons, heartbeats.

One BusNode per participant. Everything is callback-driven off the fabric's
event loop; a node never touches another node's state except through
frames. Service requests are deduplicated by msg_id so retransmits execute
the body exactly once; action goals follow accepted -> executing ->
{succeeded, failed, cancelled} with no feedback after a terminal state;
status topics deliver peer-to-peer with a drop-oldest ring per subscriber.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Any, Callable

from ..errors import (
    GoalRejected,
    LabError,
    RemoteError,
    TargetUnknown,
    Timeout,
    UnknownCapability,
    error_from_dict,
)
from .envelope import Envelope, decode_frame, encode_frame
from .network import SimNetwork

PROTOCOL_VERSION = "1"
LIVENESS_TOPIC = "__liveness__"
LOG_TOPIC = "__log__"
_SUBS_TOPIC = "__subs__"

DEDUP_WINDOW = 4096
RING_DEPTH = 64
SUB_ANNOUNCE_PERIOD = 2.0


@dataclass
class NodeInfo:
    node_id: str
    role: str  # host | device | compute
    capabilities_digest: str = ""
    address: str = ""
    protocol_version: str = PROTOCOL_VERSION
    auth_token: str = ""  # reserved; no authn in this artifact

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "role": self.role,
            "capabilities_digest": self.capabilities_digest,
            "address": self.address,
            "protocol_version": self.protocol_version,
            "auth_token": self.auth_token,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NodeInfo":
        return cls(node_id=d["node_id"], role=d.get("role", "device"),
                   capabilities_digest=d.get("capabilities_digest", ""),
                   address=d.get("address", ""),
                   protocol_version=d.get("protocol_version", ""),
                   auth_token=d.get("auth_token", ""))


class PendingCall:
    """Client side of an in-flight service request."""

    def __init__(self, node: "BusNode", msg_id: str, target: str) -> None:
        self.node = node
        self.msg_id = msg_id
        self.target = target
        self.done = False
        self.value: Any = None
        self.error: LabError | None = None
        self.on_done: Callable[["PendingCall"], None] | None = None

    def _resolve(self, value: Any = None, error: LabError | None = None) -> None:
        if self.done:
            return
        self.done = True
        self.value = value
        self.error = error
        if self.on_done is not None:
            self.on_done(self)

    def result(self) -> Any:
        if not self.done:
            raise Timeout(f"call {self.msg_id} still pending", subject=self.target)
        if self.error is not None:
            raise self.error
        return self.value


TERMINAL_STATES = ("succeeded", "failed", "cancelled")


class ActionExecution:
    """Client handle for a long-running goal."""

    def __init__(self, node: "BusNode", goal_id: str, target: str,
                 capability: str) -> None:
        self.node = node
        self.goal_id = goal_id
        self.target = target
        self.capability = capability
        self.state = "pending"  # pending -> accepted -> executing -> terminal
        self.feedback: list[dict[str, Any]] = []
        self.result: dict[str, Any] | None = None
        self.error: LabError | None = None
        self.on_feedback: Callable[[dict[str, Any]], None] | None = None
        self.on_terminal: Callable[["ActionExecution"], None] | None = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def _accept(self) -> None:
        if self.state == "pending":
            self.state = "accepted"

    def _reject(self, error: LabError) -> None:
        if not self.terminal:
            self.state = "failed"
            self.error = error
            if self.on_terminal is not None:
                self.on_terminal(self)

    def _feedback(self, payload: dict[str, Any]) -> None:
        if self.terminal:
            return  # late frames after the result are ignored
        if self.state in ("pending", "accepted"):
            self.state = "executing"
        self.feedback.append(payload)
        if self.on_feedback is not None:
            self.on_feedback(payload)

    def _finish(self, state: str, payload: dict[str, Any]) -> None:
        if self.terminal:
            return
        self.state = state
        if state == "succeeded":
            self.result = payload
        else:
            self.result = payload
            err = payload.get("error")
            self.error = error_from_dict(err) if err else LabError(state)
        if self.on_terminal is not None:
            self.on_terminal(self)

    def cancel(self) -> None:
        self.node.cancel(self)


class GoalContext:
    """Server side of one accepted goal; owned by the device handler."""

    def __init__(self, node: "BusNode", goal_id: str, capability: str,
                 params: dict[str, Any], requester: str) -> None:
        self.node = node
        self.goal_id = goal_id
        self.capability = capability
        self.params = params
        self.requester = requester
        self.state = "accepted"
        self.cancel_requested = False
        self.on_cancel: Callable[["GoalContext"], None] | None = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def publish_feedback(self, payload: dict[str, Any]) -> bool:
        if self.terminal:
            return False  # the state machine forbids feedback after a result
        self.state = "executing"
        self.node._send(Envelope(
            channel="action", kind="feedback",
            msg_id=self.node._next_msg_id(), source=self.node.node_id,
            target=self.requester, correlates=self.goal_id, payload=payload))
        return True

    def _finish(self, state: str, payload: dict[str, Any]) -> None:
        if self.terminal:
            return
        self.state = state
        body = {"state": state, **payload}
        self.node._send(Envelope(
            channel="action", kind="result", msg_id=self.node._next_msg_id(),
            source=self.node.node_id, target=self.requester,
            correlates=self.goal_id, payload=body))
        self.node._server_goals.pop(self.goal_id, None)
        # terminal results stay queryable so a reconnecting client can
        # recover an outcome whose result frame died on the wire
        self.node._goal_results[self.goal_id] = body
        while len(self.node._goal_results) > 256:
            self.node._goal_results.popitem(last=False)

    def succeed(self, result: dict[str, Any] | None = None) -> None:
        self._finish("succeeded", {"result": result or {}})

    def fail(self, error: LabError | str) -> None:
        err = error if isinstance(error, LabError) else LabError(str(error))
        self._finish("failed", {"error": err.to_dict()})

    def cancelled(self, detail: dict[str, Any] | None = None) -> None:
        self._finish("cancelled", {"result": detail or {}})


class Subscription:
    """Receiver side of one topic: drop-oldest ring, per-source ordering."""

    def __init__(self, node: "BusNode", topic: str,
                 callback: Callable[[dict[str, Any], str], None] | None,
                 source: str | None, depth: int = RING_DEPTH) -> None:
        self.node = node
        self.topic = topic
        self.callback = callback
        self.source_filter = source
        self.ring: deque[tuple[str, dict[str, Any]]] = deque(maxlen=depth)
        self.paused = False
        self.received = 0
        self.dropped_stale = 0
        self._last_seq: dict[str, int] = {}

    def _offer(self, env: Envelope) -> None:
        if self.source_filter is not None and env.source != self.source_filter:
            return
        last = self._last_seq.get(env.source, -1)
        if env.seq <= last:
            self.dropped_stale += 1
            return  # duplicate or out-of-order retransmit
        self._last_seq[env.source] = env.seq
        self.received += 1
        self.ring.append((env.source, dict(env.payload)))
        if not self.paused:
            self.drain()

    def drain(self) -> list[tuple[str, dict[str, Any]]]:
        out = []
        while self.ring:
            source, payload = self.ring.popleft()
            out.append((source, payload))
            if self.callback is not None:
                self.callback(payload, source)
        return out

    def poll(self) -> list[tuple[str, dict[str, Any]]]:
        """Manual consumption; returns and clears the buffered messages."""
        out = list(self.ring)
        self.ring.clear()
        return out

    def unsubscribe(self) -> None:
        self.node._drop_subscription(self)


class BusNode:
    """One endpoint on the fabric."""

    def __init__(self, network: SimNetwork, node_id: str, role: str = "device",
                 protocol_version: str = PROTOCOL_VERSION) -> None:
        self.network = network
        self.node_id = node_id
        self.info = NodeInfo(node_id=node_id, role=role,
                             protocol_version=protocol_version)
        self._seq = 0
        self._msg_counter = 0
        self._service_handlers: dict[str, Callable[[dict[str, Any], str], Any]] = {}
        self._action_handlers: dict[str, Callable[[GoalContext], None]] = {}
        self._dedup: OrderedDict[tuple[str, str], bytes] = OrderedDict()
        self._pending: dict[str, PendingCall] = {}
        self._client_goals: dict[str, ActionExecution] = {}
        self._server_goals: dict[str, GoalContext] = {}
        self._subscriptions: list[Subscription] = []
        self._peer_subs: dict[str, set[str]] = {}  # node_id -> topics
        self._goal_results: OrderedDict[str, dict[str, Any]] = OrderedDict()
        self.on_beacon: Callable[[Envelope], None] | None = None
        self.on_heartbeat: Callable[[Envelope], None] | None = None
        self.on_response: Callable[[Envelope], None] | None = None
        self.frames_received = 0
        network.add_node(self)
        self._sub_timer = network.every(SUB_ANNOUNCE_PERIOD,
                                        self._announce_subscriptions,
                                        owner=node_id)
        self.serve("goal.status", self._goal_status)

    # -- low-level send/receive ---------------------------------------------------

    def _next_msg_id(self) -> str:
        self._msg_counter += 1
        return f"{self.node_id}-m{self._msg_counter}"

    def _send(self, env: Envelope) -> None:
        self._seq += 1
        env.seq = self._seq
        self.network.send(encode_frame(env), self.node_id, env.target)

    def on_frame(self, frame: bytes, source: str) -> None:
        env = decode_frame(frame)
        self.frames_received += 1
        kind = env.kind
        if kind == "beacon":
            if self.on_beacon is not None:
                self.on_beacon(env)
        elif kind == "heartbeat":
            if self.on_heartbeat is not None:
                self.on_heartbeat(env)
        elif kind == "request":
            self._handle_request(env)
        elif kind == "response":
            self._handle_response(env)
        elif kind == "goal":
            self._handle_goal(env)
        elif kind == "feedback":
            handle = self._client_goals.get(env.correlates or "")
            if handle is not None:
                handle._feedback(env.payload)
        elif kind == "result":
            handle = self._client_goals.get(env.correlates or "")
            if handle is not None:
                handle._finish(env.payload.get("state", "failed"), env.payload)
                self._client_goals.pop(handle.goal_id, None)
        elif kind == "cancel":
            ctx = self._server_goals.get(env.correlates or "")
            if ctx is not None and not ctx.terminal:
                ctx.cancel_requested = True
                if ctx.on_cancel is not None:
                    ctx.on_cancel(ctx)
        elif kind == "publish":
            self._handle_publish(env)

    # -- beacons / heartbeats -------------------------------------------------------

    def send_beacon(self, payload: dict[str, Any]) -> None:
        self._send(Envelope(channel="networking", kind="beacon",
                            msg_id=self._next_msg_id(), source=self.node_id,
                            payload={**self.info.to_dict(), **payload}))

    def send_heartbeat(self) -> None:
        self._send(Envelope(channel="networking", kind="heartbeat",
                            msg_id=self._next_msg_id(), source=self.node_id,
                            payload={"node_id": self.node_id}))

    # -- services ----------------------------------------------------------------------

    def serve(self, name: str, handler: Callable[[dict[str, Any], str], Any],
              channel: str = "networking") -> None:
        self._service_handlers[name] = handler

    def call_service(self, target: str, name: str, payload: dict[str, Any],
                     timeout: float = 5.0, channel: str = "networking",
                     retry_interval: float | None = None) -> PendingCall:
        if target not in self.network.nodes:
            raise TargetUnknown(f"no node {target}", subject=target)
        msg_id = self._next_msg_id()
        call = PendingCall(self, msg_id, target)
        self._pending[msg_id] = call
        env = Envelope(channel=channel, kind="request", msg_id=msg_id,
                       source=self.node_id, target=target,
                       payload={"service": name, "args": payload})
        self._send(env)
        if retry_interval:
            def retransmit() -> None:
                if not call.done and not self.network.is_down(self.node_id):
                    # same msg_id: the peer's dedup keeps the effect single
                    self.network.send(encode_frame(env), self.node_id, target)
                    self.network.schedule(retry_interval, retransmit)
            self.network.schedule(retry_interval, retransmit)

        def expire() -> None:
            if not call.done:
                self._pending.pop(msg_id, None)
                call._resolve(error=Timeout(
                    f"service {name} on {target} timed out", subject=target))
        self.network.schedule(timeout, expire)
        return call

    def _handle_request(self, env: Envelope) -> None:
        key = (env.source, env.msg_id)
        cached = self._dedup.get(key)
        if cached is not None:
            self.network.send(cached, self.node_id, env.source)
            return
        name = env.payload.get("service", "")
        handler = self._service_handlers.get(name)
        if handler is None:
            body: dict[str, Any] = {"ok": False, "error": UnknownCapability(
                f"no service {name!r} on {self.node_id}",
                subject=self.node_id).to_dict()}
        else:
            try:
                value = handler(env.payload.get("args", {}), env.source)
                body = {"ok": True, "value": value}
            except LabError as exc:
                body = {"ok": False, "error": exc.to_dict()}
        self._seq += 1
        response = Envelope(channel=env.channel, kind="response",
                            msg_id=self._next_msg_id(), source=self.node_id,
                            target=env.source, correlates=env.msg_id,
                            payload=body, seq=self._seq)
        encoded = encode_frame(response)
        self._dedup[key] = encoded
        while len(self._dedup) > DEDUP_WINDOW:
            self._dedup.popitem(last=False)
        self.network.send(encoded, self.node_id, env.source)

    def _handle_response(self, env: Envelope) -> None:
        corr = env.correlates or ""
        call = self._pending.pop(corr, None)
        if call is not None:
            if env.payload.get("ok"):
                call._resolve(value=env.payload.get("value"))
            else:
                err_dict = env.payload.get("error") or {}
                remote = RemoteError(err_dict.get("message", "remote failure"),
                                     subject=env.source, remote=err_dict)
                remote.details["code"] = err_dict.get("code")
                call._resolve(error=remote)
            return
        # goal admission response
        handle = self._client_goals.get(corr)
        if handle is not None:
            if handle.state != "pending":
                return
            if env.payload.get("accepted"):
                handle._accept()
            else:
                reason = env.payload.get("reason", "goal rejected")
                code = env.payload.get("code", "goal_rejected")
                err: LabError
                if code == "unknown_capability":
                    err = UnknownCapability(reason, subject=env.source)
                else:
                    err = GoalRejected(reason, subject=env.source)
                handle._reject(err)
                self._client_goals.pop(corr, None)
            return
        if self.on_response is not None:
            self.on_response(env)

    # -- actions -------------------------------------------------------------------------

    def serve_action(self, capability: str,
                     on_goal: Callable[[GoalContext], None]) -> None:
        self._action_handlers[capability] = on_goal

    def _goal_status(self, args: dict[str, Any], source: str) -> dict[str, Any]:
        goal_id = args.get("goal_id", "")
        live = self._server_goals.get(goal_id)
        if live is not None:
            return {"known": True, "terminal": False, "state": live.state}
        done = self._goal_results.get(goal_id)
        if done is not None:
            return {"known": True, "terminal": True,
                    "state": done.get("state", "failed"), "payload": done}
        return {"known": False}

    def declared_actions(self) -> list[str]:
        return sorted(self._action_handlers)

    def send_goal(self, target: str, capability: str, params: dict[str, Any],
                  on_feedback: Callable[[dict[str, Any]], None] | None = None,
                  on_terminal: Callable[[ActionExecution], None] | None = None,
                  ) -> ActionExecution:
        if target not in self.network.nodes:
            raise TargetUnknown(f"no node {target}", subject=target)
        goal_id = self._next_msg_id()
        handle = ActionExecution(self, goal_id, target, capability)
        handle.on_feedback = on_feedback
        handle.on_terminal = on_terminal
        self._client_goals[goal_id] = handle
        self._send(Envelope(channel="action", kind="goal", msg_id=goal_id,
                            source=self.node_id, target=target,
                            payload={"capability": capability, "params": params}))
        return handle

    def cancel(self, handle: ActionExecution) -> None:
        if handle.terminal:
            return  # cancel on a terminal handle is a no-op
        self._send(Envelope(channel="action", kind="cancel",
                            msg_id=self._next_msg_id(), source=self.node_id,
                            target=handle.target, correlates=handle.goal_id))

    def _handle_goal(self, env: Envelope) -> None:
        capability = env.payload.get("capability", "")
        goal_id = env.msg_id
        if goal_id in self._server_goals:
            return  # duplicate goal frame
        handler = self._action_handlers.get(capability)

        def reply(accepted: bool, reason: str = "", code: str = "") -> None:
            self._send(Envelope(
                channel="action", kind="response", msg_id=self._next_msg_id(),
                source=self.node_id, target=env.source, correlates=goal_id,
                payload={"accepted": accepted, "reason": reason, "code": code}))

        if handler is None:
            reply(False, f"no action capability {capability!r}",
                  "unknown_capability")
            return
        ctx = GoalContext(self, goal_id, capability,
                          dict(env.payload.get("params", {})), env.source)
        self._server_goals[goal_id] = ctx
        try:
            reply(True)
            handler(ctx)
        except Exception as exc:  # a buggy handler must still terminate the goal
            if not ctx.terminal:
                ctx.fail(exc if isinstance(exc, LabError) else LabError(str(exc)))

    # -- topics ---------------------------------------------------------------------------

    def subscribe(self, topic: str,
                  callback: Callable[[dict[str, Any], str], None] | None = None,
                  source: str | None = None, depth: int = RING_DEPTH) -> Subscription:
        sub = Subscription(self, topic, callback, source, depth)
        self._subscriptions.append(sub)
        self._announce_subscriptions()
        return sub

    def _drop_subscription(self, sub: Subscription) -> None:
        if sub in self._subscriptions:
            self._subscriptions.remove(sub)
            self._announce_subscriptions()

    def _my_topics(self) -> list[str]:
        return sorted({s.topic for s in self._subscriptions})

    def _announce_subscriptions(self) -> None:
        self._send(Envelope(
            channel="networking", kind="publish", msg_id=self._next_msg_id(),
            source=self.node_id,
            payload={"topic": _SUBS_TOPIC, "topics": self._my_topics()}))

    def publish(self, topic: str, payload: dict[str, Any]) -> None:
        """Peer-to-peer fan-out: one targeted frame per subscribed peer, no
        relay through anything. Never blocks: receivers drop-oldest."""
        body = {"topic": topic, **payload}
        for peer in sorted(self._peer_subs):
            if topic in self._peer_subs[peer]:
                self._send(Envelope(channel="status", kind="publish",
                                    msg_id=self._next_msg_id(),
                                    source=self.node_id, target=peer,
                                    payload=body))
        # local subscribers see their own node's publishes directly
        for sub in self._subscriptions:
            if sub.topic == topic:
                self._seq += 1
                sub._offer(Envelope(channel="status", kind="publish",
                                    msg_id=self._next_msg_id(),
                                    source=self.node_id, payload=body,
                                    seq=self._seq))

    def _handle_publish(self, env: Envelope) -> None:
        topic = env.topic
        if topic == _SUBS_TOPIC:
            self._peer_subs[env.source] = set(env.payload.get("topics", []))
            return
        for sub in self._subscriptions:
            if sub.topic == topic:
                sub._offer(env)
