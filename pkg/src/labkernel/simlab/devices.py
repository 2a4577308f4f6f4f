"""Simulated devices bound to their driver manifests.

Each device is a DeviceAgent whose action/service handlers cover exactly
the capabilities its manifest declares, no more: goals for anything else
are rejected at the bus. Physics advance analytically on the virtual
clock (first-order lag for the heater, volumetric rates for pumps), and
every stream capability publishes on ``<node_id>/<capability>`` at its
declared rate.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any

from ..bus.network import SimNetwork
from ..bus.node import GoalContext
from ..host import DeviceAgent

MANIFEST_DIR = Path(__file__).resolve().parent.parent.parent.parent \
    / "fixtures" / "manifests"


def load_manifest(name: str) -> str:
    return (MANIFEST_DIR / f"{name}.driver").read_text(encoding="utf-8")


def stream_topic(node_id: str, capability: str) -> str:
    return f"{node_id}/{capability}"


class SimDevice(DeviceAgent):
    """Manifest-faithful base: wires handlers and stream timers."""

    manifest_name = ""

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        text = params.pop("manifest_text", None) or load_manifest(self.manifest_name)
        super().__init__(network, node_id, [text],
                         role=params.pop("role", "device"),
                         protocol_version=params.pop("protocol_version", "1"),
                         enroll_under=params.pop("enroll_under", None),
                         register_as=params.pop("tree_name", None),
                         device_config=self.registration_config())
        self.params = params
        self.descriptor = self.descriptors[0]
        self._bind_capabilities()

    def registration_config(self) -> dict[str, Any]:
        """Device-specific static spec merged into the registered node's
        config (e.g. a pump's stroke)."""
        return {}

    def _bind_capabilities(self) -> None:
        declared_actions = set()
        for cap in self.descriptor.capabilities:
            if cap.channel == "action":
                declared_actions.add(cap.name)
                handler = getattr(self, f"goal_{cap.name}", None)
                if handler is not None:
                    self.bus.serve_action(cap.name, handler)
            elif cap.channel == "service":
                handler = getattr(self, f"service_{cap.name}", None)
                if handler is not None:
                    self.bus.serve(cap.name, handler)
            elif cap.channel == "stream":
                sampler = getattr(self, f"sample_{cap.name}", None)
                if sampler is not None:
                    self._arm_stream(cap.name, cap.rate_hz or 10, sampler)
        undeclared = set(self.bus.declared_actions()) - declared_actions
        assert not undeclared, f"handlers beyond the manifest: {undeclared}"

    def _arm_stream(self, capability: str, rate_hz: int, sampler) -> None:
        topic = stream_topic(self.node_id, capability)

        def publish() -> None:
            value = sampler()
            if value is not None:
                self.bus.publish(topic, {"value": value, "t": self.network.now})

        self.network.every(1.0 / rate_hz, publish, owner=self.node_id)

    def finish_after(self, ctx: GoalContext, duration: float,
                     feedback_every: float | None, make_feedback,
                     result: dict[str, Any] | None = None,
                     on_success=None, on_cancel=None) -> None:
        """Run a goal for ``duration`` sim-seconds with periodic feedback.
        on_success fires exactly when the goal completes (material lands when
        the motion stops, not before)."""
        started = self.network.now

        def on_cancel_frame(c: GoalContext) -> None:
            if not c.terminal:
                if on_cancel is not None:
                    on_cancel()
                c.cancelled({"at": self.network.now - started})

        ctx.on_cancel = on_cancel_frame

        def tick() -> None:
            if ctx.terminal:
                return
            elapsed = self.network.now - started
            if elapsed >= duration:
                if on_success is not None:
                    on_success()
                ctx.succeed(result or {})
                return
            if make_feedback is not None:
                ctx.publish_feedback(make_feedback(elapsed / max(duration, 1e-9)))
            self.network.schedule(min(feedback_every or duration, duration), tick)

        self.network.schedule(min(feedback_every or duration, duration), tick)


class SimHeaterStirrer(SimDevice):
    """First-order thermal lag: T(t+dt) = Tset + (T - Tset) * exp(-dt / tau)."""

    manifest_name = "heater_stirrer"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.tau = params.get("tau_s", 5.0)
        self.temperature = params.get("ambient_c", 20.0)
        self.setpoint = self.temperature
        self._prev_setpoint = self.setpoint
        self.stir_rpm = 0
        self._last_t = 0.0
        super().__init__(network, node_id, **params)

    def _advance(self) -> None:
        dt = self.network.now - self._last_t
        if dt > 0:
            gap = self.temperature - self.setpoint
            self.temperature = self.setpoint + gap * math.exp(-dt / self.tau)
            self._last_t = self.network.now

    def sample_get_temperature(self) -> float:
        self._advance()
        return round(self.temperature, 4)

    def service_set_stir_speed(self, args: dict[str, Any], source: str) -> bool:
        self.stir_rpm = int(args.get("speed", 0))
        return True

    def goal_heat_to(self, ctx: GoalContext) -> None:
        self._advance()
        self._prev_setpoint = self.setpoint
        self.setpoint = float(ctx.params["target"])

        def on_cancel(c: GoalContext) -> None:
            if not c.terminal:
                self._advance()
                self.setpoint = self._prev_setpoint  # revert on cancel
                c.cancelled({"reverted_to": self.setpoint})

        ctx.on_cancel = on_cancel

        def tick() -> None:
            if ctx.terminal:
                return
            self._advance()
            ctx.publish_feedback({"current": round(self.temperature, 4)})
            if abs(self.temperature - self.setpoint) < 0.5:
                ctx.succeed({"final": round(self.temperature, 4)})
            else:
                self.network.schedule(0.5, tick)

        self.network.schedule(0.5, tick)


class SimSyringePump(SimDevice):
    manifest_name = "syringe_pump"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.stroke_ul = params.get("stroke_ul", 10_000)
        self.rate_ul_s = params.get("rate_ul_s", 5_000)
        self.barrel_ul = 0
        super().__init__(network, node_id, **params)

    def registration_config(self) -> dict[str, Any]:
        return {"stroke_ul": self.stroke_ul}

    def sample_get_plunger_position(self) -> float:
        return round(100.0 * self.barrel_ul / self.stroke_ul, 3)

    def _move(self, ctx: GoalContext, direction: int) -> None:
        volume = int(ctx.params["volume"])
        if volume <= 0 or volume > self.stroke_ul:
            ctx.fail(f"volume {volume} outside stroke {self.stroke_ul}")
            return
        duration = volume / self.rate_ul_s

        def apply() -> None:
            self.barrel_ul = max(0, min(self.stroke_ul,
                                        self.barrel_ul + direction * volume))

        self.finish_after(ctx, duration, feedback_every=duration / 2,
                          make_feedback=lambda frac: {"moved": int(volume * frac)},
                          result={"moved": volume}, on_success=apply)

    def goal_aspirate(self, ctx: GoalContext) -> None:
        self._move(ctx, +1)

    def goal_dispense(self, ctx: GoalContext) -> None:
        self._move(ctx, -1)


class SimValve(SimDevice):
    manifest_name = "multiport_valve"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.position = 1
        self.switch_count = 0
        super().__init__(network, node_id, **params)

    def sample_get_position(self) -> int:
        return self.position

    def service_set_position(self, args: dict[str, Any], source: str) -> bool:
        self.position = int(args["port"])
        self.switch_count += 1
        return True


class SimTdsSensor(SimDevice):
    """Publishes a scripted trace: list of (t, ppm) breakpoints, linearly
    interpolated, clamped at the ends."""

    manifest_name = "tds_sensor"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.trace: list[tuple[float, float]] = [
            (float(t), float(v)) for t, v in params.get("trace", [(0.0, 100.0)])]
        super().__init__(network, node_id, **params)

    def value_at(self, t: float) -> float:
        trace = self.trace
        if t <= trace[0][0]:
            return trace[0][1]
        for (t0, v0), (t1, v1) in zip(trace, trace[1:]):
            if t0 <= t <= t1:
                frac = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
                return v0 + (v1 - v0) * frac
        return trace[-1][1]

    def sample_get_tds(self) -> float:
        return round(self.value_at(self.network.now), 3)


class SimElectrolyzer(SimDevice):
    """CC fixes current; CV fixes voltage with I = V / R_eff, where R_eff
    drifts upward slightly with water TDS. Gas flow tracks current."""

    manifest_name = "electrolyzer"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.mode = "CC"
        self.cc_setpoint_ma = params.get("cc_setpoint_ma", 1500)
        self.cv_setpoint_v = 0.0
        self.r_eff_base = params.get("r_eff_ohm", 2.638)
        self.r_tds_slope = params.get("r_tds_slope", 4.0e-6)  # ohm per ppm
        self.tds_baseline = params.get("tds_baseline", 100.0)
        self.gas_per_ma = params.get("gas_per_ma", 0.001)
        self.tds_ppm = self.tds_baseline
        self.mode_log: list[tuple[float, str, float]] = [
            (0.0, "CC", float(self.cc_setpoint_ma))]
        self.current_log: list[tuple[float, float]] = []
        tds_topic = params.pop("tds_topic", None)
        super().__init__(network, node_id, **params)
        if tds_topic:
            self.bus.subscribe(tds_topic,
                               lambda p, s: setattr(self, "tds_ppm", p["value"]))

    def r_eff(self) -> float:
        drift = self.r_tds_slope * max(0.0, self.tds_ppm - self.tds_baseline)
        return self.r_eff_base + drift

    def current_ma(self) -> float:
        if self.mode == "CC":
            return float(self.cc_setpoint_ma)
        return 1000.0 * self.cv_setpoint_v / self.r_eff()

    def sample_get_current(self) -> float:
        ma = round(self.current_ma(), 3)
        self.current_log.append((self.network.now, ma))
        return ma

    def sample_get_gas_flow(self) -> float:
        return round(self.gas_per_ma * self.current_ma(), 5)

    def service_set_mode_cc(self, args: dict[str, Any], source: str) -> bool:
        self.mode = "CC"
        self.cc_setpoint_ma = int(args["current"])
        self.mode_log.append((self.network.now, "CC", float(self.cc_setpoint_ma)))
        return True

    def service_set_mode_cv(self, args: dict[str, Any], source: str) -> bool:
        self.mode = "CV"
        self.cv_setpoint_v = float(args["voltage"])
        self.mode_log.append((self.network.now, "CV", self.cv_setpoint_v))
        return True


class SimLiquidHandler(SimDevice):
    """Unit-operation firmware: transfer / add / remove / mix as timed
    actions; the host's transaction does the bookkeeping."""

    manifest_name = "liquid_handler"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.ul_per_s = params.get("ul_per_s", 1000)
        self.op_log: list[tuple[float, str, dict[str, Any]]] = []
        super().__init__(network, node_id, **params)

    def _run_op(self, ctx: GoalContext, name: str) -> None:
        volume = int(ctx.params.get("volume", ctx.params.get("volume_ul", 0)))
        cycles = int(ctx.params.get("cycles", 1))
        duration = max(0.2, cycles * volume / self.ul_per_s)
        self.op_log.append((self.network.now, name, dict(ctx.params)))
        self.finish_after(ctx, duration, feedback_every=duration / 2,
                          make_feedback=lambda frac: {"done": int(volume * frac)},
                          result={"done": volume})

    def goal_transfer(self, ctx: GoalContext) -> None:
        self._run_op(ctx, "transfer")

    def goal_add(self, ctx: GoalContext) -> None:
        self._run_op(ctx, "add")

    def goal_remove(self, ctx: GoalContext) -> None:
        self._run_op(ctx, "remove")

    def goal_mix(self, ctx: GoalContext) -> None:
        self._run_op(ctx, "mix")


class SimRotovap(SimDevice):
    manifest_name = "rotovap"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.bath_c = params.get("bath_c", 40.0)
        self.runs = 0
        super().__init__(network, node_id, **params)

    def sample_get_bath_temperature(self) -> float:
        return self.bath_c

    def goal_evaporate(self, ctx: GoalContext) -> None:
        duration = float(ctx.params.get("duration", 5))

        def done() -> None:
            self.runs += 1

        self.finish_after(ctx, duration, feedback_every=duration / 4,
                          make_feedback=lambda frac: {"progress": round(frac * 100, 1)},
                          result={"evaporated": True}, on_success=done)


class SimAgv(SimDevice):
    manifest_name = "agv"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.travel_s = params.get("travel_s", 3.0)
        self.location = params.get("home", "dock")
        super().__init__(network, node_id, **params)

    def sample_get_pose(self) -> str:
        return self.location

    def goal_move_to(self, ctx: GoalContext) -> None:
        destination = ctx.params.get("station", "dock")

        def arrive() -> None:
            self.location = destination

        self.finish_after(ctx, self.travel_s, feedback_every=self.travel_s / 3,
                          make_feedback=lambda frac: {"progress": round(frac * 100, 1)},
                          result={"at": destination}, on_success=arrive)


class SimStation(SimDevice):
    """Encapsulated workstation (glovebox / assembly / testing): one timed
    run_step action and a synchronous dose service."""

    manifest_name = "station"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        self.step_s = params.get("step_s", 1.0)
        self.steps_run: list[str] = []
        super().__init__(network, node_id, **params)

    def goal_run_step(self, ctx: GoalContext) -> None:
        label = ctx.params.get("step", "")

        def record() -> None:
            self.steps_run.append(label)

        duration = float(ctx.params.get("duration_s", self.step_s))
        self.finish_after(ctx, duration, feedback_every=duration / 2,
                          make_feedback=lambda frac: {"progress": round(frac * 100, 1)},
                          result={"step": label}, on_success=record)

    def service_dose(self, args: dict[str, Any], source: str) -> bool:
        return True

    def sample_get_status(self) -> str:
        return "idle"


class SimComputeNode(SimDevice):
    manifest_name = "compute_node"

    def __init__(self, network: SimNetwork, node_id: str, **params: Any) -> None:
        super().__init__(network, node_id, role="compute", **params)

    def service_run_model(self, args: dict[str, Any], source: str) -> str:
        return f"model({args.get('input', '')})"

    def sample_get_load(self) -> float:
        return 1.0
