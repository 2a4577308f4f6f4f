"""Closed-loop catalyst-protection controller for the electrolyzer.

Runs on a compute node, consuming the TDS stream peer-to-peer and issuing
mode commands directly to the electrolyzer, so the loop keeps working with
the host down. Water quality above the threshold trips constant-voltage
protection; once readings hold below the threshold for the full hold time,
the preset constant-current mode is restored.
"""

from __future__ import annotations

from typing import Any

from ..bus.node import BusNode

DEFAULT_THRESHOLD_PPM = 1965.0
DEFAULT_HOLD_TIME_S = 10.0
DEFAULT_TICK_S = 0.1
DEFAULT_CC_MA = 1500
DEFAULT_CV_V = 1.82


class ElectrolyzerController:
    def __init__(self, bus: BusNode, electrolyzer: str, tds_topic: str,
                 threshold_ppm: float = DEFAULT_THRESHOLD_PPM,
                 hold_time_s: float = DEFAULT_HOLD_TIME_S,
                 tick_s: float = DEFAULT_TICK_S,
                 cc_ma: int = DEFAULT_CC_MA,
                 cv_v: float = DEFAULT_CV_V) -> None:
        self.bus = bus
        self.network = bus.network
        self.electrolyzer = electrolyzer
        self.threshold_ppm = threshold_ppm
        self.hold_time_s = hold_time_s
        self.cc_ma = cc_ma
        self.cv_v = cv_v
        self.mode = "CC"
        self.latest_ppm: float | None = None
        self._below_since: float | None = None
        self.commands: list[tuple[float, str, float]] = []
        bus.subscribe(tds_topic, self._on_tds)
        self.network.every(tick_s, self._control_tick, owner=bus.node_id)

    def _on_tds(self, payload: dict[str, Any], source: str) -> None:
        self.latest_ppm = float(payload["value"])

    def _command(self, mode: str, value: float) -> None:
        self.mode = mode
        self.commands.append((self.network.now, mode, value))
        if mode == "CV":
            self.bus.call_service(self.electrolyzer, "set_mode_cv",
                                  {"voltage": value}, timeout=2.0)
        else:
            self.bus.call_service(self.electrolyzer, "set_mode_cc",
                                  {"current": int(value)}, timeout=2.0)

    def _control_tick(self) -> None:
        ppm = self.latest_ppm
        if ppm is None:
            return
        if self.mode == "CC":
            if ppm > self.threshold_ppm:
                self._below_since = None
                self._command("CV", self.cv_v)
        else:  # CV: wait for sustained recovery
            if ppm > self.threshold_ppm:
                self._below_since = None
            else:
                if self._below_since is None:
                    self._below_since = self.network.now
                if self.network.now - self._below_since >= self.hold_time_s:
                    self._below_since = None
                    self._command("CC", float(self.cc_ma))
