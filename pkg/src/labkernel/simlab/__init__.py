"""Deterministic simulated device fleet and scenario runner."""

from .devices import (  # noqa: F401
    SimAgv,
    SimComputeNode,
    SimElectrolyzer,
    SimHeaterStirrer,
    SimLiquidHandler,
    SimRotovap,
    SimStation,
    SimSyringePump,
    SimTdsSensor,
    SimValve,
    stream_topic,
)
from .controller import ElectrolyzerController  # noqa: F401
from .scenario import Scenario, ScenarioResult, run_scenario  # noqa: F401
