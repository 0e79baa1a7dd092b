"""Spontaneous event synchronization for heterogeneous sensor networks."""
from .clockmodel import (
    ClockModel,
    GlobalTime,
    LocalTicks,
    calibrate_from_table,
    local_elapsed,
    preset,
    true_duration_of_timer,
)
from .harness import analytic_oracle, run_experiment, summarize
from .netsim import observe_fires, run
from .scenario import Scenario, canonical, load_scenario, validate

__version__ = "0.1.0"
