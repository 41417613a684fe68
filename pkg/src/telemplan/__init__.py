"""Query planning and per-window register remapping for switch-assisted telemetry."""
from .bootstrap import BootstrapPlan, Register, RegisterConfig, SwitchConfig
from .query import OpRef, QuerySpec, RefinementPlan
from .workload import CostEntry, CostMatrix

__all__ = ["BootstrapPlan", "CostEntry", "CostMatrix", "OpRef", "QuerySpec", "RefinementPlan",
           "Register", "RegisterConfig", "SwitchConfig"]
__version__ = "0.1.0"
