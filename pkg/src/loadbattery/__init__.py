"""Battery models of deferrable load fleets: capacity bounds, allocations and simulation."""

from .model import (
    UNBOUNDED,
    BatterySpec,
    DerivedCapacity,
    DomainError,
    LoadClass,
    NormalizedBattery,
    derive_capacity,
    denormalize,
    normalize,
)
from .capacity import area_check, frontier_curve, max_wunder_on_frontier, tradeoff_feasible
from .signals import Trajectory, adversarial_suite, extremal_probe, membership_check
from .simulate import PolicyKind, SimConfig, SimResult, run

__version__ = "0.1.0"

__all__ = [
    "UNBOUNDED",
    "BatterySpec",
    "DerivedCapacity",
    "DomainError",
    "LoadClass",
    "NormalizedBattery",
    "PolicyKind",
    "SimConfig",
    "SimResult",
    "Trajectory",
    "adversarial_suite",
    "area_check",
    "derive_capacity",
    "denormalize",
    "extremal_probe",
    "frontier_curve",
    "max_wunder_on_frontier",
    "membership_check",
    "normalize",
    "run",
    "tradeoff_feasible",
]
