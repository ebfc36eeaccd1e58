"""Load-class parameters, battery triples and the per-age energy envelopes.

Units are abstract: energy, time, and power = energy/time.  A load class with
an unbounded power limit is built with ``P_bar=UNBOUNDED``; every formula
below has an explicit branch for it instead of relying on a large float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNBOUNDED = math.inf


class DomainError(ValueError):
    """An argument lies outside the domain where a quantity is defined."""


@dataclass(frozen=True)
class LoadClass:
    """Homogeneous deferrable load: demand ``E`` within ``T`` at power <= ``P_bar``."""

    E: float
    T: float
    P_bar: float = UNBOUNDED

    def __post_init__(self):
        if not (self.E > 0 and math.isfinite(self.E)):
            raise DomainError(f"E must be positive and finite, got {self.E}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DomainError(f"T must be positive and finite, got {self.T}")
        if not self.P_bar >= self.P0:
            raise DomainError(
                f"P_bar={self.P_bar} is below the nominal rate E/T={self.P0}; load class infeasible"
            )

    @property
    def P0(self) -> float:
        return self.E / self.T

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.P_bar)


@dataclass(frozen=True)
class DerivedCapacity:
    C_max: float
    W_bar_max: float
    W_under_max: float

    def as_spec(self) -> "BatterySpec":
        return BatterySpec(self.C_max, self.W_bar_max, self.W_under_max)


@dataclass(frozen=True)
class BatterySpec:
    """Ideal battery: volume ``C``, charge rate ``W_bar``, discharge rate ``W_under``.

    Rates may be ``UNBOUNDED`` only for the P_bar -> infinity limit battery.
    """

    C: float
    W_bar: float
    W_under: float

    def __post_init__(self):
        for name in ("C", "W_bar", "W_under"):
            v = getattr(self, name)
            if not v >= 0 or math.isnan(v):
                raise DomainError(f"battery {name} must be non-negative, got {v}")
        if not math.isfinite(self.C):
            raise DomainError("battery volume must be finite")

    def __le__(self, other: "BatterySpec") -> bool:
        return self.C <= other.C and self.W_bar <= other.W_bar and self.W_under <= other.W_under


@dataclass(frozen=True)
class NormalizedBattery:
    c: float
    w_bar: float
    w_under: float

    def __post_init__(self):
        for name in ("c", "w_bar", "w_under"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"normalized {name} must lie in [0, 1], got {v}")


def derive_capacity(lc: LoadClass) -> DerivedCapacity:
    """The componentwise-largest battery any policy could realize."""
    if lc.unbounded:
        return DerivedCapacity(lc.E, UNBOUNDED, lc.P0)
    return DerivedCapacity(lc.E * (1.0 - lc.P0 / lc.P_bar), lc.P_bar - lc.P0, lc.P0)


def _check_sigma(lc: LoadClass, sigma):
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0.0) or np.any(s > lc.T) or np.any(np.isnan(s)):
        raise DomainError(f"age must lie in [0, T={lc.T}]")
    return s


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def upper_envelope(lc: LoadClass, sigma):
    """Energy of a load that has consumed at full power since arrival."""
    s = _check_sigma(lc, sigma)
    return _out(_upper(lc, s), sigma)


def lower_envelope(lc: LoadClass, sigma):
    """Energy of a load that defers consumption for as long as possible."""
    s = _check_sigma(lc, sigma)
    return _out(_lower(lc, s), sigma)


def nominal_energy(lc: LoadClass, sigma):
    s = _check_sigma(lc, sigma)
    return _out(lc.P0 * s, sigma)


def _upper(lc, s):
    # valid for any s >= 0, saturates at E past the window
    if lc.unbounded:
        return np.where(s > 0.0, lc.E, 0.0)
    return np.clip(lc.P_bar * s, 0.0, lc.E)


def _lower(lc, s):
    # extended past T with the value E
    if lc.unbounded:
        return np.where(s >= lc.T, lc.E, 0.0)
    return np.clip(lc.P_bar * s - lc.P_bar * lc.T + lc.E, 0.0, lc.E)


def breakpoints(lc: LoadClass) -> np.ndarray:
    """Ages where the envelopes change slope, together with 0 and T."""
    pts = [0.0, lc.T]
    if not lc.unbounded:
        pts += [lc.E / lc.P_bar, lc.T - lc.E / lc.P_bar]
    return np.unique(np.clip(pts, 0.0, lc.T))


def breakpoint_grid(lc: LoadClass, n: int = 2048, extra=()) -> np.ndarray:
    """Uniform grid on [0, T] with ``n`` intervals plus every envelope breakpoint."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = np.linspace(0.0, lc.T, n + 1)
    extra = np.asarray(list(extra), dtype=float)
    extra = extra[(extra >= 0.0) & (extra <= lc.T)]
    return np.unique(np.concatenate([grid, breakpoints(lc), extra]))


def charge_slack(lc: LoadClass, x, sigma):
    """Longest time a load with energy ``x`` at age ``sigma`` can keep consuming at P_bar."""
    x, s = _check_allocation(lc, x, sigma)
    if lc.unbounded:
        return _out(np.zeros_like(x), sigma)
    return _out((lc.E - x) / lc.P_bar, sigma)


def discharge_slack(lc: LoadClass, x, sigma):
    """Longest time the same load can stay idle; complements the charge slack to T - sigma."""
    x, s = _check_allocation(lc, x, sigma)
    cs = np.zeros_like(x) if lc.unbounded else (lc.E - x) / lc.P_bar
    return _out(lc.T - s - cs, sigma)


def _check_allocation(lc, x, sigma, tol=1e-9):
    s = _check_sigma(lc, sigma)
    x = np.asarray(x, dtype=float)
    lo, hi = _lower(lc, s), _upper(lc, s)
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise DomainError("energy lies outside the envelopes at this age")
    return np.broadcast_arrays(x, s)


def _check_chi(spec: BatterySpec, chi: float, tol: float = 1e-12):
    half = spec.C / 2.0
    if not -half - tol <= chi <= half + tol:
        raise DomainError(f"stored energy {chi} outside [{-half}, {half}]")


def time_to_full(spec: BatterySpec, chi: float) -> float:
    """Duration the battery can keep charging at ``W_bar`` from ``chi``."""
    _check_chi(spec, chi)
    if spec.W_bar == 0.0:
        return math.inf
    return max(spec.C / 2.0 - chi, 0.0) / spec.W_bar


def time_to_empty(spec: BatterySpec, chi: float) -> float:
    _check_chi(spec, chi)
    if spec.W_under == 0.0:
        return math.inf
    return max(spec.C / 2.0 + chi, 0.0) / spec.W_under


def normalize(spec: BatterySpec, lc: LoadClass) -> NormalizedBattery:
    cap = derive_capacity(lc)
    if lc.unbounded or cap.C_max == 0.0 or cap.W_bar_max == 0.0:
        raise DomainError("normalization needs a finite P_bar strictly above E/T")
    return NormalizedBattery(
        spec.C / cap.C_max, spec.W_bar / cap.W_bar_max, spec.W_under / cap.W_under_max
    )


def denormalize(nb: NormalizedBattery, lc: LoadClass) -> BatterySpec:
    cap = derive_capacity(lc)
    if lc.unbounded or cap.C_max == 0.0 or cap.W_bar_max == 0.0:
        raise DomainError("normalization needs a finite P_bar strictly above E/T")
    return BatterySpec(nb.c * cap.C_max, nb.w_bar * cap.W_bar_max, nb.w_under * cap.W_under_max)


def check_within_max(spec: BatterySpec, lc: LoadClass, rtol: float = 1e-12) -> None:
    """Raise if ``spec`` exceeds the maximal battery in any component, naming it."""
    cap = derive_capacity(lc)
    for name, v, vmax in (
        ("C", spec.C, cap.C_max),
        ("W_bar", spec.W_bar, cap.W_bar_max),
        ("W_under", spec.W_under, cap.W_under_max),
    ):
        if v > vmax * (1.0 + rtol) + rtol:
            raise DomainError(f"battery {name}={v} exceeds its maximum {vmax}")
