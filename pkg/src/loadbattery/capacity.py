"""Necessary conditions for a battery to be realizable by a load fleet.

Two routes decide the same question.  The closed-form quadratic test
(:func:`tradeoff_feasible`) applies on the region where its hypotheses hold;
the area test (:func:`area_check`) bounds the parallelogram between the two
critical profiles by the slack left over in the volume and applies everywhere.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    BatterySpec,
    DomainError,
    LoadClass,
    NormalizedBattery,
    _lower,
    _upper,
    check_within_max,
    derive_capacity,
    normalize,
    time_to_empty,
    time_to_full,
)

GUARD_SAMPLES = 1024


class Reason(enum.Enum):
    OK = "ok"
    WBAR_BELOW_1_MINUS_C = "wbar_below_1_minus_c"
    WUNDER_BELOW_1_MINUS_C = "wunder_below_1_minus_c"
    SUM_BELOW_C = "sum_below_c"


class Verdict(enum.Enum):
    SATISFIES_NECESSARY = "satisfies_necessary"
    VIOLATES = "violates"
    OUTSIDE_REGION = "outside_region"


@dataclass(frozen=True)
class RegionFlag:
    in_region_S: bool
    reason: Reason


@dataclass(frozen=True)
class AreaCheck:
    """Outcome of the area test, in normalized units (energy / C_max)."""

    chi_star: float
    sup_a: float
    budget: float
    satisfied: bool
    interval_I: tuple[float, float] | None
    witness: float | None = None  # normalized stored energy of the worst case

    def __bool__(self):
        return self.satisfied


@dataclass(frozen=True)
class DeficiencyReport:
    integral_delta_bar: float
    integral_delta_under: float
    budget: float
    feasible: bool


def region_flag(nb: NormalizedBattery) -> RegionFlag:
    c, wb, wu = nb.c, nb.w_bar, nb.w_under
    if wb < 1.0 - c:
        return RegionFlag(False, Reason.WBAR_BELOW_1_MINUS_C)
    if wu < 1.0 - c:
        return RegionFlag(False, Reason.WUNDER_BELOW_1_MINUS_C)
    if wb + wu < c:
        return RegionFlag(False, Reason.SUM_BELOW_C)
    return RegionFlag(True, Reason.OK)


def quadratic_margin(nb: NormalizedBattery) -> float:
    """``4 w_bar w_under (1-c) - (w_bar + w_under - c)**2``; non-negative when the test passes."""
    c, wb, wu = nb.c, nb.w_bar, nb.w_under
    return 4.0 * wb * wu * (1.0 - c) - (wb + wu - c) ** 2


def tradeoff_feasible(nb: NormalizedBattery) -> Verdict:
    if not region_flag(nb).in_region_S:
        return Verdict.OUTSIDE_REGION
    c, wb, wu = nb.c, nb.w_bar, nb.w_under
    if (wb + wu - c) ** 2 <= 4.0 * wb * wu * (1.0 - c):
        return Verdict.SATISFIES_NECESSARY
    return Verdict.VIOLATES


def _a(chi, c, wb, wu):
    with np.errstate(over="ignore", divide="ignore"):
        b = 1.0 - (c / 2.0 + chi) / wu
        h = 1.0 - (c / 2.0 - chi) / wb
    return np.maximum(b, 0.0) * np.maximum(h, 0.0)


def normalized_area_check(nb: NormalizedBattery, guard: int = GUARD_SAMPLES) -> AreaCheck:
    """Largest normalized parallelogram area over stored-energy levels vs. ``1 - c``.

    A zero rate makes the matching extremal outcome vacuous, so the test
    passes trivially.
    """
    c, wb, wu = nb.c, nb.w_bar, nb.w_under
    budget = 1.0 - c
    if wb == 0.0 or wu == 0.0:
        return AreaCheck(math.nan, 0.0, budget, True, None)
    chi_star = (wu - wb) / 2.0
    lo = max(-c / 2.0, c / 2.0 - wb)
    hi = min(c / 2.0, wu - c / 2.0)
    if lo > hi:
        return AreaCheck(chi_star, 0.0, budget, True, None)

    # a is a concave quadratic on the interval; its sup sits at the clipped vertex
    cands = np.array([min(max(chi_star, lo), hi), lo, hi])
    vals = _a(cands, c, wb, wu)
    scan = np.linspace(-c / 2.0, c / 2.0, guard)
    svals = _a(scan, c, wb, wu)
    if svals.max() > vals.max():
        sup, where = float(svals.max()), float(scan[np.argmax(svals)])
    else:
        sup, where = float(vals.max()), float(cands[np.argmax(vals)])
    ok = sup <= budget
    return AreaCheck(chi_star, sup, budget, ok, (lo, hi), None if ok else where)


def area_check(lc: LoadClass, spec: BatterySpec) -> AreaCheck:
    check_within_max(spec, lc)
    cap = derive_capacity(lc)
    if lc.unbounded:
        raise DomainError("the area test needs a finite P_bar")
    if spec.W_bar == 0.0 or spec.W_under == 0.0 or cap.C_max == 0.0:
        return AreaCheck(math.nan, 0.0, 1.0, True, None)
    nb = normalize(
        BatterySpec(min(spec.C, cap.C_max), min(spec.W_bar, cap.W_bar_max),
                    min(spec.W_under, cap.W_under_max)),
        lc,
    )
    return normalized_area_check(nb)


def area_condition_holds(lc: LoadClass, spec: BatterySpec) -> tuple[bool, float | None]:
    """Area test in absolute units; on failure also returns the witness stored energy."""
    res = area_check(lc, spec)
    if res.satisfied:
        return True, None
    return False, res.witness * derive_capacity(lc).C_max


def area_function(lc: LoadClass, spec: BatterySpec, chi) -> np.ndarray:
    """Absolute area ``max(0, base) * max(0, height)`` at stored energy ``chi``."""
    cap = derive_capacity(lc)
    chi = np.asarray(chi, dtype=float)
    base = (1.0 - lc.P0 / lc.P_bar) * lc.T * (
        1.0 - (spec.C / 2.0 + chi) / (spec.W_under / cap.W_under_max * cap.C_max)
    )
    height = lc.E * (1.0 - (spec.C / 2.0 - chi) / (spec.W_bar / cap.W_bar_max * cap.C_max))
    return np.maximum(base, 0.0) * np.maximum(height, 0.0)


def max_wunder_on_frontier(c: float, w_bar: float, tol: float = 1e-12, max_iter: int = 60) -> float:
    """Largest normalized discharge rate that still passes the area test."""
    if not (0.0 <= c <= 1.0 and 0.0 <= w_bar <= 1.0):
        raise DomainError("c and w_bar must lie in [0, 1]")
    if w_bar == 0.0 or c == 0.0:
        # both degenerate cases pass for every w_under
        return 1.0

    def holds(wu):
        return normalized_area_check(NormalizedBattery(c, w_bar, wu)).satisfied

    if holds(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if holds(mid):
            lo = mid
        else:
            hi = mid
    return lo


def frontier_curve(c: float, n_points: int) -> list[tuple[float, float]]:
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    return [(float(wb), max_wunder_on_frontier(c, float(wb))) for wb in np.linspace(0.0, 1.0, n_points)]


def critical_profiles(lc: LoadClass, spec: BatterySpec, chi: float, sigma):
    """Lowest allocation that can still absorb a full charge, highest that can still empty.

    Returns ``(z_bar, z_under)``.  A zero rate yields ``-inf`` / ``E`` so the
    matching deficiency is zero.
    """
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0.0) or np.any(s > lc.T):
        raise DomainError(f"age must lie in [0, T={lc.T}]")
    if lc.unbounded:
        raise DomainError("critical profiles need a finite P_bar")
    tc = time_to_full(spec, chi)
    td = time_to_empty(spec, chi)
    z_bar = np.full_like(s, -math.inf) if math.isinf(tc) else _upper(lc, s + tc) - lc.P_bar * tc
    z_under = np.full_like(s, lc.E) if math.isinf(td) else _lower(lc, s + td)
    if np.ndim(sigma) == 0:
        return float(z_bar), float(z_under)
    return z_bar, z_under


def _positive_part_integral(grid: np.ndarray, f: np.ndarray) -> float:
    """Exact integral of max(0, f) for f linear between grid points."""
    h = np.diff(grid)
    f0, f1 = f[:-1], f[1:]
    both = (f0 >= 0) & (f1 >= 0)
    total = np.sum(0.5 * h[both] * (f0[both] + f1[both]))
    mixed = (f0 > 0) != (f1 > 0)
    mixed &= ~both
    if np.any(mixed):
        a, b, hm = f0[mixed], f1[mixed], h[mixed]
        pos = np.maximum(a, b)
        total += np.sum(hm * pos * pos / (2.0 * (np.abs(a) + np.abs(b))))
    return float(total)


def deficiency_report(lc: LoadClass, spec: BatterySpec, chi: float, alloc) -> DeficiencyReport:
    """Smallest deficiency integrals compatible with ``alloc`` at stored energy ``chi``."""
    if alloc.lc != lc:
        raise DomainError("allocation belongs to a different load class")
    cap = derive_capacity(lc)
    tc = time_to_full(spec, chi)
    td = time_to_empty(spec, chi)
    kinks = []
    if math.isfinite(tc):
        kinks += [lc.E / lc.P_bar - tc]
    if math.isfinite(td):
        kinks += [lc.T - lc.E / lc.P_bar - td, lc.T - td]
    kinks = np.asarray(kinks, dtype=float)
    grid = np.unique(np.concatenate([alloc.grid, kinks[(kinks > 0) & (kinks < lc.T)]]))
    x = np.interp(grid, alloc.grid, alloc.values)
    z_bar, z_under = critical_profiles(lc, spec, chi, grid)
    d_bar = 0.0 if math.isinf(tc) else _positive_part_integral(grid, z_bar - x)
    d_under = 0.0 if math.isinf(td) else _positive_part_integral(grid, x - z_under)
    budget = lc.T * (cap.C_max - spec.C) / 2.0
    slack = 1e-12 * max(1.0, lc.T * lc.E)
    return DeficiencyReport(d_bar, d_under, budget, d_bar <= budget + slack and d_under <= budget + slack)
