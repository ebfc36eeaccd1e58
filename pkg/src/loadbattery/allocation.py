"""Fluid-limit energy allocations over load age.

A profile gives the energy ``x(sigma)`` already delivered to the loads of age
``sigma`` in a continuum fleet.  Profiles are piecewise linear between grid
points; for an unbounded power limit a repeated grid point encodes a jump.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .csvio import format_row
from .model import (
    DomainError,
    LoadClass,
    _lower,
    _upper,
    breakpoint_grid,
    derive_capacity,
)

GRID_INTERVALS = 2048
BISECT_ITERS = 60
BISECT_TOL = 0.0  # bisect to float resolution so fleets start exactly at the target
ENVELOPE_TOL = 1e-9

CHARGE_GREEDY = "charge_greedy"
DISCHARGE_GREEDY = "discharge_greedy"
SPLIT_AGE_UNBOUNDED = "split_age_unbounded"
FLUID_POLICIES = (CHARGE_GREEDY, DISCHARGE_GREEDY, SPLIT_AGE_UNBOUNDED)


class InfeasibleEvent(Exception):
    """The fleet cannot deliver the requested aggregate power."""

    def __init__(self, shortfall: float, message: str = ""):
        super().__init__(message or f"infeasible aggregate request, shortfall {shortfall:.3g}")
        self.shortfall = shortfall


@dataclass(frozen=True, eq=False)
class AllocationProfile:
    lc: LoadClass
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        x = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", x)
        lc = self.lc
        if g.ndim != 1 or g.shape != x.shape or g.size < 2:
            raise DomainError("grid and values must be 1-D arrays of equal length >= 2")
        d = np.diff(g)
        if lc.unbounded:
            if np.any(d < 0):
                raise DomainError("grid must be non-decreasing")
        elif np.any(d <= 0):
            raise DomainError("grid must be strictly increasing")
        if abs(g[0]) > 1e-12 or abs(g[-1] - lc.T) > 1e-12 * lc.T:
            raise DomainError("grid must cover [0, T]")
        if abs(x[0]) > ENVELOPE_TOL or abs(x[-1] - lc.E) > ENVELOPE_TOL:
            raise DomainError("profile must start at 0 and end at E")
        if lc.unbounded:
            # at a jump the left copy may sit on the lower and the right on the upper envelope
            ok = np.all((x >= -ENVELOPE_TOL) & (x <= lc.E + ENVELOPE_TOL))
        else:
            ok = np.all(x >= _lower(lc, g) - ENVELOPE_TOL) and np.all(x <= _upper(lc, g) + ENVELOPE_TOL)
        if not ok:
            raise DomainError("profile leaves the envelopes")

    def __call__(self, sigma):
        return np.interp(sigma, self.grid, self.values)

    def charge_slack(self):
        if self.lc.unbounded:
            return np.zeros_like(self.values)
        return (self.lc.E - self.values) / self.lc.P_bar

    def discharge_slack(self):
        return self.lc.T - self.grid - self.charge_slack()

    def to_csv(self) -> str:
        lc = self.lc
        buf = io.StringIO()
        buf.write("sigma,x,x_upper,x_lower,charge_slack,discharge_slack\n")
        up = _upper(lc, self.grid)
        lo = _lower(lc, self.grid)
        for row in zip(self.grid, self.values, up, lo, self.charge_slack(), self.discharge_slack()):
            buf.write(format_row(row))
        return buf.getvalue()


def nominal_profile(lc: LoadClass, n: int = GRID_INTERVALS) -> AllocationProfile:
    g = breakpoint_grid(lc, n)
    return AllocationProfile(lc, g, lc.P0 * g)


def upper_profile(lc: LoadClass, n: int = GRID_INTERVALS) -> AllocationProfile:
    if lc.unbounded:
        g = np.concatenate([[0.0, 0.0], np.linspace(0.0, lc.T, n + 1)[1:]])
        return AllocationProfile(lc, g, np.concatenate([[0.0], np.full(n + 1, lc.E)]))
    g = breakpoint_grid(lc, n)
    return AllocationProfile(lc, g, _upper(lc, g))


def lower_profile(lc: LoadClass, n: int = GRID_INTERVALS) -> AllocationProfile:
    if lc.unbounded:
        g = np.concatenate([np.linspace(0.0, lc.T, n + 1), [lc.T]])
        return AllocationProfile(lc, g, np.concatenate([np.zeros(n + 1), [lc.E]]))
    g = breakpoint_grid(lc, n)
    return AllocationProfile(lc, g, _lower(lc, g))


def average_stored_energy(profile: AllocationProfile) -> float:
    """Energy held above nominal, per unit of active fleet (trapezoid on the grid)."""
    lc = profile.lc
    dev = profile.values - lc.P0 * profile.grid
    return float(np.sum(0.5 * np.diff(profile.grid) * (dev[1:] + dev[:-1])) / lc.T)


def _need_finite(lc):
    if lc.unbounded:
        raise DomainError("slack-equalized profiles need a finite P_bar")


def _check_target(lc, chi):
    half = derive_capacity(lc).C_max / 2.0
    if not -half - 1e-12 <= chi <= half + 1e-12:
        raise DomainError(f"stored energy {chi} outside [{-half}, {half}]")
    return half


def _flat_profile(lc, level, n):
    k1 = level / lc.P_bar
    g = breakpoint_grid(lc, n, extra=(k1, k1 + lc.T - lc.E / lc.P_bar))
    return AllocationProfile(lc, g, np.clip(level, _lower(lc, g), _upper(lc, g)))


def _sloped_profile(lc, slack, n):
    t0 = lc.T - slack - lc.E / lc.P_bar
    g = breakpoint_grid(lc, n, extra=(t0, lc.T - slack))
    line = lc.E - lc.P_bar * (lc.T - g - slack)
    return AllocationProfile(lc, g, np.clip(line, _lower(lc, g), _upper(lc, g)))


def _bisect(make, lo, hi, chi, half):
    if chi >= half:
        return hi, make(hi)
    if chi <= -half:
        return lo, make(lo)
    prof = None
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        prof = make(mid)
        f = average_stored_energy(prof) - chi
        if abs(f) <= BISECT_TOL:
            return mid, prof
        if f < 0:
            lo = mid
        else:
            hi = mid
    return mid, prof


def charge_level(lc: LoadClass, chi_target: float, n: int = GRID_INTERVALS) -> float:
    return charge_slack_equalized(lc, chi_target, n, return_level=True)[0]


def charge_slack_equalized(lc: LoadClass, chi_target: float, n: int = GRID_INTERVALS,
                           return_level: bool = False):
    """Allocation with one common energy level, clipped into the envelopes.

    Every load off the envelopes shares the same charge slack; the level is
    found by bisection so the stored energy equals ``chi_target``.
    """
    _need_finite(lc)
    half = _check_target(lc, chi_target)
    level, prof = _bisect(lambda v: _flat_profile(lc, v, n), 0.0, lc.E, chi_target, half)
    return (level, prof) if return_level else prof


def discharge_slack_equalized(lc: LoadClass, chi_target: float, n: int = GRID_INTERVALS,
                              return_level: bool = False):
    """Allocation where every load off the envelopes has the same discharge slack."""
    _need_finite(lc)
    half = _check_target(lc, chi_target)
    s_hi = lc.T - lc.E / lc.P_bar
    level, prof = _bisect(lambda v: _sloped_profile(lc, v, n), 0.0, s_hi, chi_target, half)
    return (level, prof) if return_level else prof


def level_table(lc: LoadClass, kind: str, n_chi: int = 257, n: int = 256):
    """Stored energy -> equalizing level lookup used by the profile-steering policy."""
    half = derive_capacity(lc).C_max / 2.0
    chis = np.linspace(-half, half, n_chi)
    fn = charge_slack_equalized if kind == "charge" else discharge_slack_equalized
    levels = np.array([fn(lc, float(c), n, return_level=True)[0] for c in chis])
    return chis, levels


def implication_violations(profile: AllocationProfile, kind: str, tol: float = ENVELOPE_TOL) -> int:
    """Count grid pairs breaking the slack-ordering implication of an equalized profile.

    For ``kind="charge"``: a strictly larger charge slack at sigma than at
    sigma' requires x(sigma) on the upper or x(sigma') on the lower envelope.
    ``kind="discharge"`` swaps the envelopes and uses discharge slacks.
    """
    lc = profile.lc
    g, x = profile.grid, profile.values
    on_up = np.abs(x - _upper(lc, g)) <= tol
    on_lo = np.abs(x - _lower(lc, g)) <= tol
    if kind == "charge":
        s = profile.charge_slack()
        first, second = on_up, on_lo
    elif kind == "discharge":
        s = profile.discharge_slack()
        first, second = on_lo, on_up
    else:
        raise ValueError(f"unknown kind {kind!r}")
    greater = s[:, None] > s[None, :] + tol
    bad = greater & ~first[:, None] & ~second[None, :]
    return int(bad.sum())


# ------------------------------------------------------------------ dynamics


@dataclass(frozen=True)
class FluidPolicyState:
    profile: AllocationProfile
    chi: float
    varsigma: float | None = None


def fluid_state(profile: AllocationProfile, chi: float | None = None,
                n_cells: int = GRID_INTERVALS) -> FluidPolicyState:
    """Resample ``profile`` onto a uniform age grid of ``n_cells`` cohorts."""
    lc = profile.lc
    g = np.linspace(0.0, lc.T, n_cells + 1)
    x = np.clip(profile(g), _lower(lc, g), _upper(lc, g))
    prof = AllocationProfile(lc, g, x)
    return FluidPolicyState(prof, average_stored_energy(prof) if chi is None else chi)


def split_age_profile(lc: LoadClass, chi: float) -> tuple[AllocationProfile, float]:
    """Split-age allocation for an unbounded power limit.

    Loads younger than ``T - varsigma`` sit on the lower envelope, older ones
    on the upper envelope, with ``varsigma = (C_max/2 + chi) / W_under_max``.
    """
    if not lc.unbounded:
        raise DomainError("the split-age policy needs an unbounded P_bar")
    cap = derive_capacity(lc)
    _check_target(lc, chi)
    vs = min(max((cap.C_max / 2.0 + chi) / cap.W_under_max, 0.0), lc.T)
    cut = lc.T - vs
    base = np.linspace(0.0, lc.T, 65)
    left = base[base < cut]
    right = base[base > cut]
    g = np.concatenate([left, [cut, cut], right])
    x = np.concatenate([np.zeros(left.size + 1), np.full(right.size + 1, lc.E)])
    if cut == lc.T:
        # lower envelope reaches E only at T itself
        g = np.concatenate([left, [lc.T, lc.T]])
        x = np.concatenate([np.zeros(left.size + 1), [lc.E]])
    return AllocationProfile(lc, g, x), vs


def split_age_state(lc: LoadClass, chi: float) -> FluidPolicyState:
    prof, vs = split_age_profile(lc, chi)
    return FluidPolicyState(prof, chi, vs)


def fluid_step(state: FluidPolicyState, w_value: float, dt: float, policy_kind: str,
               backend: str | None = None) -> FluidPolicyState:
    """Advance the continuum fleet by ``dt`` while absorbing battery power ``w_value``.

    The greedy kinds need a uniform age grid whose spacing divides ``dt``;
    each cell is a cohort that ages by one cell per sub-step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if policy_kind not in FLUID_POLICIES:
        raise ValueError(f"unknown fluid policy {policy_kind!r}")
    lc = state.profile.lc
    if policy_kind == SPLIT_AGE_UNBOUNDED:
        return _split_age_step(state, w_value, dt)
    if lc.unbounded:
        raise DomainError("greedy fluid policies need a finite P_bar")
    g = state.profile.grid
    h = g[1] - g[0]
    if not np.allclose(np.diff(g), h, rtol=0, atol=1e-12 * lc.T):
        raise DomainError("greedy fluid steps need a uniform grid; use fluid_state()")
    m = dt / h
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise DomainError(f"dt={dt} is not a whole multiple of the grid spacing {h}")
    x = state.profile.values.copy()
    n = x.size - 1
    for _ in range(int(round(m))):
        if abs(x[-1] - lc.E) > ENVELOPE_TOL:
            raise InfeasibleEvent(lc.E - x[-1], "cohort leaving the window is not full")
        cur = x[:-1]
        remaining = lc.T - g[:-1]
        pmin, pmax = _kernels.feasible_interval_numpy(cur, remaining, lc.E, lc.P_bar, h)
        if policy_kind == CHARGE_GREEDY:
            key = lc.E - cur
        else:
            key = (lc.E - cur) - lc.P_bar * remaining
        # oldest cohort first
        target = n * (lc.P0 + w_value)
        p_rev, total = _kernels.water_fill(pmin[::-1], pmax[::-1], key[::-1], target,
                                           _kernels.FILL_LEVEL, h, backend=backend)
        if abs(total - target) > 1e-9 * n * lc.P_bar:
            raise InfeasibleEvent((target - total) / n)
        p = p_rev[::-1]
        x = np.concatenate([[0.0], cur + p * h])
    prof = AllocationProfile(lc, g, x)
    return FluidPolicyState(prof, state.chi + w_value * dt)


def _split_age_step(state, w_value, dt):
    lc = state.profile.lc
    cap = derive_capacity(lc)
    chi = state.chi + w_value * dt
    half = cap.C_max / 2.0
    if not -half - 1e-12 <= chi <= half + 1e-12:
        raise InfeasibleEvent(chi - math.copysign(half, chi), "stored energy left the battery range")
    chi = min(max(chi, -half), half)
    prof, vs = split_age_profile(lc, chi)
    old = state.varsigma if state.varsigma is not None else split_age_profile(lc, state.chi)[1]
    # loads already full stay full only if the split age moves back by at most dt
    if vs < old - dt - 1e-12:
        raise InfeasibleEvent((old - dt - vs) * cap.W_under_max / dt, "full loads would have to give energy back")
    return FluidPolicyState(prof, chi, vs)
