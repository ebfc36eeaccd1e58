"""Hot inner loops: water-filling and the fleet stepping loop.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version.  The numba path is used when numba imports and the environment
variable ``LOADBATTERY_DISABLE_NUMBA`` is unset or ``0``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("LOADBATTERY_DISABLE_NUMBA", "0") in ("", "0")

# policy codes shared with simulate.py
CHARGE_GREEDY = 0
DISCHARGE_GREEDY = 1
PROPORTIONAL = 2
TARGET_PROFILE = 3
FOLLOW_PROFILE = 4  # warm-up: each load tracks the profile on its own

# water-filling rules
FILL_SEQUENTIAL = 0  # surplus to one load at a time, highest key first
FILL_LEVEL = 1  # surplus raises the lowest end-of-step keys to a common level
FILL_PROPORTIONAL = 2  # surplus split in proportion to each load's headroom

PROFILE_CHARGE = 0
PROFILE_DISCHARGE = 1
PROFILE_NOMINAL = 2


def _njit(fn):
    if _HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


# --------------------------------------------------------------- numpy path


def water_fill_numpy(pmin, pmax, key, target, rule=FILL_SEQUENTIAL, dt=1.0):
    """Mandatory minimums first, then the surplus according to ``rule``.

    ``key`` is in energy units: a load drawing ``p`` for ``dt`` lowers its
    key by ``p * dt``.  Sequential filling serves loads by descending key,
    ties in index order (callers pass loads oldest first).  Level filling
    picks ``L`` so that ``p_i = clip((key_i - L) / dt, pmin_i, pmax_i)``
    meets the target, which makes the largest end-of-step keys equal.
    Returns ``(p, achieved_total)``; the total is clamped into
    ``[sum(pmin), sum(pmax)]``.
    """
    lo = pmin.sum()
    hi = pmax.sum()
    total = min(max(target, lo), hi)
    surplus = total - lo
    room = pmax - pmin
    if rule == FILL_PROPORTIONAL:
        cap = room.sum()
        frac = 0.0 if cap <= 0.0 else surplus / cap
        p = pmin + frac * room
        return p, p.sum()
    if rule == FILL_LEVEL:
        if hi - lo <= 0.0:
            return pmin.copy(), lo
        bps = np.sort(np.concatenate([key - dt * pmax, key - dt * pmin]))
        a, b = 0, bps.size - 1
        while b - a > 1:
            mid = (a + b) // 2
            if np.clip((key - bps[mid]) / dt, pmin, pmax).sum() >= total:
                a = mid
            else:
                b = mid
        s1 = np.clip((key - bps[a]) / dt, pmin, pmax).sum()
        s2 = np.clip((key - bps[b]) / dt, pmin, pmax).sum()
        level = bps[a] if s1 <= s2 else bps[a] + (s1 - total) / (s1 - s2) * (bps[b] - bps[a])
        p = np.clip((key - level) / dt, pmin, pmax)
        return p, p.sum()
    order = np.argsort(-key, kind="stable")
    r = room[order]
    filled = np.cumsum(r)
    before = filled - r
    give = np.clip(surplus - before, 0.0, r)
    p = pmin.copy()
    p[order] += give
    return p, total


def feasible_interval_numpy(e, remaining, E, P_bar, dt):
    pmax = np.minimum(P_bar, (E - e) / dt)
    pmax = np.maximum(pmax, 0.0)
    pmin = (E - e - P_bar * (remaining - dt)) / dt
    pmin = np.minimum(np.maximum(pmin, 0.0), pmax)
    return pmin, pmax


def profile_value_numpy(age, level, kind, E, T, P_bar):
    up = np.clip(P_bar * age, 0.0, E)
    low = np.clip(P_bar * age - P_bar * T + E, 0.0, E)
    if kind == PROFILE_CHARGE:
        line = np.full_like(age, level)
    elif kind == PROFILE_DISCHARGE:
        line = E - P_bar * (T - age - level)
    else:
        line = E / T * age
    return np.minimum(np.maximum(line, low), up)


def run_loop_numpy(
    e, arrival, w, E, T_steps, m, dt, P_bar, policy, fill, prof_kind, chi_tab, level_tab,
    warm_kind, warm_level, warm_steps, tol, stop_on_failure,
):
    """Step the fleet; see :func:`run_loop_numba` for the argument contract."""
    n = e.shape[0]
    P0 = E / (T_steps * dt)
    n_steps = w.shape[0]
    w_ach = np.zeros(n_steps)
    x_avg = np.zeros(n_steps)
    flags = np.zeros(n_steps, dtype=np.int64)
    deadline_fail = 0
    s0 = -warm_steps
    for k in range(warm_steps + n_steps):
        s = s0 + k
        if s % m == 0:
            slot = (s // m) % n
            if e[slot] < E - tol * E:
                deadline_fail += 1
            e[slot] = 0.0
            arrival[slot] = s
        order = np.argsort(arrival, kind="stable")
        ee = e[order]
        age = (s - arrival[order]) * dt
        remaining = (arrival[order] + T_steps - s) * dt
        if np.any(E - ee > P_bar * remaining + tol * E):
            deadline_fail += 1
        pmin, pmax = feasible_interval_numpy(ee, remaining, E, P_bar, dt)
        ws = 0.0 if k < warm_steps else w[k - warm_steps]
        target = n * (P0 + ws)
        xbar = (np.sum(ee - np.minimum(P0 * age, E))) / n
        if policy == FOLLOW_PROFILE or (k < warm_steps):
            xt = profile_value_numpy(age + dt, warm_level, warm_kind, E, T_steps * dt, P_bar)
            p = np.clip((xt - ee) / dt, pmin, pmax)
            tot = p.sum()
        else:
            if policy == CHARGE_GREEDY:
                prio = E - ee
            elif policy == DISCHARGE_GREEDY:
                prio = (E - ee) - P_bar * (T_steps * dt - age)
            elif policy == TARGET_PROFILE:
                lvl = np.interp(xbar, chi_tab, level_tab)
                prio = profile_value_numpy(age + dt, lvl, prof_kind, E, T_steps * dt, P_bar) - ee
            else:
                prio = np.zeros(n)
            rule = FILL_PROPORTIONAL if policy == PROPORTIONAL else fill
            p, tot = water_fill_numpy(pmin, pmax, prio, target, rule, dt)
        e[order] = ee + p * dt
        if k >= warm_steps:
            j = k - warm_steps
            w_ach[j] = tot / n - P0
            age_end = (s + 1 - arrival) * dt
            x_avg[j] = np.sum(e - np.minimum(P0 * age_end, E)) / n
            if abs(target - tot) > tol * n * P_bar:
                flags[j] = 1
                if stop_on_failure:
                    return w_ach[: j + 1], x_avg[: j + 1], flags[: j + 1], deadline_fail
    return w_ach, x_avg, flags, deadline_fail


# --------------------------------------------------------------- numba path


@_njit
def _clip_sum(key, level, dt, pmin, pmax):
    acc = 0.0
    for i in range(key.shape[0]):
        acc += min(max((key[i] - level) / dt, pmin[i]), pmax[i])
    return acc


@_njit
def water_fill_numba(pmin, pmax, key, target, rule, dt):
    n = pmin.shape[0]
    lo = 0.0
    hi = 0.0
    for i in range(n):
        lo += pmin[i]
        hi += pmax[i]
    total = min(max(target, lo), hi)
    surplus = total - lo
    p = pmin.copy()
    if rule == FILL_PROPORTIONAL:
        cap = hi - lo
        frac = 0.0 if cap <= 0.0 else surplus / cap
        acc = 0.0
        for i in range(n):
            p[i] = pmin[i] + frac * (pmax[i] - pmin[i])
            acc += p[i]
        return p, acc
    if rule == FILL_LEVEL:
        if hi - lo <= 0.0:
            return p, lo
        bps = np.empty(2 * n)
        for i in range(n):
            bps[i] = key[i] - dt * pmax[i]
            bps[n + i] = key[i] - dt * pmin[i]
        bps.sort()
        a = 0
        b = 2 * n - 1
        while b - a > 1:
            mid = (a + b) // 2
            if _clip_sum(key, bps[mid], dt, pmin, pmax) >= total:
                a = mid
            else:
                b = mid
        s1 = _clip_sum(key, bps[a], dt, pmin, pmax)
        s2 = _clip_sum(key, bps[b], dt, pmin, pmax)
        if s1 <= s2:
            level = bps[a]
        else:
            level = bps[a] + (s1 - total) / (s1 - s2) * (bps[b] - bps[a])
        acc = 0.0
        for i in range(n):
            p[i] = min(max((key[i] - level) / dt, pmin[i]), pmax[i])
            acc += p[i]
        return p, acc
    neg = np.empty(n)
    for i in range(n):
        neg[i] = -key[i]
    order = np.argsort(neg, kind="mergesort")
    before = 0.0
    for j in range(n):
        i = order[j]
        r = pmax[i] - pmin[i]
        g = surplus - before
        if g > r:
            g = r
        if g < 0.0:
            g = 0.0
        p[i] += g
        before += r
    return p, total


@_njit
def _profile_value_numba(age, level, kind, E, T, P_bar):
    up = min(max(P_bar * age, 0.0), E)
    low = min(max(P_bar * age - P_bar * T + E, 0.0), E)
    if kind == 0:
        line = level
    elif kind == 1:
        line = E - P_bar * (T - age - level)
    else:
        line = E / T * age
    return min(max(line, low), up)


@_njit
def run_loop_numba(
    e, arrival, w, E, T_steps, m, dt, P_bar, policy, fill, prof_kind, chi_tab, level_tab,
    warm_kind, warm_level, warm_steps, tol, stop_on_failure,
):
    """Step a fleet of ``n = len(e)`` loads through warm-up and tracking.

    Loads live in slots; slot ``(s // m) % n`` is refilled at every arrival
    step ``s``.  Steps ``-warm_steps .. -1`` steer each load along the
    profile ``(warm_kind, warm_level)``; steps ``0 .. len(w)-1`` track ``n*(P0 + w)``.
    Returns per-step achieved battery power, stored energy, infeasibility
    flags and the count of deadline failures.
    """
    n = e.shape[0]
    T = T_steps * dt
    P0 = E / T
    n_steps = w.shape[0]
    w_ach = np.zeros(n_steps)
    x_avg = np.zeros(n_steps)
    flags = np.zeros(n_steps, dtype=np.int64)
    deadline_fail = 0
    s0 = -warm_steps
    ee = np.empty(n)
    age = np.empty(n)
    rem = np.empty(n)
    pmin = np.empty(n)
    pmax = np.empty(n)
    prio = np.empty(n)
    for k in range(warm_steps + n_steps):
        s = s0 + k
        if s % m == 0:
            slot = (s // m) % n
            if e[slot] < E - tol * E:
                deadline_fail += 1
            e[slot] = 0.0
            arrival[slot] = s
        order = np.argsort(arrival, kind="mergesort")
        xbar = 0.0
        bad = False
        for j in range(n):
            i = order[j]
            ee[j] = e[i]
            age[j] = (s - arrival[i]) * dt
            rem[j] = (arrival[i] + T_steps - s) * dt
            if E - ee[j] > P_bar * rem[j] + tol * E:
                bad = True
            hi = min(P_bar, (E - ee[j]) / dt)
            if hi < 0.0:
                hi = 0.0
            lo = (E - ee[j] - P_bar * (rem[j] - dt)) / dt
            if lo < 0.0:
                lo = 0.0
            if lo > hi:
                lo = hi
            pmin[j] = lo
            pmax[j] = hi
            xbar += ee[j] - min(P0 * age[j], E)
        if bad:
            deadline_fail += 1
        xbar /= n
        warm = k < warm_steps
        ws = 0.0 if warm else w[k - warm_steps]
        target = n * (P0 + ws)
        if warm or policy == FOLLOW_PROFILE:
            p = np.empty(n)
            tot = 0.0
            for j in range(n):
                xt = _profile_value_numba(age[j] + dt, warm_level, warm_kind, E, T, P_bar)
                v = (xt - ee[j]) / dt
                p[j] = min(max(v, pmin[j]), pmax[j])
                tot += p[j]
        else:
            if policy == CHARGE_GREEDY:
                for j in range(n):
                    prio[j] = E - ee[j]
            elif policy == DISCHARGE_GREEDY:
                for j in range(n):
                    prio[j] = (E - ee[j]) - P_bar * (T - age[j])
            elif policy == TARGET_PROFILE:
                lvl = np.interp(xbar, chi_tab, level_tab)
                for j in range(n):
                    prio[j] = _profile_value_numba(age[j] + dt, lvl, prof_kind, E, T, P_bar) - ee[j]
            else:
                for j in range(n):
                    prio[j] = 0.0
            rule = FILL_PROPORTIONAL if policy == PROPORTIONAL else fill
            p, tot = water_fill_numba(pmin, pmax, prio, target, rule, dt)
        for j in range(n):
            e[order[j]] = ee[j] + p[j] * dt
        if not warm:
            jj = k - warm_steps
            w_ach[jj] = tot / n - P0
            acc = 0.0
            for i in range(n):
                acc += e[i] - min(P0 * (s + 1 - arrival[i]) * dt, E)
            x_avg[jj] = acc / n
            if abs(target - tot) > tol * n * P_bar:
                flags[jj] = 1
                if stop_on_failure:
                    return w_ach[: jj + 1], x_avg[: jj + 1], flags[: jj + 1], deadline_fail
    return w_ach, x_avg, flags, deadline_fail


def water_fill(pmin, pmax, key, target, rule=FILL_SEQUENTIAL, dt=1.0, backend=None):
    backend = backend or ("numba" if USE_NUMBA else "numpy")
    pmin = np.ascontiguousarray(pmin, dtype=float)
    pmax = np.ascontiguousarray(pmax, dtype=float)
    key = np.ascontiguousarray(key, dtype=float)
    if backend == "numba":
        return water_fill_numba(pmin, pmax, key, float(target), int(rule), float(dt))
    return water_fill_numpy(pmin, pmax, key, float(target), int(rule), float(dt))


def run_loop(*args, backend=None):
    backend = backend or ("numba" if USE_NUMBA else "numpy")
    if backend == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return run_loop_numba(*args)
    return run_loop_numpy(*args)


def project_samples_numpy(w, dt, half, w_bar, w_under, chi0, tol):
    out = np.minimum(np.maximum(w, -w_under), w_bar)
    chi = chi0
    for i in range(out.shape[0]):
        nxt = chi + out[i] * dt
        if nxt > half + tol:
            out[i] = (half - chi) / dt
        elif nxt < -half - tol:
            out[i] = (-half - chi) / dt
        chi = chi + out[i] * dt
    return out


project_samples_numba = _njit(project_samples_numpy)


def project_samples(w, dt, half, w_bar, w_under, chi0, tol, backend=None):
    """Rate clamp followed by a saturating integrator that keeps |chi| <= half."""
    backend = backend or ("numba" if USE_NUMBA else "numpy")
    w = np.ascontiguousarray(w, dtype=float)
    args = (w, float(dt), float(half), float(w_bar), float(w_under), float(chi0), float(tol))
    if backend == "numba":
        return project_samples_numba(*args)
    return project_samples_numpy(*args)
