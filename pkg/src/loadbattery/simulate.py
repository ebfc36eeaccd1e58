"""Finite-fleet, discrete-time scheduling simulator.

Loads arrive every ``1/lam`` time units, each needing ``E`` within ``T`` at
power at most ``P_bar``.  Every step the fleet must consume
``n_active * P0 + lam * T * w(t)``: nominal demand plus the battery power
scaled to the number of active loads.  A policy splits that aggregate over
the loads; when no split respects every load's feasible interval the step is
recorded as an infeasibility event.
"""

from __future__ import annotations

import enum
import functools
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .allocation import (
    InfeasibleEvent,
    charge_slack_equalized,
    discharge_slack_equalized,
    level_table,
)
from .csvio import comment_block, format_row
from .model import BatterySpec, DomainError, LoadClass, denormalize, NormalizedBattery
from .signals import Trajectory, adversarial_suite

STRICT = "strict"
CLIP = "clip"


class PolicyKind(enum.Enum):
    CHARGE_SLACK_GREEDY = "charge_slack_greedy"
    DISCHARGE_SLACK_GREEDY = "discharge_slack_greedy"
    NOMINAL_PROPORTIONAL = "nominal_proportional"
    TARGET_PROFILE_CHARGE = "target_profile_charge"
    TARGET_PROFILE_DISCHARGE = "target_profile_discharge"


_POLICY_CODE = {
    PolicyKind.CHARGE_SLACK_GREEDY: _kernels.CHARGE_GREEDY,
    PolicyKind.DISCHARGE_SLACK_GREEDY: _kernels.DISCHARGE_GREEDY,
    PolicyKind.NOMINAL_PROPORTIONAL: _kernels.PROPORTIONAL,
    PolicyKind.TARGET_PROFILE_CHARGE: _kernels.TARGET_PROFILE,
    PolicyKind.TARGET_PROFILE_DISCHARGE: _kernels.TARGET_PROFILE,
}

_AUTO_PROFILE = {
    PolicyKind.CHARGE_SLACK_GREEDY: "charge_equalized",
    PolicyKind.DISCHARGE_SLACK_GREEDY: "discharge_equalized",
    PolicyKind.NOMINAL_PROPORTIONAL: "nominal",
    PolicyKind.TARGET_PROFILE_CHARGE: "charge_equalized",
    PolicyKind.TARGET_PROFILE_DISCHARGE: "discharge_equalized",
}

INITIAL_PROFILES = ("auto", "nominal", "charge_equalized", "discharge_equalized")
FILL_RULES = {"level": _kernels.FILL_LEVEL, "sequential": _kernels.FILL_SEQUENTIAL}


@dataclass(frozen=True)
class LoadInstance:
    arrival: float
    energy: float

    def deadline(self, lc: LoadClass) -> float:
        return self.arrival + lc.T


class DeadlineFailure(DomainError):
    """A load can no longer finish by its deadline."""


def feasible_power_interval(load: LoadInstance, now: float, dt: float, lc: LoadClass) -> tuple[float, float]:
    """Powers a load may draw over ``[now, now + dt)`` and still finish in time."""
    remaining = load.deadline(lc) - now
    if not 0.0 <= now - load.arrival < lc.T:
        raise DomainError("load is not active at this time")
    if dt > remaining + 1e-12:
        raise DomainError("step runs past the deadline")
    if lc.E - load.energy > lc.P_bar * remaining + 1e-12:
        raise DeadlineFailure(f"load arriving at {load.arrival} cannot finish by its deadline")
    pmin, pmax = _kernels.feasible_interval_numpy(
        np.array([load.energy]), np.array([remaining]), lc.E, lc.P_bar, dt
    )
    return float(pmin[0]), float(pmax[0])


@dataclass(frozen=True)
class StepAllocation:
    powers: np.ndarray
    total: float
    shortfall: float  # requested minus delivered aggregate power


def _priority(policy, lc, energy, age, dt, level=None):
    """Per-load key in energy units; drawing ``p`` for ``dt`` lowers it by ``p * dt``.

    Charge key is ``P_bar`` times the charge slack; discharge key is minus
    ``P_bar`` times the discharge slack; profile key is the shortfall below
    the target profile one step ahead.
    """
    if policy == PolicyKind.CHARGE_SLACK_GREEDY:
        return lc.E - energy
    if policy == PolicyKind.DISCHARGE_SLACK_GREEDY:
        return (lc.E - energy) - lc.P_bar * (lc.T - age)
    if policy in (PolicyKind.TARGET_PROFILE_CHARGE, PolicyKind.TARGET_PROFILE_DISCHARGE):
        kind = _kernels.PROFILE_CHARGE if policy == PolicyKind.TARGET_PROFILE_CHARGE else _kernels.PROFILE_DISCHARGE
        return _kernels.profile_value_numpy(age + dt, level, kind, lc.E, lc.T, lc.P_bar) - energy
    return np.zeros_like(energy)


def allocate_step(loads, now: float, aggregate_target: float, policy: PolicyKind, lc: LoadClass,
                  dt: float, mode: str = STRICT, level: float | None = None,
                  fill: str = "level", tol: float = 1e-9) -> StepAllocation:
    """Split ``aggregate_target`` over the active ``loads`` for one step.

    Mandatory minimums go first; the surplus follows the policy's priority.
    With ``fill="sequential"`` each load in turn is filled to its maximum,
    ties going to the earlier arrival.  With ``fill="level"`` the surplus
    lifts the highest-priority loads together, so their priorities are
    equal at the end of the step (the greedy rule applied within one
    step).  In strict mode an unreachable target
    raises :class:`InfeasibleEvent` (its ``allocation`` attribute holds the
    clamped split); in clip mode the clamped split is returned.
    """
    if aggregate_target < 0:
        raise DomainError("aggregate target must be non-negative")
    loads = list(loads)
    order = sorted(range(len(loads)), key=lambda i: loads[i].arrival)
    loads = [loads[i] for i in order]
    ivals = np.array([feasible_power_interval(ld, now, dt, lc) for ld in loads]).reshape(-1, 2)
    energy = np.array([ld.energy for ld in loads])
    age = np.array([now - ld.arrival for ld in loads])
    if policy.name.startswith("TARGET_PROFILE") and level is None:
        raise ValueError("profile-steering allocation needs the target level")
    prio = _priority(policy, lc, energy, age, dt, level)
    if policy == PolicyKind.NOMINAL_PROPORTIONAL:
        rule = _kernels.FILL_PROPORTIONAL
    else:
        rule = FILL_RULES[fill]
    p, total = _kernels.water_fill(ivals[:, 0], ivals[:, 1], prio, aggregate_target, rule, dt)
    out = np.empty_like(p)
    out[order] = p
    res = StepAllocation(out, float(total), float(aggregate_target - total))
    if mode == STRICT and abs(res.shortfall) > tol * max(1.0, len(loads) * lc.P_bar):
        exc = InfeasibleEvent(res.shortfall)
        exc.allocation = res
        raise exc
    return res


@dataclass(frozen=True)
class SimConfig:
    lc: LoadClass
    lam: float
    dt: float
    policy: PolicyKind = PolicyKind.CHARGE_SLACK_GREEDY
    mode: str = STRICT
    seed: int = 0
    initial_profile: str = "auto"
    chi0: float = 0.0
    warmup: float | None = None  # default 2T
    tail: float | None = None  # zero-power tail after the trajectory, default T
    stop_on_failure: bool = False
    tol: float = 1e-9
    fill: str = "level"

    def __post_init__(self):
        if isinstance(self.policy, str):
            object.__setattr__(self, "policy", PolicyKind(self.policy))
        if self.lc.unbounded:
            raise DomainError("the simulator needs a finite P_bar")
        if not (self.lam > 0 and self.dt > 0):
            raise DomainError("lam and dt must be positive")
        if self.mode not in (STRICT, CLIP):
            raise DomainError(f"mode must be '{STRICT}' or '{CLIP}'")
        if self.fill not in FILL_RULES:
            raise DomainError(f"fill must be one of {tuple(FILL_RULES)}")
        if self.initial_profile not in INITIAL_PROFILES:
            raise DomainError(f"initial_profile must be one of {INITIAL_PROFILES}")
        m = 1.0 / (self.lam * self.dt)
        n = self.lam * self.lc.T
        if abs(m - round(m)) > 1e-9 * m or round(m) < 1:
            raise DomainError("1/lam must be a whole multiple of dt")
        if abs(n - round(n)) > 1e-9 * n or round(n) < 1:
            raise DomainError("T must be a whole multiple of 1/lam")
        if self.warmup is not None and self.warmup < 0:
            raise DomainError("warmup must be non-negative")
        if self.resolved_profile() != "nominal" and self.warmup_time < self.lc.T:
            raise DomainError("a non-nominal initial profile needs a warm-up of at least T")

    @property
    def steps_per_arrival(self) -> int:
        return int(round(1.0 / (self.lam * self.dt)))

    @property
    def n_active(self) -> int:
        return int(round(self.lam * self.lc.T))

    @property
    def warmup_time(self) -> float:
        return 2.0 * self.lc.T if self.warmup is None else self.warmup

    @property
    def tail_time(self) -> float:
        return self.lc.T if self.tail is None else self.tail

    def resolved_profile(self) -> str:
        if self.initial_profile == "auto":
            return _AUTO_PROFILE[self.policy]
        return self.initial_profile

    def echo(self) -> list[tuple[str, str]]:
        return [
            ("E", repr(self.lc.E)),
            ("T", repr(self.lc.T)),
            ("P_bar", repr(self.lc.P_bar)),
            ("lambda", repr(self.lam)),
            ("dt", repr(self.dt)),
            ("policy", self.policy.value),
            ("fill", self.fill),
            ("mode", self.mode),
            ("seed", str(self.seed)),
            ("initial_profile", self.resolved_profile()),
            ("chi0", repr(self.chi0)),
            ("warmup", repr(self.warmup_time)),
            ("tail", repr(self.tail_time)),
            ("stop_on_failure", str(self.stop_on_failure).lower()),
            ("tol", repr(self.tol)),
        ]


@dataclass(frozen=True, eq=False)
class SimResult:
    config: SimConfig
    t: np.ndarray
    w_target: np.ndarray
    w_achieved: np.ndarray
    chi: np.ndarray  # battery stored energy at the end of each step
    x_avg: np.ndarray  # fleet stored energy per active load at the end of each step
    n_active: int
    infeasible: np.ndarray
    deadline_failures: int
    events: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "tracked" if not self.events and self.deadline_failures == 0 else "failed"

    @property
    def tracked(self) -> bool:
        return self.verdict == "tracked"

    @property
    def max_tracking_error(self) -> float:
        if self.w_target.size == 0:
            return 0.0
        return float(np.max(np.abs(self.w_target - self.w_achieved)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(comment_block(self.config.echo()))
        buf.write("# fleet_power = n_active * P0 + lambda * T * w\n")
        buf.write("# chi and x_avg are end-of-step values\n")
        buf.write("t,w_target,w_achieved,chi,x_avg,n_active,infeasible\n")
        for row in zip(self.t, self.w_target, self.w_achieved, self.chi, self.x_avg,
                       [self.n_active] * self.t.size, self.infeasible.astype(int).tolist()):
            buf.write(format_row(row))
        return buf.getvalue()

    def events_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,shortfall\n")
        for t, sf in self.events:
            buf.write(format_row((t, sf)))
        return buf.getvalue()


@functools.lru_cache(maxsize=64)
def _tables(lc: LoadClass, kind: str):
    return level_table(lc, kind)


def _profile_level(lc, profile, chi0):
    if profile == "charge_equalized":
        return _kernels.PROFILE_CHARGE, charge_slack_equalized(lc, chi0, return_level=True)[0]
    if profile == "discharge_equalized":
        return _kernels.PROFILE_DISCHARGE, discharge_slack_equalized(lc, chi0, return_level=True)[0]
    return _kernels.PROFILE_NOMINAL, 0.0


def _initial_fleet(cfg: SimConfig, s0: int):
    n, m = cfg.n_active, cfg.steps_per_arrival
    lc = cfg.lc
    last = ((s0 - 1) // m) * m  # most recent arrival strictly before s0
    arrivals = last - m * np.arange(n)
    slots = (arrivals // m) % n
    arrival = np.empty(n, dtype=np.int64)
    e = np.empty(n)
    arrival[slots] = arrivals
    e[slots] = np.minimum(lc.P0 * (s0 - arrivals) * cfg.dt, lc.E)
    return e, arrival


def run(config: SimConfig, trajectory: Trajectory, backend: str | None = None) -> SimResult:
    """Warm the fleet up to its initial profile, then track ``trajectory``."""
    cfg = config
    if not math.isclose(trajectory.dt, cfg.dt, rel_tol=1e-9):
        raise DomainError(f"trajectory dt={trajectory.dt} differs from the simulation dt={cfg.dt}")
    lc = cfg.lc
    w = trajectory.padded(cfg.tail_time).samples if cfg.tail_time > 0 else trajectory.samples
    warm_steps = int(round(cfg.warmup_time / cfg.dt))
    e, arrival = _initial_fleet(cfg, -warm_steps)
    warm_kind, warm_level = _profile_level(lc, cfg.resolved_profile(), cfg.chi0)
    if cfg.policy in (PolicyKind.TARGET_PROFILE_CHARGE, PolicyKind.TARGET_PROFILE_DISCHARGE):
        kind = "charge" if cfg.policy == PolicyKind.TARGET_PROFILE_CHARGE else "discharge"
        chi_tab, level_tab = _tables(lc, kind)
        prof_kind = _kernels.PROFILE_CHARGE if kind == "charge" else _kernels.PROFILE_DISCHARGE
    else:
        chi_tab, level_tab, prof_kind = np.zeros(2), np.zeros(2), 0
    T_steps = cfg.n_active * cfg.steps_per_arrival
    w_ach, x_avg, flags, dfail = _kernels.run_loop(
        e, arrival, np.ascontiguousarray(w, dtype=float), lc.E, T_steps, cfg.steps_per_arrival,
        cfg.dt, lc.P_bar, _POLICY_CODE[cfg.policy], FILL_RULES[cfg.fill], prof_kind, chi_tab, level_tab,
        warm_kind, float(warm_level), warm_steps, cfg.tol, cfg.stop_on_failure,
        backend=backend,
    )
    k = w_ach.size
    wt = w[:k]
    t = np.arange(k) * cfg.dt
    chi = cfg.chi0 + np.cumsum(wt * cfg.dt)
    flags = flags.astype(bool)
    events = [(float(t[i]), float(wt[i] - w_ach[i])) for i in np.flatnonzero(flags)]
    return SimResult(cfg, t, wt, w_ach, chi, x_avg, cfg.n_active, flags, int(dfail), events)


# ----------------------------------------------------------------- campaigns


def probe_suite_results(config: SimConfig, spec: BatterySpec, n_random: int = 1,
                        backend: str | None = None) -> dict[str, SimResult]:
    """Run every trajectory of the battery's adversarial suite from ``config.chi0``."""
    suite = adversarial_suite(spec, config.dt, config.chi0, seed=config.seed,
                              n_random=n_random, duration=config.lc.T)
    return {name: run(config, traj, backend=backend) for name, traj in sorted(suite.items())}


def battery_tracked(config: SimConfig, spec: BatterySpec, n_random: int = 1,
                    backend: str | None = None) -> bool:
    cfg = replace(config, stop_on_failure=True, mode=STRICT)
    suite = adversarial_suite(spec, cfg.dt, cfg.chi0, seed=cfg.seed, n_random=n_random,
                              duration=cfg.lc.T)
    for name in sorted(suite):
        if not run(cfg, suite[name], backend=backend).tracked:
            return False
    return True


def empirical_frontier(config: SimConfig, c: float, policy: PolicyKind | str | None = None,
                       n_grid: int = 5, iters: int = 7, n_random: int = 1,
                       backend: str | None = None) -> list[tuple[float, float, str]]:
    """For each normalized charge rate, the largest discharge rate whose probe suite tracks.

    Bisection over ``w_under`` in ``[0, 1]`` with ``iters`` halvings; the
    returned value is always one that tracked (or 0 with verdict ``failed``).
    """
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    cfg = config if policy is None else replace(config, policy=PolicyKind(policy) if isinstance(policy, str) else policy)
    lc = cfg.lc

    def ok(wb, wu):
        spec = denormalize(NormalizedBattery(c, wb, wu), lc)
        return battery_tracked(cfg, spec, n_random=n_random, backend=backend)

    out = []
    for wb in np.linspace(0.0, 1.0, n_grid):
        wb = float(wb)
        if not ok(wb, 0.0):
            out.append((wb, 0.0, "failed"))
            continue
        if ok(wb, 1.0):
            out.append((wb, 1.0, "tracked"))
            continue
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if ok(wb, mid):
                lo = mid
            else:
                hi = mid
        out.append((wb, lo, "tracked"))
    return out


def config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["policy"] = cfg.policy.value
    return d
