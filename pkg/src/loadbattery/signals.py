"""Battery-feasible power trajectories.

Samples are held constant over each step (zero-order hold) and the stored
energy is the left Riemann sum, exactly as the simulator consumes them.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .csvio import format_row
from .model import BatterySpec, DomainError

VOLUME_TOL = 1e-12
PATTERNS = ("charge_full", "discharge_empty", "charge_then_discharge", "discharge_then_charge")


@dataclass(frozen=True, eq=False)
class Trajectory:
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("samples must be a finite 1-D array")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt

    def chi(self, chi0: float = 0.0) -> np.ndarray:
        """Stored energy at the end of each sample."""
        return chi0 + np.cumsum(self.samples * self.dt)

    def concat(self, other: "Trajectory") -> "Trajectory":
        if not math.isclose(self.dt, other.dt, rel_tol=1e-12):
            raise ValueError("cannot join trajectories with different dt")
        return Trajectory(self.dt, np.concatenate([self.samples, other.samples]))

    def padded(self, duration: float) -> "Trajectory":
        """Append zero power for ``duration``."""
        n = int(math.ceil(duration / self.dt - 1e-9))
        return Trajectory(self.dt, np.concatenate([self.samples, np.zeros(n)]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,w\n")
        for t, w in zip(self.times(), self.samples):
            buf.write(format_row((t, w)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        if not rows or rows[0].strip() != "t,w":
            raise ValueError("trajectory CSV must start with the header 't,w'")
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]], dtype=float)
        if data.shape[0] < 2:
            raise ValueError("trajectory CSV needs at least two samples to infer dt")
        dt = float(data[1, 0] - data[0, 0])
        return cls(dt, data[:, 1])


@dataclass(frozen=True)
class Membership:
    member: bool
    kind: str | None = None
    t: float | None = None

    def __bool__(self):
        return self.member


def membership_check(traj: Trajectory, spec: BatterySpec, chi0: float = 0.0) -> Membership:
    """Is ``traj`` absorbable by an ideal battery ``spec`` starting at ``chi0``?

    Reports the earliest violation.  A rate violation in sample ``i`` is
    dated ``i*dt``; a volume violation is dated at the sample's end.
    """
    w = traj.samples
    half = spec.C / 2.0
    chi = traj.chi(chi0)
    hi_rate = np.flatnonzero(w > spec.W_bar + VOLUME_TOL)
    lo_rate = np.flatnonzero(w < -spec.W_under - VOLUME_TOL)
    hi_vol = np.flatnonzero(chi > half + VOLUME_TOL)
    lo_vol = np.flatnonzero(chi < -half - VOLUME_TOL)
    first = []
    if hi_rate.size:
        first.append((hi_rate[0], 0, "rate_high"))
    if lo_rate.size:
        first.append((lo_rate[0], 0, "rate_low"))
    if hi_vol.size:
        first.append((hi_vol[0] + 1, 1, "volume_high"))
    if lo_vol.size:
        first.append((lo_vol[0] + 1, 1, "volume_low"))
    if not first:
        return Membership(True)
    k, _, kind = min(first)
    return Membership(False, kind, k * traj.dt)


def project_to_battery(raw: Trajectory, spec: BatterySpec, chi0: float = 0.0) -> Trajectory:
    """Clamp rates, then saturate the integrator so the volume bounds hold."""
    from ._kernels import project_samples

    out = project_samples(raw.samples, raw.dt, spec.C / 2.0, spec.W_bar, spec.W_under, chi0, VOLUME_TOL)
    return Trajectory(raw.dt, out)


def _ramp(rate: float, duration: float, dt: float) -> np.ndarray:
    """Constant ``rate`` for ``duration``, last sample scaled so the integral is exact."""
    if duration <= 0:
        return np.zeros(0)
    n = int(math.ceil(duration / dt - 1e-9))
    out = np.full(n, rate)
    out[-1] = rate * (duration - (n - 1) * dt) / dt
    return out


def extremal_probe(spec: BatterySpec, pattern: str, dt: float, chi0: float = 0.0) -> Trajectory:
    """Maximum-rate charge and/or discharge until the battery is full or empty."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    half = spec.C / 2.0

    def leg(direction, start):
        if direction > 0:
            span = half - start
            rate = spec.W_bar
        else:
            span = half + start
            rate = spec.W_under
        if span <= 0:
            return np.zeros(0)
        if rate == 0:
            raise DomainError(f"a {'charge' if direction > 0 else 'discharge'} leg needs a nonzero rate")
        return direction * _ramp(rate, span / rate, dt)

    if pattern == "charge_full":
        w = leg(+1, chi0)
    elif pattern == "discharge_empty":
        w = leg(-1, chi0)
    elif pattern == "charge_then_discharge":
        w = np.concatenate([leg(+1, chi0), leg(-1, half)])
    else:
        w = np.concatenate([leg(-1, chi0), leg(+1, -half)])
    return Trajectory(dt, w)


def _n_samples(duration, dt):
    if not duration > 0:
        raise ValueError("duration must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    return int(math.ceil(duration / dt - 1e-9))


def constant(level: float, duration: float, dt: float) -> Trajectory:
    return Trajectory(dt, np.full(_n_samples(duration, dt), float(level)))


def square_wave(amplitude: float, period: float, duration: float, dt: float) -> Trajectory:
    """``+amplitude`` around each period start, ``-amplitude`` around its middle.

    The stored energy swings symmetrically with peak ``amplitude * period / 4``.
    """
    if not period > 0:
        raise ValueError("period must be positive")
    n = _n_samples(duration, dt)
    phase = (np.arange(n) * dt / period) % 1.0
    return Trajectory(dt, np.where((phase < 0.25) | (phase >= 0.75), amplitude, -amplitude))


def random_walk(seed: int, step_sd: float, duration: float, dt: float) -> Trajectory:
    rng = np.random.default_rng(seed)
    n = _n_samples(duration, dt)
    return Trajectory(dt, np.cumsum(rng.normal(0.0, step_sd, n)))


def random_member(spec: BatterySpec, seed: int, duration: float, dt: float, chi0: float = 0.0) -> Trajectory:
    """Seeded random walk scaled to the battery's rates and projected into it."""
    rates = [r for r in (spec.W_bar, spec.W_under) if 0.0 < r < math.inf]
    scale = min(rates) if rates else 1.0
    raw = random_walk(seed, 0.15 * scale, duration, dt)
    return project_to_battery(raw, spec, chi0)


def adversarial_suite(spec: BatterySpec, dt: float, chi0: float = 0.0, seed: int = 0,
                      n_random: int = 2, duration: float = 1.0) -> dict[str, Trajectory]:
    """Named trajectories a realizing policy must all absorb from stored energy ``chi0``.

    Contains every non-empty extremal pattern the rates allow, a charge/discharge
    staircase with holds, and ``n_random`` projected random walks of length
    ``duration``.
    """
    suite: dict[str, Trajectory] = {}
    for pat in PATTERNS:
        try:
            traj = extremal_probe(spec, pat, dt, chi0)
        except DomainError:
            continue
        if len(traj):
            suite[pat] = traj
    stairs = _staircase(spec, dt, chi0)
    if stairs is not None:
        suite["staircase"] = stairs
    for k in range(n_random):
        suite[f"random_{k}"] = random_member(spec, seed + k, duration, dt, chi0)
    return suite


def _staircase(spec, dt, chi0, steps=4):
    """Charge to full in equal bursts separated by equally long holds, then discharge likewise."""
    half = spec.C / 2.0
    parts = []
    start = chi0
    if spec.W_bar > 0 and half - chi0 > 0:
        burst = _ramp(spec.W_bar, (half - chi0) / steps / spec.W_bar, dt)
        parts += [burst, np.zeros(burst.size)] * steps
        start = half
    if spec.W_under > 0 and half + start > 0:
        burst = -_ramp(spec.W_under, (half + start) / steps / spec.W_under, dt)
        parts += [burst, np.zeros(burst.size)] * steps
    if not parts:
        return None
    return Trajectory(dt, np.concatenate(parts))
