"""Compare the numba and numpy backends on the simulator's hot loops.

Usage: python3 benchmarks/bench_kernels.py [--loads 100] [--repeat 3]
"""

import argparse
import time

import numpy as np

from loadbattery import _kernels
from loadbattery.model import BatterySpec, LoadClass, derive_capacity
from loadbattery.signals import random_member
from loadbattery.simulate import PolicyKind, SimConfig, run


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--loads", type=int, default=100, help="Active loads (lambda * T).")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    lc = LoadClass(1.0, 1.0, 2.0)
    cap = derive_capacity(lc)
    dt = 1.0 / (10 * args.loads)
    spec = BatterySpec(cap.C_max, cap.W_bar_max, 0.0)
    traj = random_member(spec, seed=0, duration=lc.T, dt=dt)

    rng = np.random.default_rng(0)
    pmin = rng.uniform(0, 1, args.loads)
    pmax = pmin + rng.uniform(0, 1, args.loads)
    key = rng.uniform(0, 1, args.loads)
    target = 0.5 * (pmin.sum() + pmax.sum())

    print(f"{'case':<34}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for rule_name, rule in (("sequential", _kernels.FILL_SEQUENTIAL), ("level", _kernels.FILL_LEVEL)):
        timings = {}
        for backend in ("numpy", "numba"):
            _kernels.water_fill(pmin, pmax, key, target, rule, dt, backend=backend)
            timings[backend] = best_of(
                lambda b=backend: [_kernels.water_fill(pmin, pmax, key, target, rule, dt, backend=b)
                                   for _ in range(1000)],
                args.repeat,
            )
        print(f"{'water_fill x1000 (' + rule_name + ')':<34}{timings['numpy']:>12.4f}"
              f"{timings['numba']:>12.4f}{timings['numpy'] / timings['numba']:>10.1f}")

    for policy in (PolicyKind.CHARGE_SLACK_GREEDY, PolicyKind.TARGET_PROFILE_CHARGE):
        cfg = SimConfig(lc, lam=args.loads / lc.T, dt=dt, policy=policy, chi0=0.0)
        timings = {}
        for backend in ("numpy", "numba"):
            run(cfg, traj, backend=backend)
            timings[backend] = best_of(lambda b=backend: run(cfg, traj, backend=b), args.repeat)
        print(f"{'run ' + policy.value:<34}{timings['numpy']:>12.4f}"
              f"{timings['numba']:>12.4f}{timings['numpy'] / timings['numba']:>10.1f}")


if __name__ == "__main__":
    main()
