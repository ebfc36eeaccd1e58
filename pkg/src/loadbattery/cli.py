"""Command-line front end.

Subcommands write CSV to ``--out`` (or into ``--out-dir``, or stdout when
neither is given).  ``LOADBATTERY_OUT_DIR`` supplies a default output
directory.  Exit codes: 0 success / tracked, 1 a simulation failed to
track, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .allocation import charge_slack_equalized, discharge_slack_equalized
from .capacity import area_check, frontier_curve, quadratic_margin, region_flag, tradeoff_feasible
from .csvio import atomic_write, format_row
from .model import (
    BatterySpec,
    DomainError,
    LoadClass,
    NormalizedBattery,
    breakpoint_grid,
    check_within_max,
    denormalize,
    derive_capacity,
    lower_envelope,
    nominal_energy,
    normalize,
    upper_envelope,
)
from .signals import (
    PATTERNS,
    Trajectory,
    adversarial_suite,
    constant,
    extremal_probe,
    random_member,
    square_wave,
)
from .simulate import FILL_RULES, INITIAL_PROFILES, PolicyKind, SimConfig, run

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

OUT_DIR_ENV = "LOADBATTERY_OUT_DIR"
DEFAULT_C_LIST = "0,0.1,0.5,0.9,1"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing


def _floats(text: str, n: int | None, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} values, got {len(vals)}")
    if any(math.isnan(v) for v in vals):
        raise UsageError(f"{what}: NaN is not allowed")
    return vals


def _load(text: str) -> LoadClass:
    E, T, P = _floats(text, 3, "--load")
    try:
        return LoadClass(E, T, P)
    except DomainError as exc:
        raise UsageError(f"--load: {exc}") from None


def _battery(args, lc: LoadClass) -> BatterySpec:
    if (args.battery is None) == (args.normalized is None):
        raise UsageError("give exactly one of --battery or --normalized")
    try:
        if args.battery is not None:
            return BatterySpec(*_floats(args.battery, 3, "--battery"))
        return denormalize(NormalizedBattery(*_floats(args.normalized, 3, "--normalized")), lc)
    except DomainError as exc:
        raise UsageError(str(exc)) from None


SECTIONS = {
    "load": {"E", "T", "P_bar"},
    "sim": {"lambda", "dt", "policy", "mode", "seed", "initial_profile", "chi0", "warmup",
            "tail", "stop_on_failure", "tol", "fill"},
    "battery": {"C", "W_bar", "W_under"},
    "normalized": {"c", "w_bar", "w_under"},
    "run": {"trajectory", "n_random", "duration"},
}


def read_config(text: str) -> dict[str, dict[str, str]]:
    """Parse an INI-style config; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"config: {exc}") from None
    out = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise UsageError(f"config: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SECTIONS[sec]:
                raise UsageError(f"config: unknown key {key!r} in [{sec}]; allowed: {sorted(SECTIONS[sec])}")
        out[sec] = dict(cp[sec])
    for sec in ("load", "sim"):
        if sec not in out:
            raise UsageError(f"config: missing section [{sec}]")
    if "battery" in out and "normalized" in out:
        raise UsageError("config: give [battery] or [normalized], not both")
    return out


def _num(sec, key, default=None, kind=float):
    if key not in sec:
        if default is None:
            raise UsageError(f"config: missing key {key!r}")
        return default
    raw = sec[key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise UsageError(f"config: bad value {raw!r} for {key!r}") from None


def sim_config_from(cfg: dict, seed: int | None) -> SimConfig:
    ld, sm = cfg["load"], cfg["sim"]
    try:
        lc = LoadClass(_num(ld, "E"), _num(ld, "T"), _num(ld, "P_bar"))
        policy = sm.get("policy", PolicyKind.CHARGE_SLACK_GREEDY.value)
        if policy not in {p.value for p in PolicyKind}:
            raise UsageError(f"config: unknown policy {policy!r}")
        init = sm.get("initial_profile", "auto")
        if init not in INITIAL_PROFILES:
            raise UsageError(f"config: initial_profile must be one of {INITIAL_PROFILES}")
        fill = sm.get("fill", "level")
        if fill not in FILL_RULES:
            raise UsageError(f"config: fill must be one of {tuple(FILL_RULES)}")
        return SimConfig(
            lc=lc,
            lam=_num(sm, "lambda"),
            dt=_num(sm, "dt"),
            policy=PolicyKind(policy),
            mode=sm.get("mode", "strict"),
            seed=seed if seed is not None else _num(sm, "seed", 0, int),
            initial_profile=init,
            chi0=_num(sm, "chi0", 0.0),
            warmup=_num(sm, "warmup", 2.0 * lc.T),
            tail=_num(sm, "tail", lc.T),
            stop_on_failure=_num(sm, "stop_on_failure", False, bool),
            tol=_num(sm, "tol", 1e-9),
            fill=fill,
        )
    except DomainError as exc:
        raise UsageError(f"config: {exc}") from None


def battery_from(cfg: dict, lc: LoadClass) -> BatterySpec | None:
    try:
        if "battery" in cfg:
            b = cfg["battery"]
            spec = BatterySpec(_num(b, "C"), _num(b, "W_bar"), _num(b, "W_under"))
        elif "normalized" in cfg:
            b = cfg["normalized"]
            spec = denormalize(NormalizedBattery(_num(b, "c"), _num(b, "w_bar"), _num(b, "w_under")), lc)
        else:
            return None
    except DomainError as exc:
        raise UsageError(f"config: {exc}") from None
    return spec


# ------------------------------------------------------------------ output


class Output:
    """Resolves where a command's files go and records them for the manifest."""

    def __init__(self, args):
        self.out = args.out
        self.out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV) or None
        self.quiet = args.quiet
        self.written: list[str] = []

    def path_for(self, default_name: str) -> Path | None:
        if self.out:
            return Path(self.out)
        if self.out_dir:
            return Path(self.out_dir) / default_name
        return None

    def emit(self, default_name: str, text: str) -> None:
        path = self.path_for(default_name)
        if path is None:
            sys.stdout.write(text)
            return
        atomic_write(path, text)
        self.written.append(str(path))
        self.info(f"wrote {path}")

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)


# ----------------------------------------------------------------- commands


def cmd_frontier(args, out: Output) -> int:
    cs = _floats(args.c, None, "--c")
    if not cs:
        raise UsageError("--c: need at least one value")
    for c in cs:
        if not 0.0 <= c <= 1.0:
            raise UsageError(f"--c: {c} is outside [0, 1]")
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    buf = io.StringIO()
    buf.write("c,w_bar,w_under\n")
    for c in cs:
        for wb, wu in frontier_curve(c, args.n):
            buf.write(format_row((c, wb, wu)))
    out.emit("frontier.csv", buf.getvalue())
    return EXIT_OK


def cmd_envelope(args, out: Output) -> int:
    lc = _load(args.load)
    if lc.unbounded:
        raise UsageError("--load: envelopes need a finite P_bar")
    grid = breakpoint_grid(lc, args.n)
    rows = zip(grid, lower_envelope(lc, grid), nominal_energy(lc, grid), upper_envelope(lc, grid))
    text = "sigma,x_lower,x_nominal,x_upper\n" + "".join(format_row(r) for r in rows)
    out.emit("envelope.csv", text)
    return EXIT_OK


def cmd_alloc(args, out: Output) -> int:
    lc = _load(args.load)
    if lc.unbounded:
        raise UsageError("--load: allocation profiles need a finite P_bar")
    half = derive_capacity(lc).C_max / 2.0
    if not -half <= args.chi <= half:
        raise UsageError(f"--chi {args.chi} is outside the valid interval [{-half:.9g}, {half:.9g}]")
    make = charge_slack_equalized if args.kind == "charge" else discharge_slack_equalized
    out.emit(f"alloc_{args.kind}.csv", make(lc, args.chi, n=args.n).to_csv())
    return EXIT_OK


def _trajectory_set(spec_text: str, cfg_run: dict, sim: SimConfig, battery: BatterySpec | None):
    """Resolve ``suite``, ``probe:<pattern>``, ``random`` or a CSV path into named trajectories."""
    if spec_text == "suite" or spec_text.startswith("probe:") or spec_text == "random":
        if battery is None:
            raise UsageError("trajectory needs a [battery] or [normalized] section")
        try:
            check_within_max(battery, sim.lc)
        except DomainError as exc:
            raise UsageError(str(exc)) from None
        n_random = _num(cfg_run, "n_random", 2, int)
        duration = _num(cfg_run, "duration", sim.lc.T)
        if spec_text == "suite":
            return adversarial_suite(battery, sim.dt, sim.chi0, seed=sim.seed, n_random=n_random,
                                     duration=duration)
        if spec_text == "random":
            return {"random": random_member(battery, sim.seed, duration, sim.dt, sim.chi0)}
        pat = spec_text.split(":", 1)[1]
        if pat not in PATTERNS:
            raise UsageError(f"unknown probe pattern {pat!r}; choose from {PATTERNS}")
        try:
            return {pat: extremal_probe(battery, pat, sim.dt, sim.chi0)}
        except DomainError as exc:
            raise UsageError(str(exc)) from None
    path = Path(spec_text)
    if not path.is_file():
        raise UsageError(f"trajectory file {spec_text!r} not found")
    try:
        traj = Trajectory.from_csv(path.read_text())
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return {path.stem: traj}


def cmd_simulate(args, out: Output) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    cfg = read_config(text)
    sim = sim_config_from(cfg, args.seed)
    battery = battery_from(cfg, sim.lc)
    run_sec = cfg.get("run", {})
    traj_spec = args.trajectory or run_sec.get("trajectory", "suite")
    trajs = _trajectory_set(traj_spec, run_sec, sim, battery)
    out_dir = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    verdicts = {}
    files = []
    for name in sorted(trajs):
        try:
            res = run(sim, trajs[name])
        except DomainError as exc:
            raise UsageError(str(exc)) from None
        verdicts[name] = res.verdict
        for kind, body in (("results", res.to_csv()), ("events", res.events_csv())):
            p = out_dir / f"{kind}_{name}.csv"
            atomic_write(p, body)
            files.append(p.name)
        out.info(f"{name}: {res.verdict} (events={len(res.events)}, deadline_failures={res.deadline_failures})")
    manifest = {
        "tool": "loadbattery",
        "version": __version__,
        "seed": sim.seed,
        "config": {k: v for k, v in sim.echo()},
        "battery": None if battery is None else {"C": battery.C, "W_bar": battery.W_bar, "W_under": battery.W_under},
        "trajectory": traj_spec,
        "outputs": sorted(files),
        "verdicts": verdicts,
    }
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tracked = all(v == "tracked" for v in verdicts.values())
    if not out.quiet:
        print("tracked" if tracked else "failed")
    return EXIT_OK if tracked else EXIT_FAILED


def verify_report(lc: LoadClass, spec: BatterySpec) -> list[tuple[str, str]]:
    check_within_max(spec, lc)
    nb = normalize(spec, lc)
    res = area_check(lc, spec)
    cap = derive_capacity(lc)
    ratio = res.sup_a / res.budget if res.budget > 0 else (0.0 if res.sup_a == 0 else math.inf)
    lines = [
        ("load", f"E={lc.E:.9g} T={lc.T:.9g} P_bar={lc.P_bar:.9g}"),
        ("phi_max", f"C={cap.C_max:.9g} W_bar={cap.W_bar_max:.9g} W_under={cap.W_under_max:.9g}"),
        ("normalized", f"c={nb.c:.9g} w_bar={nb.w_bar:.9g} w_under={nb.w_under:.9g}"),
        ("region", region_flag(nb).reason.value),
        ("quadratic_test", tradeoff_feasible(nb).value),
        ("quadratic_margin", f"{quadratic_margin(nb):.9g}"),
        ("max_area", f"{res.sup_a:.9g}"),
        ("area_budget", f"{res.budget:.9g}"),
        ("max_area_ratio", f"{ratio:.9g}"),
        ("analytic", "not_excluded" if res.satisfied else "violates_necessary"),
    ]
    if not res.satisfied:
        lines.append(("witness_chi", f"{res.witness * cap.C_max:.9g}"))
    return lines


def cmd_verify(args, out: Output) -> int:
    lc = _load(args.load)
    if lc.unbounded:
        raise UsageError("--load: verify needs a finite P_bar")
    spec = _battery(args, lc)
    try:
        lines = verify_report(lc, spec)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    if args.empirical:
        try:
            base = SimConfig(lc, args.lam, args.dt, seed=args.seed or 0, stop_on_failure=True)
        except DomainError as exc:
            raise UsageError(str(exc)) from None
        suite = adversarial_suite(spec, base.dt, 0.0, seed=base.seed, n_random=args.n_random, duration=lc.T)
        for pol in PolicyKind:
            cfg = replace(base, policy=pol)
            ok = all(run(cfg, suite[name]).tracked for name in sorted(suite))
            lines.append((f"empirical.{pol.value}", "tracked" if ok else "failed"))
    text = "".join(f"{k}: {v}\n" for k, v in lines)
    if out.path_for("verify.txt") is None:
        sys.stdout.write(text)
    else:
        out.emit("verify.txt", text)
    return EXIT_OK


def cmd_probe(args, out: Output) -> int:
    lc = _load(args.load) if args.load else None
    if args.normalized is not None and lc is None:
        raise UsageError("--normalized needs --load")
    if args.battery is None and args.normalized is None:
        raise UsageError("give --battery or --normalized")
    spec = _battery(args, lc)
    if lc is not None:
        try:
            check_within_max(spec, lc)
        except DomainError as exc:
            raise UsageError(str(exc)) from None
    seed = args.seed or 0
    try:
        if args.pattern in PATTERNS:
            traj = extremal_probe(spec, args.pattern, args.dt, args.chi0)
        elif args.pattern == "random":
            traj = random_member(spec, seed, args.duration, args.dt, args.chi0)
        elif args.pattern == "constant":
            traj = constant(args.level, args.duration, args.dt)
        else:
            traj = square_wave(args.amplitude, args.period, args.duration, args.dt)
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out.emit(f"probe_{args.pattern}.csv", traj.to_csv())
    return EXIT_OK


# ------------------------------------------------------------------- driver


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (overrides the config file).")
    common.add_argument("--out", default=None, help="Output file path.")
    common.add_argument("--out-dir", default=None, help=f"Output directory (default: ${OUT_DIR_ENV} or stdout).")
    common.add_argument("--quiet", action="store_true", help="Suppress progress messages.")

    ap = argparse.ArgumentParser(prog="loadbattery", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("frontier", parents=[common], help="Normalized trade-off frontier as CSV.")
    p.add_argument("--c", default=DEFAULT_C_LIST, help="Comma-separated normalized volumes.")
    p.add_argument("--n", type=int, default=101, help="Points per curve.")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("envelope", parents=[common], help="Energy envelopes of a load class.")
    p.add_argument("--load", required=True, help="E,T,P_bar")
    p.add_argument("--n", type=int, default=200, help="Uniform grid intervals (breakpoints are added).")
    p.set_defaults(func=cmd_envelope)

    p = sub.add_parser("alloc", parents=[common], help="Slack-equalized allocation profile.")
    p.add_argument("--load", required=True, help="E,T,P_bar")
    p.add_argument("--chi", type=float, required=True, help="Battery stored energy.")
    p.add_argument("--kind", choices=("charge", "discharge"), required=True)
    p.add_argument("--n", type=int, default=200, help="Uniform grid intervals (kinks are added).")
    p.set_defaults(func=cmd_alloc)

    p = sub.add_parser("simulate", parents=[common], help="Run the finite-fleet simulator from a config file.")
    p.add_argument("--config", required=True)
    p.add_argument("--trajectory", default=None,
                   help="'suite', 'random', 'probe:<pattern>' or a t,w CSV file (overrides [run] trajectory).")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="Check a battery against the analytic bound.")
    p.add_argument("--load", required=True, help="E,T,P_bar")
    p.add_argument("--battery", default=None, help="C,W_bar,W_under")
    p.add_argument("--normalized", default=None, help="c,w_bar,w_under")
    p.add_argument("--empirical", action="store_true", help="Also run the probe suite under every policy.")
    p.add_argument("--lam", type=float, default=100.0, help="Arrival rate for --empirical (T=1 gives 100 loads).")
    p.add_argument("--dt", type=float, default=0.001)
    p.add_argument("--n-random", type=int, default=2)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("probe", parents=[common], help="Emit a battery trajectory as CSV.")
    p.add_argument("--pattern", required=True, choices=PATTERNS + ("random", "constant", "square"))
    p.add_argument("--battery", default=None, help="C,W_bar,W_under")
    p.add_argument("--normalized", default=None, help="c,w_bar,w_under (needs --load)")
    p.add_argument("--load", default=None, help="E,T,P_bar")
    p.add_argument("--dt", type=float, default=0.001)
    p.add_argument("--chi0", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--level", type=float, default=0.0, help="Power for --pattern constant.")
    p.add_argument("--amplitude", type=float, default=0.0, help="Power for --pattern square.")
    p.add_argument("--period", type=float, default=1.0, help="Period for --pattern square.")
    p.set_defaults(func=cmd_probe)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    out = Output(args)
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
