"""Command-line front end.

Exit codes: 0 ok, 1 usage or input error, 2 power-flow failure,
3 dynamic-simulation failure, 4 capability check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import caseio
from .dynsim import Trajectory, run
from .errors import (
    DeviceInitInfeasible,
    NoPeriodDetected,
    NonConvergence,
    ParseError,
    PowerFlowFailed,
    SchemaError,
    SingularJacobian,
    SlackDynError,
    TrajectoryTooShort,
    ValidationError,
)
from .powerflow import Injections, equal_participation
from .slackcheck import audit_power_split, check, split_devices

EXIT_OK, EXIT_USAGE, EXIT_POWERFLOW, EXIT_DYNAMIC, EXIT_CAPABILITY = 0, 1, 2, 3, 4

log = logging.getLogger("slackdyn")


@dataclass(frozen=True)
class RunConfig:
    case: str
    scenario: str
    out: Path
    t_end: float | None = None
    dt: float | None = None
    plot: bool = False
    tol: float = 1e-4

    def __post_init__(self):
        for name in ("t_end", "dt"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"--{name.replace('_', '-')} must be positive")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _setup_logging():
    level = os.environ.get("SLACKDYN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------------------
# powerflow


def _participation(arg, case):
    if arg is None or arg == "equal":
        return arg
    path = Path(arg)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"participation file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"participation file {path}: expected an object mapping bus id to factor")
    try:
        return {int(k): float(v) for k, v in raw.items()}
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"participation file {path}: {exc}") from exc


def format_powerflow(sol, system) -> str:
    gen_at = {}
    for k, g in enumerate(system.generators):
        gen_at[g.bus] = (sol.p_gen[k], sol.q_gen[k])
    lines = [
        f"power flow: converged in {sol.iterations} iterations, max mismatch {sol.mismatch:.3e} pu",
        f"{'bus':>5} {'v [pu]':>12} {'theta [rad]':>14} {'p_gen':>12} {'q_gen':>12}",
    ]
    for k, b in enumerate(sol.bus_ids):
        pg, qg = gen_at.get(b, (None, None))
        gen = f"{pg:12.6f} {qg:12.6f}" if pg is not None else f"{'':>12} {'':>12}"
        lines.append(f"{b:>5} {sol.v[k]:12.6f} {sol.theta[k]:14.8f} {gen}")
    lines.append(f"slack sigma_hat: {sol.sigma_hat:.9f} pu")
    lines.append(f"losses: {sol.losses:.9f} pu")
    return "\n".join(lines)


def cmd_powerflow(args) -> int:
    from .powerflow import solve_powerflow

    case = caseio.parse_case(caseio.resolve_case_path(args.case))
    system = caseio.build_system(case)
    spec = caseio.build_slack(case, mode=args.slack_mode, participation=_participation(args.participation, case))
    try:
        sol = solve_powerflow(system.net, system.power_flow_data(), spec)
    except NonConvergence as exc:
        print(f"power flow did not converge: {exc}", file=sys.stderr)
        for k, err in enumerate(exc.trace):
            print(f"  iteration {k:2d}: max mismatch {err:.3e}", file=sys.stderr)
        return EXIT_POWERFLOW
    except SingularJacobian as exc:
        print(f"power flow failed: singular Jacobian ({exc})", file=sys.stderr)
        return EXIT_POWERFLOW
    print(format_powerflow(sol, system))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _nice_ticks(lo, hi, n=5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0]
    if hi - lo < 1e-12 * max(1.0, abs(lo)):
        pad = max(abs(lo) * 1e-3, 1e-6)
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def svg_plot(series: dict, xlabel: str, ylabel: str, title: str, width=720, height=420) -> str:
    """Single-panel line plot; ``series`` maps a label to ``(x, y)`` arrays."""
    ml, mr, mt, mb = 80, 20, 40, 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    xt, yt = _nice_ticks(x0, x1), _nice_ticks(y0, y1)
    x0, x1 = min(x0, xt[0]), max(x1, xt[-1])
    y0, y1 = min(y0, yt[0]), max(y1, yt[-1])
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in xt:
        X = sx(v)
        out.append(f'<line x1="{X:.2f}" y1="{mt + ph}" x2="{X:.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(
            f'<text x="{X:.2f}" y="{mt + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:g}</text>'
        )
    for v in yt:
        Y = sy(v)
        out.append(f'<line x1="{ml - 5}" y1="{Y:.2f}" x2="{ml}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{ml}" y1="{Y:.2f}" x2="{ml + pw}" y2="{Y:.2f}" stroke="#dddddd"/>')
        out.append(
            f'<text x="{ml - 8}" y="{Y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.6g}</text>'
        )
    out.append(
        f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="13">{xlabel}</text>'
    )
    out.append(
        f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 16 {mt + ph / 2})">{ylabel}</text>'
    )
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    for k, (label, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        c = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"><title>{label}</title></polyline>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_powersplit(traj: Trajectory, path) -> None:
    cols = ["t"]
    for d in split_devices(traj):
        for s in ("ps", "pt", "p", "ploss"):
            if f"dev{d}.{s}" in traj:
                cols.append(f"dev{d}.{s}")
    sub = np.column_stack([traj.column(c) for c in cols])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        np.savetxt(fh, sub, fmt="%.12g", delimiter=",", header=",".join(cols), comments="")


def capability_summary(traj: Trajectory, tol: float) -> dict:
    """Best verdict the trajectory supports (Strong, else Weak), plus the
    power-split audit."""
    try:
        rep = check(traj, "weak", tol=tol)
        out = rep.to_dict()
    except (TrajectoryTooShort, NoPeriodDetected) as exc:
        out = {"mode": "weak", "verdict": "None", "reason": str(exc)}
    audit = audit_power_split(traj, strict=False)
    out["power_split"] = audit.to_dict()
    if traj.failure is not None:
        out["failure"] = {"type": type(traj.failure).__name__, "message": str(traj.failure)}
    return out


def theta1_channel(traj: Trajectory) -> str:
    if "bus1.theta" in traj:
        return "bus1.theta"
    return next(n for n in traj.names if n.endswith(".theta") and n.startswith("bus"))


def execute_run(cfg: RunConfig) -> int:
    case = caseio.parse_case(caseio.resolve_case_path(cfg.case))
    scenario = caseio.build_scenario(case, cfg.scenario, t_end=cfg.t_end, dt=cfg.dt)
    system = caseio.build_system(case)
    try:
        traj = run(system, scenario)
    except PowerFlowFailed as exc:
        print(f"{cfg.scenario}: {exc}", file=sys.stderr)
        return EXIT_POWERFLOW
    except DeviceInitInfeasible as exc:
        print(f"{cfg.scenario}: {exc}", file=sys.stderr)
        return EXIT_DYNAMIC
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    write_powersplit(traj, out / "powersplit.csv")
    summary = capability_summary(traj, cfg.tol)
    (out / "capability.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if cfg.plot:
        ch = theta1_channel(traj)
        svg = svg_plot(
            {ch: (traj.times, traj.column(ch))},
            "t [s]",
            f"{ch} [rad]",
            f"{case.meta.name} / {cfg.scenario}: voltage phase angle at bus {ch[3:-6]}",
        )
        (out / "theta1.svg").write_text(svg, encoding="utf-8")
    if traj.failure is not None:
        print(
            f"{cfg.scenario}: simulation stopped at t = {traj.times[-1]:.4f} s: {traj.failure}; partial outputs in {out}",
            file=sys.stderr,
        )
        return EXIT_DYNAMIC
    print(f"{cfg.scenario}: completed t = {traj.times[-1]:g} s, verdict {summary['verdict']}; outputs in {out}")
    return EXIT_OK


def _execute_safe(cfg: RunConfig) -> int:
    try:
        return execute_run(cfg)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def cmd_run(args) -> int:
    names = [s for part in args.scenario for s in part.split(",") if s]
    if names == ["all"]:
        case = caseio.parse_case(caseio.resolve_case_path(args.case))
        names = list(case.scenarios)
    multi = len(names) > 1
    cfgs = [
        RunConfig(
            case=str(args.case),
            scenario=name,
            out=Path(args.out) / name if multi else Path(args.out),
            t_end=args.t_end,
            dt=args.dt,
            plot=args.plot,
            tol=args.tol,
        )
        for name in names
    ]
    if args.jobs > 1 and multi:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_execute_safe, cfgs))
    else:
        codes = [_execute_safe(c) for c in cfgs]
    return max(codes)


# ---------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    traj = Trajectory.from_csv(args.traj)
    try:
        rep = check(traj, args.mode, tol=args.tol, window=args.window)
    except (TrajectoryTooShort, NoPeriodDetected) as exc:
        print(f"slack capability ({args.mode}): None ({exc})")
        return EXIT_CAPABILITY
    print(rep.to_text())
    return EXIT_OK if rep.meets(args.mode) else EXIT_CAPABILITY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slackdyn", description="Power-flow, dynamic simulation and slack-capability checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pf = sub.add_parser("powerflow", help="solve the static power flow of a case")
    pf.add_argument("--case", required=True, help="case file or bundled case name")
    pf.add_argument("--slack-mode", choices=["single", "distributed", "dynamic"])
    pf.add_argument("--participation", help="'equal' or a JSON file mapping bus id to participation factor")
    pf.set_defaults(func=cmd_powerflow)

    r = sub.add_parser("run", help="simulate a scenario and write trajectory, power split and capability report")
    r.add_argument("--case", required=True, help="case file or bundled case name")
    r.add_argument("--scenario", required=True, action="append", help="scenario name; comma list or 'all' allowed")
    r.add_argument("--t-end", type=_positive)
    r.add_argument("--dt", type=_positive)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--plot", action="store_true", help="also write theta1.svg")
    r.add_argument("--jobs", type=int, default=1, help="run several scenarios in parallel")
    r.add_argument("--tol", type=_positive, default=1e-4, help="capability tolerance")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="check slack capability of a recorded trajectory")
    c.add_argument("--traj", required=True)
    c.add_argument("--mode", required=True, choices=["strong", "weak"])
    c.add_argument("--tol", type=_positive, default=1e-4)
    c.add_argument("--window", type=_positive)
    c.set_defaults(func=cmd_check)

    sub.add_parser("cases", help="list bundled cases").set_defaults(func=cmd_cases)
    return p


def cmd_cases(args) -> int:
    for name in caseio.bundled_cases():
        case = caseio.parse_case(caseio.bundled_case_path(name))
        print(f"{name:<28} scenarios: {', '.join(case.scenarios)}")
    return EXIT_OK


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (ParseError, ValidationError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PowerFlowFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_POWERFLOW
    except SlackDynError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
