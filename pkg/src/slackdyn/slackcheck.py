"""Slack-capability checks on simulated trajectories.

A device has *strong* slack capability when one of its states settles and all
devices settle on a common value; *weak* capability replaces the terminal
values by averages over an integer number of oscillation periods. Both are
finite-horizon surrogates evaluated on a trailing window.

Variables are only compared within a unit class (speeds with speeds, powers
with powers); matches across classes are reported separately.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .dynsim import Trajectory, detect_steady_state
from .errors import (
    IdentityViolated,
    NoPeriodDetected,
    NoSlackDevice,
    ResidualTransientPower,
    TrajectoryTooShort,
)
from .powerflow import SlackSpec

DEFAULT_TOL = 1e-4
DEFAULT_WINDOW = 2.0

# default slack variable per device type, detected from the channel layout:
# (channel that identifies the type, candidate channel, unit class)
_DEFAULTS = (
    ("delta", "omega", "frequency"),  # synchronous machine speed
    ("alpha", "freq", "frequency"),  # GFM virtual frequency
    ("theta_hat", "freq", "frequency"),  # GFL PLL estimate
    ("sigma", "sigma", "power"),  # ideal slack power
)


class Verdict(str, Enum):
    STRONG = "Strong"
    WEAK = "Weak"
    NONE = "None"


@dataclass
class DeviceResult:
    variable: str
    unit_class: str
    value: float  # terminal value (strong) or period average (weak)
    deviation: float  # spread over the window, or distance from the class value
    settled: bool
    period: float | None = None
    fallback: bool = False


@dataclass
class CapabilityReport:
    mode: str
    verdict: Verdict
    sigma_hat_estimate: float | None
    per_device: dict
    window: tuple
    tol: float
    classes: dict = field(default_factory=dict)
    cross_class: dict = field(default_factory=dict)

    def meets(self, mode: str) -> bool:
        if mode == "strong":
            return self.verdict == Verdict.STRONG
        return self.verdict in (Verdict.STRONG, Verdict.WEAK)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "verdict": self.verdict.value,
            "sigma_hat_estimate": self.sigma_hat_estimate,
            "tol": self.tol,
            "window": list(self.window),
            "per_device": {k: asdict(v) for k, v in self.per_device.items()},
            "classes": self.classes,
            "cross_class": self.cross_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"slack capability ({self.mode}): {self.verdict.value}",
            f"window: {self.window[0]:.3f} .. {self.window[1]:.3f} s, tol {self.tol:g}",
        ]
        if self.sigma_hat_estimate is not None:
            lines.append(f"common value estimate: {self.sigma_hat_estimate:.9f}")
        for name, r in self.per_device.items():
            tag = "settled" if r.settled else "not settled"
            extra = f", period {r.period:.4f} s" if r.period else ""
            lines.append(
                f"  {name:<12} {r.variable:<10} [{r.unit_class}] value {r.value:.9f} "
                f"deviation {r.deviation:.3e} ({tag}{extra})"
            )
        for cls, info in self.classes.items():
            lines.append(f"  class {cls}: common value {info['value']:.9f}, spread {info['spread']:.3e}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# candidate selection


def default_candidates(traj: Trajectory) -> dict:
    """Map device name to ``(channel, unit class)`` for slack-capable devices."""
    out = {}
    for dev in traj.devices():
        for marker, chan, cls in _DEFAULTS:
            if f"dev{dev}.{marker}" in traj and f"dev{dev}.{chan}" in traj:
                out[dev] = (f"dev{dev}.{chan}", cls)
                break
    return out


def _resolve_candidates(traj, candidate_vars):
    if candidate_vars is None:
        cands = default_candidates(traj)
    else:
        cands = {}
        for dev, spec in candidate_vars.items():
            chan, cls = spec if isinstance(spec, tuple) else (spec, "custom")
            if not chan.startswith("dev"):
                chan = f"dev{dev}.{chan}"
            if chan not in traj:
                raise KeyError(f"trajectory has no channel {chan!r}")
            cands[dev] = (chan, cls)
    if not cands:
        raise NoSlackDevice("trajectory contains no slack-capable device channels")
    return cands


def _device_states(traj, dev):
    prefix = f"dev{dev}."
    return [c for c in traj.state_columns if c.startswith(prefix)]


def _tail(traj: Trajectory, window: float) -> Trajectory:
    t = traj.times
    if len(t) < 2 or t[-1] - t[0] < window - 1e-9:
        raise TrajectoryTooShort(
            f"trajectory spans {t[-1] - t[0] if len(t) else 0:.3f} s, window needs {window:.3f} s"
        )
    return traj.window(t[-1] - window)


def _group(results: dict, tol: float):
    by_class = {}
    for name, r in results.items():
        by_class.setdefault(r.unit_class, []).append(r.value)
    classes = {}
    for cls, vals in by_class.items():
        v = np.array(vals)
        classes[cls] = {"value": float(v.mean()), "spread": float(np.ptp(v)), "devices": len(vals)}
    cross = {}
    keys = sorted(classes)
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            a, b = classes[keys[i]]["value"], classes[keys[j]]["value"]
            cross[f"{keys[i]}~{keys[j]}"] = {"difference": a - b, "match": bool(abs(a - b) < tol)}
    return classes, cross


def _sigma_estimate(classes):
    for cls in ("frequency", "power"):
        if cls in classes:
            return classes[cls]["value"]
    return next(iter(classes.values()))["value"] if classes else None


# ---------------------------------------------------------------------------
# strong capability


def check_strong(traj: Trajectory, candidate_vars=None, tol: float = DEFAULT_TOL, window: float = DEFAULT_WINDOW):
    tail = _tail(traj, window)
    cands = _resolve_candidates(traj, candidate_vars)
    results = {}
    for dev, (chan, cls) in cands.items():
        x = tail.column(chan)
        dev_spread = float(np.max(np.abs(x - x[-1])))
        res = DeviceResult(chan.split(".", 1)[1], cls, float(x[-1]), dev_spread, dev_spread < tol)
        if not res.settled and candidate_vars is None:
            # when no frequency channel settles, fall back to the device's other states
            for other in _device_states(traj, dev):
                if other == chan:
                    continue
                y = tail.column(other)
                sp = float(np.max(np.abs(y - y[-1])))
                if sp < tol:
                    res = DeviceResult(other.split(".", 1)[1], f"state:{other.split('.', 1)[1]}", float(y[-1]), sp, True, fallback=True)
                    break
        results[dev] = res
    classes, cross = _group(results, tol)
    settled = all(r.settled for r in results.values())
    common = all(c["spread"] < tol for c in classes.values())
    verdict = Verdict.STRONG if settled and common else Verdict.NONE
    return CapabilityReport(
        "strong", verdict, _sigma_estimate(classes), results, (float(tail.times[0]), float(tail.times[-1])), tol, classes, cross
    )


# ---------------------------------------------------------------------------
# weak capability


def estimate_period(t, x, min_periods: int = 3):
    """Dominant period from the first autocorrelation peak, refined by a
    parabola through the three samples around it."""
    dt = np.diff(t)
    if np.max(dt) - np.min(dt) > 1e-6 * np.max(dt):
        grid = np.linspace(t[0], t[-1], len(t))
        x = np.interp(grid, t, x)
        t = grid
    h = t[1] - t[0]
    y = x - x.mean()
    n = len(y)
    if not np.any(y):
        raise NoPeriodDetected("signal is constant")
    spec = np.fft.rfft(y, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:n]
    ac /= np.arange(n, 0, -1)  # unbiased
    ac /= ac[0]
    neg = np.flatnonzero(ac < 0)
    if neg.size == 0:
        raise NoPeriodDetected("autocorrelation never changes sign: no oscillation")
    start = neg[0]
    limit = n // min_periods + 1
    if start >= limit:
        raise NoPeriodDetected(f"fewer than {min_periods} periods in the window")
    seg = ac[start:limit]
    if seg.size < 3:
        raise NoPeriodDetected(f"fewer than {min_periods} periods in the window")
    # first local maximum comparable to the strongest one: later multiples
    # of the period are nearly as tall and must not win
    inner = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
    if inner.size == 0:
        raise NoPeriodDetected("no clear autocorrelation peak")
    top = seg[inner].max()
    k = start + int(inner[np.argmax(seg[inner] >= 0.8 * top)])
    if k <= start or k >= limit - 1 or ac[k] < 0.2:
        raise NoPeriodDetected("no clear autocorrelation peak")
    a, b, c = ac[k - 1], ac[k], ac[k + 1]
    denom = a - 2 * b + c
    shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    period = _refine_period(t, x, (k + shift) * h, h)
    if (t[-1] - t[0]) < min_periods * period:
        raise NoPeriodDetected(f"fewer than {min_periods} periods in the window")
    return float(period)


def _refine_period(t, x, p0, h):
    """Polish the autocorrelation estimate: the finite-window correlation is
    biased by a fraction of a sample, so minimise the mean-square mismatch
    between ``x(t)`` and ``x(t + P)`` over ``P`` near ``p0``."""

    def mismatch(p):
        keep = t + p <= t[-1]
        return float(np.mean((np.interp(t[keep] + p, t, x) - x[keep]) ** 2))

    lo, hi = p0 - 2 * h, p0 + 2 * h
    g = 0.5 * (math.sqrt(5.0) - 1.0)
    a, b = hi - g * (hi - lo), lo + g * (hi - lo)
    fa, fb = mismatch(a), mismatch(b)
    for _ in range(60):
        if fa < fb:
            hi, b, fb = b, a, fa
            a = hi - g * (hi - lo)
            fa = mismatch(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + g * (hi - lo)
            fb = mismatch(b)
        if hi - lo < 1e-9 * p0:
            break
    return 0.5 * (lo + hi)


def period_average(t, x, period):
    """Mean of ``x`` over the largest whole number of periods that ends at
    the last sample (trapezoidal integration, interpolated start)."""
    n_per = int(np.floor((t[-1] - t[0]) / period + 1e-9))
    if n_per < 1:
        raise NoPeriodDetected("window shorter than one period")
    t0 = t[-1] - n_per * period
    x0 = np.interp(t0, t, x)
    mask = t > t0
    tt = np.concatenate([[t0], t[mask]])
    xx = np.concatenate([[x0], x[mask]])
    return float(np.trapezoid(xx, tt) / (tt[-1] - tt[0])), n_per


def check_weak(traj: Trajectory, candidate_vars=None, tol: float = DEFAULT_TOL, window: float | None = None, min_periods: int = 3):
    """``window`` defaults to the second half of the trajectory."""
    t_all = traj.times
    if window is None:
        window = 0.5 * (t_all[-1] - t_all[0])
    tail = _tail(traj, window)
    t = tail.times
    cands = _resolve_candidates(traj, candidate_vars)
    results = {}
    inst_ok = True
    for dev, (chan, cls) in cands.items():
        x = tail.column(chan)
        spread = float(np.ptp(x))
        if spread < tol / 10:
            results[dev] = DeviceResult(chan.split(".", 1)[1], cls, float(x.mean()), spread, True)
            continue
        inst_ok = inst_ok and float(np.max(np.abs(x - x[-1]))) < tol
        period = estimate_period(t, x, min_periods)
        avg, _ = period_average(t, x, period)
        results[dev] = DeviceResult(chan.split(".", 1)[1], cls, avg, spread, False, period=period)
    classes, cross = _group(results, tol)
    for r in results.values():
        r.deviation = abs(r.value - classes[r.unit_class]["value"])
    common = all(c["spread"] < tol for c in classes.values())
    inst_common = inst_ok and all(
        r.settled or r.deviation < tol for r in results.values()
    )
    if common and inst_common and all(r.settled for r in results.values()):
        verdict = Verdict.STRONG
    elif common:
        verdict = Verdict.WEAK
    else:
        verdict = Verdict.NONE
    return CapabilityReport(
        "weak", verdict, _sigma_estimate(classes), results, (float(t[0]), float(t[-1])), tol, classes, cross
    )


def check(traj: Trajectory, mode: str = "strong", tol: float = DEFAULT_TOL, window: float | None = None):
    if mode == "strong":
        return check_strong(traj, tol=tol, window=DEFAULT_WINDOW if window is None else window)
    if mode == "weak":
        strong = check_strong(traj, tol=tol, window=DEFAULT_WINDOW if window is None else window)
        if strong.verdict == Verdict.STRONG:
            strong.mode = "weak"
            return strong
        return check_weak(traj, tol=tol, window=window)
    raise ValueError(f"unknown check mode {mode!r}")


# ---------------------------------------------------------------------------
# taxonomy


class Distribution(str, Enum):
    CENTRALIZED = "Centralized"
    DISTRIBUTED = "Distributed"


class Cardinality(str, Enum):
    SINGLE = "SingleVariable"
    MULTI = "MultiVariable"


class Temporality(str, Enum):
    STATIC = "Static"
    DYNAMIC = "Dynamic"


class Scope(str, Enum):
    LOCAL = "Local"
    NETWORK_WIDE = "NetworkWide"


@dataclass(frozen=True)
class SlackDescriptor:
    distribution: Distribution
    cardinality: Cardinality
    temporality: Temporality
    scope: Scope

    def as_tuple(self):
        return (self.distribution.value, self.cardinality.value, self.temporality.value, self.scope.value)

    def __str__(self):
        return ", ".join(self.as_tuple())


def classify(config) -> SlackDescriptor:
    """Classify a static slack specification, a list of
    :class:`~slackdyn.devices.SlackRole`, or an assembled system."""
    if isinstance(config, SlackSpec):
        if config.mode == "distributed":
            k = config.participation or {}
            n = sum(1 for v in k.values() if v != 0)
        else:
            n = 1
        if n == 0:
            raise NoSlackDevice("no generator participates in the slack")
        return SlackDescriptor(
            Distribution.DISTRIBUTED if n > 1 else Distribution.CENTRALIZED,
            Cardinality.SINGLE,
            Temporality.DYNAMIC if config.mode == "dynamic" else Temporality.STATIC,
            Scope.NETWORK_WIDE,
        )
    if hasattr(config, "devices"):
        roles = [d.slack_role() for d in config.devices if d.online]
    else:
        roles = list(config)
    roles = [r for r in roles if r is not None and r.carries_slack]
    if not roles:
        raise NoSlackDevice("no device carries slack power")
    return SlackDescriptor(
        Distribution.DISTRIBUTED if len(roles) > 1 else Distribution.CENTRALIZED,
        Cardinality.MULTI if any(r.m_states > 1 for r in roles) else Cardinality.SINGLE,
        Temporality.DYNAMIC if any(r.dynamic for r in roles) else Temporality.STATIC,
        Scope.LOCAL if all(r.local for r in roles) else Scope.NETWORK_WIDE,
    )


# ---------------------------------------------------------------------------
# power-split audit


@dataclass
class SplitAudit:
    identity_error: dict  # device -> max |p - (ps + pt - ploss)|
    steady_time: float | None
    residual_transient: dict  # device -> max |pt| after steady_time
    approximation_gap: dict  # machine -> max |ps - ps_approx|
    ok: bool

    def to_dict(self):
        return asdict(self)


def split_devices(traj: Trajectory) -> list:
    return [d for d in traj.devices() if all(f"dev{d}.{s}" in traj for s in ("ps", "pt", "p"))]


def audit_power_split(
    traj: Trajectory,
    tol_identity: float = 1e-9,
    tol_steady: float = DEFAULT_TOL,
    strict: bool = True,
    steady_tol: float = DEFAULT_TOL,
    steady_window: float = DEFAULT_WINDOW,
) -> SplitAudit:
    """Check ``p = ps + pt - ploss`` sample by sample and ``|pt| < tol_steady``
    once the trajectory has settled. With ``strict`` the first violation raises."""
    t = traj.times
    ident, resid, gap = {}, {}, {}
    ok = True
    t_ss = detect_steady_state(traj, steady_tol, steady_window)
    for d in split_devices(traj):
        ps, pt, p = (traj.column(f"dev{d}.{s}") for s in ("ps", "pt", "p"))
        loss = traj.column(f"dev{d}.ploss") if f"dev{d}.ploss" in traj else 0.0
        err = np.abs(p - (ps + pt - loss))
        ident[d] = float(err.max())
        if ident[d] >= tol_identity:
            ok = False
            if strict:
                k = int(np.argmax(err))
                raise IdentityViolated(d, float(t[k]), float(err[k]))
        if t_ss is not None:
            r = float(np.max(np.abs(pt[t >= t_ss])))
            resid[d] = r
            if r >= tol_steady:
                ok = False
                if strict:
                    raise ResidualTransientPower(d, r)
        if f"dev{d}.ps_approx" in traj:
            gap[d] = float(np.max(np.abs(ps - traj.column(f"dev{d}.ps_approx"))))
    return SplitAudit(ident, t_ss, resid, gap, ok)
