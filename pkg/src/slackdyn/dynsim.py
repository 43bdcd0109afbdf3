"""Time-domain simulation of the network DAE.

The global unknown vector is ``z = [device states..., V (per bus), theta (per
bus)]``. Device rows carry ``T_i x_i' = f_i``; rows with ``T_i = 0`` are
algebraic. Network rows balance, per bus, the power leaving into the grid
against the sum of device injections. Integration uses the implicit
trapezoidal rule with a fixed step and a full Newton solve per step.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .devices import (
    Agc,
    Device,
    Gfl,
    Gfm,
    IdealSlack,
    ReferenceFrame,
    RlcLoad,
    StaticLoad,
    SyncMachine,
    check_integral_governors,
)
from .errors import (
    ConfigurationError,
    DeviceInitInfeasible,
    NonConvergence,
    PowerFlowFailed,
    SchemaError,
    SingularJacobian,
    StepNewtonDiverged,
)
from .netcore import Network, build_admittance, injection_jacobians
from .powerflow import Generator, Injections, PowerFlowSolution, SlackSpec, solve_powerflow

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 20
GENERATION_KINDS = ("machine", "gfm", "gfl", "ideal_slack")


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class ScaleLoad:
    bus: int
    factor: float


@dataclass(frozen=True)
class SetParam:
    device: str
    field: str
    value: float


@dataclass(frozen=True)
class DisconnectDevice:
    device: str


@dataclass(frozen=True)
class Event:
    t: float
    action: ScaleLoad | SetParam | DisconnectDevice


@dataclass(frozen=True)
class Perturbation:
    """Offset added to a differential state right after initialization."""

    device: str
    state: str
    delta: float


@dataclass(frozen=True)
class Scenario:
    name: str
    t_end: float
    dt: float = 0.01
    events: tuple = ()
    perturbations: tuple = ()
    label: str = ""

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"scenario {self.name}: dt must be positive")
        if not self.t_end > 0:
            raise ConfigurationError(f"scenario {self.name}: t_end must be positive")
        for ev in self.events:
            if not 0 <= ev.t < self.t_end:
                raise ConfigurationError(
                    f"scenario {self.name}: event at t={ev.t} outside [0, t_end={self.t_end})"
                )


@dataclass
class SystemState:
    t: float
    z: np.ndarray
    f: np.ndarray  # raw right-hand sides at z (device f rows, network mismatch rows)

    def copy(self) -> "SystemState":
        return SystemState(self.t, self.z.copy(), self.f.copy())


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Sampled channels; column 0 is always ``t``."""

    names: list
    data: np.ndarray
    failure: StepNewtonDiverged | None = None
    state_columns: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.data[:, 0]

    def __len__(self):
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"trajectory has no channel {name!r}") from None

    def __contains__(self, name):
        return name in self.names

    def devices(self) -> list:
        out = []
        for n in self.names:
            if n.startswith("dev") and "." in n:
                d = n[3:].split(".", 1)[0]
                if d not in out:
                    out.append(d)
        return out

    def window(self, t0: float, t1: float = math.inf) -> "Trajectory":
        mask = (self.times >= t0 - 1e-12) & (self.times <= t1 + 1e-12)
        return Trajectory(list(self.names), self.data[mask], self.failure, list(self.state_columns))

    def shifted(self, dt: float) -> "Trajectory":
        data = self.data.copy()
        data[:, 0] += dt
        return Trajectory(list(self.names), data, self.failure, list(self.state_columns))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            np.savetxt(fh, self.data, fmt="%.12g", delimiter=",", header=",".join(self.names), comments="")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        try:
            with open(path, encoding="utf-8") as fh:
                header = fh.readline().strip()
                rows = [ln for ln in fh.read().split("\n") if ln.strip()]
        except (OSError, UnicodeDecodeError) as exc:
            raise SchemaError(f"cannot read trajectory {path}: {exc}") from exc
        names = header.split(",") if header else []
        if not names or names[0] != "t":
            raise SchemaError(f"{path}: first column must be 't'")
        if len(set(names)) != len(names):
            raise SchemaError(f"{path}: duplicate column names")
        data = np.empty((len(rows), len(names)))
        for i, row in enumerate(rows):
            cells = row.split(",")
            if len(cells) != len(names):
                raise SchemaError(f"{path}: line {i + 2} has {len(cells)} fields, expected {len(names)}")
            try:
                data[i] = [float(c) for c in cells]
            except ValueError as exc:
                raise SchemaError(f"{path}: line {i + 2}: {exc}") from exc
        if len(rows) < 2:
            raise SchemaError(f"{path}: trajectory needs at least two samples")
        if np.any(np.diff(data[:, 0]) <= 0):
            raise SchemaError(f"{path}: times are not strictly increasing")
        return cls(names, data, state_columns=_infer_state_columns(names))


DERIVED_SUFFIXES = ("ps", "pt", "p", "freq", "ps_approx", "ploss")


def _infer_state_columns(names):
    out = []
    for n in names:
        if n.startswith("dev") and "." in n and n.split(".", 1)[1] not in DERIVED_SUFFIXES:
            out.append(n)
    return out


def detect_steady_state(traj: Trajectory, tol: float = 1e-4, window: float = 2.0, channels=None):
    """Earliest time after which every state channel moves slower than ``tol``
    per second, provided at least ``window`` seconds remain; ``None`` otherwise."""
    t = traj.times
    if len(t) < 2 or t[-1] - t[0] < window:
        return None
    cols = channels if channels is not None else traj.state_columns
    if not cols:
        return float(t[0])
    rate = np.zeros(len(t))
    for c in cols:
        rate = np.maximum(rate, np.abs(np.gradient(traj.column(c), t)))
    bad = np.flatnonzero(rate >= tol)
    start = 0 if bad.size == 0 else bad[-1] + 1
    if start >= len(t) or t[-1] - t[start] < window:
        return None
    return float(t[start])


# ---------------------------------------------------------------------------
# the assembled system


class DynamicSystem:
    """A network with devices, the power-flow data that seeds it, and the
    assembled residual/Jacobian of the DAE."""

    def __init__(
        self,
        net: Network,
        devices,
        generators=(),
        slack: SlackSpec | None = None,
        omega_n: float = 1.0,
        name: str = "",
    ):
        self.net = net
        self.name = name
        self.omega_n = omega_n
        self.devices: list[Device] = list(devices)
        self.generators = tuple(generators)
        self.slack = slack
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            raise ConfigurationError("device names must be unique")
        for d in self.devices:
            if d.injects and d.bus not in net.index:
                raise ConfigurationError(f"device {d.name} refers to unknown bus {d.bus}")
        check_integral_governors(self.devices)
        gen_buses = [d.bus for d in self.devices if d.kind in GENERATION_KINDS]
        if len(set(gen_buses)) != len(gen_buses):
            raise ConfigurationError("at most one generating device per bus")
        pf_buses = {g.bus for g in self.generators}
        if pf_buses != set(gen_buses):
            raise ConfigurationError(
                f"power-flow generators at buses {sorted(pf_buses)} do not match generating devices "
                f"at buses {sorted(gen_buses)}"
            )
        needs_frame = any("omega_s" in d.input_keys for d in self.devices)
        if needs_frame and not any(isinstance(d, ReferenceFrame) for d in self.devices):
            self.devices.append(ReferenceFrame("frame", self.default_frame_machines(), omega_n))
        if sum(isinstance(d, ReferenceFrame) for d in self.devices) > 1:
            raise ConfigurationError("only one reference frame device is allowed")
        if sum(isinstance(d, Agc) for d in self.devices) > 1:
            raise ConfigurationError("only one AGC device is allowed")
        self.Y = build_admittance(net)
        self._layout()

    def default_frame_machines(self):
        """Machines define the centre-of-inertia frame unless an ideal slack
        source fixes the angle reference, in which case the frame is nominal."""
        if any(isinstance(d, IdealSlack) for d in self.devices):
            return []
        return [d for d in self.devices if isinstance(d, SyncMachine)]

    # -- layout -------------------------------------------------------------

    def device(self, name: str) -> Device:
        for d in self.devices:
            if d.name == name:
                return d
        raise ConfigurationError(f"unknown device {name!r}")

    def _layout(self):
        off = 0
        self.offset = {}
        for d in self.devices:
            self.offset[d.name] = off
            off += d.m
        self.n_dev = off
        n = self.net.n_bus
        self.iv = off + np.arange(n)
        self.ith = off + n + np.arange(n)
        self.N = off + 2 * n
        frame = next((d for d in self.devices if isinstance(d, ReferenceFrame)), None)
        agc = next((d for d in self.devices if isinstance(d, Agc)), None)
        self.cols = {}
        self.bus_row = {}
        for d in self.devices:
            own = self.offset[d.name] + np.arange(d.m)
            u = []
            for key in d.input_keys:
                if key == "v":
                    u.append(self.iv[self.net.index[d.bus]])
                elif key == "theta":
                    u.append(self.ith[self.net.index[d.bus]])
                elif key == "omega_s":
                    u.append(self.offset[frame.name])
                elif key == "xi":
                    if agc is None:
                        raise ConfigurationError(f"device {d.name} expects an AGC signal but no AGC is present")
                    u.append(self.offset[agc.name])
                elif isinstance(key, tuple) and key[0] == "state":
                    src = self.device(key[1])
                    u.append(self.offset[src.name] + src.state_names.index(key[2]))
                else:
                    raise ConfigurationError(f"device {d.name}: unknown input {key!r}")
            self.cols[d.name] = (own, np.array(u, dtype=int))
            if d.injects:
                self.bus_row[d.name] = self.net.index[d.bus]

    def t_vector(self) -> np.ndarray:
        T = np.zeros(self.N)
        for d in self.devices:
            o = self.offset[d.name]
            T[o : o + d.m] = d.t_diag
        return T

    def frozen_mask(self) -> np.ndarray:
        mask = np.zeros(self.N, dtype=bool)
        for d in self.devices:
            if not d.online:
                o = self.offset[d.name]
                mask[o : o + d.m] = True
        return mask

    def inputs(self, d: Device, z) -> np.ndarray:
        return z[self.cols[d.name][1]]

    def states(self, d: Device, z) -> np.ndarray:
        o = self.offset[d.name]
        return z[o : o + d.m]

    def state_index(self, device: str, state: str) -> int:
        d = self.device(device)
        if state not in d.state_names:
            raise ConfigurationError(f"device {device} has no state {state!r}; states: {d.state_names}")
        return self.offset[d.name] + d.state_names.index(state)

    # -- residual -------------------------------------------------------------

    def evaluate(self, z, jacobian: bool = True):
        """Raw right-hand sides ``F(z)`` and optionally ``dF/dz``.

        Device rows hold ``f``; network rows hold, per bus, the power leaving
        into the network minus the device injections.
        """
        n = self.net.n_bus
        v, th = z[self.iv], z[self.ith]
        S, dS_dth, dS_dv = injection_jacobians(self.Y, v, th)
        F = np.zeros(self.N)
        J = np.zeros((self.N, self.N)) if jacobian else None
        rp, rq = self.n_dev, self.n_dev + n
        F[rp:rq] = S.real
        F[rq:] = S.imag
        if jacobian:
            J[rp:rq, self.ith] = dS_dth.real
            J[rp:rq, self.iv] = dS_dv.real
            J[rq:, self.ith] = dS_dth.imag
            J[rq:, self.iv] = dS_dv.imag
        for d in self.devices:
            if not d.online:
                continue
            own, ucols = self.cols[d.name]
            g, G = d.evaluate(z[own], z[ucols])
            m = d.m
            allc = np.concatenate([own, ucols])
            F[own] = g[:m]
            if jacobian:
                J[np.ix_(own, allc)] = G[:m]
            if d.injects:
                k = self.bus_row[d.name]
                F[rp + k] -= g[m]
                F[rq + k] -= g[m + 1]
                if jacobian:
                    J[rp + k, allc] -= G[m]
                    J[rq + k, allc] -= G[m + 1]
        return F, J

    def step_residual(self, prev: SystemState, z1, h, jacobian=True, T=None, frozen=None):
        """Trapezoidal step equations; with ``h = 0`` the differential states
        are held fixed and only the algebraic equations are solved."""
        T = self.t_vector() if T is None else T
        frozen = self.frozen_mask() if frozen is None else frozen
        F1, J1 = self.evaluate(z1, jacobian)
        diff = (T != 0) & ~frozen
        R = F1.copy()
        if h > 0:
            # divided by h so the row is measured in units of f
            R[diff] = T[diff] * (z1[diff] - prev.z[diff]) / h - 0.5 * (F1[diff] + prev.f[diff])
        else:
            R[diff] = z1[diff] - prev.z[diff]
        R[frozen] = z1[frozen] - prev.z[frozen]
        if not jacobian:
            return R, None
        J = J1
        if h > 0:
            J[diff] *= -0.5
            J[diff, np.flatnonzero(diff)] += T[diff] / h
        else:
            J[diff] = 0.0
            J[diff, np.flatnonzero(diff)] = 1.0
        J[frozen] = 0.0
        J[frozen, np.flatnonzero(frozen)] = 1.0
        return R, J

    def split_xy(self, z):
        diff = self.t_vector() != 0
        return z[diff], z[~diff]

    def join_xy(self, x, y):
        diff = self.t_vector() != 0
        z = np.empty(self.N)
        z[diff] = x
        z[~diff] = y
        return z

    def bus_ranking(self, F, top=5):
        n = self.net.n_bus
        mis = np.abs(F[self.n_dev : self.n_dev + n]) + np.abs(F[self.n_dev + n :])
        order = np.argsort(-mis)[:top]
        return [(self.net.bus_ids[k], float(mis[k])) for k in order]

    # -- initialization -------------------------------------------------------

    def power_flow_data(self) -> Injections:
        loads, shunts = {}, {}
        for d in self.devices:
            if isinstance(d, StaticLoad):
                loads[d.bus] = loads.get(d.bus, 0j) + d.scale * complex(d.p, d.q)
            elif isinstance(d, RlcLoad):
                shunts[d.bus] = shunts.get(d.bus, 0j) + d.steady_admittance()
        return Injections(generators=self.generators, loads=loads, shunts=shunts)

    def solve_powerflow(self, tol=NEWTON_TOL) -> PowerFlowSolution:
        if self.slack is None:
            raise ConfigurationError("system has no power-flow slack specification")
        try:
            return solve_powerflow(self.net, self.power_flow_data(), self.slack, tol=tol)
        except (NonConvergence, SingularJacobian) as exc:
            raise PowerFlowFailed(f"initial power flow failed: {exc}") from exc

    def initialize(self, pf: PowerFlowSolution | None = None) -> SystemState:
        pf = self.solve_powerflow() if pf is None else pf
        z = np.zeros(self.N)
        z[self.iv] = pf.v
        z[self.ith] = pf.theta
        xi0 = 0.0
        order = sorted(self.devices, key=lambda d: {"agc": 0, "frame": 2}.get(d.kind, 1))
        for d in order:
            o = self.offset[d.name]
            if d.kind == "agc":
                x = d.initialize()
                xi0 = float(x[0])
            elif d.kind == "frame" or d.bus is None:
                x = d.initialize()
            else:
                k = self.net.index[d.bus]
                v, th = float(pf.v[k]), float(pf.theta[k])
                if d.kind in GENERATION_KINDS:
                    p, q = float(pf.p_gen[k]), float(pf.q_gen[k])
                else:
                    p = q = None
                if isinstance(d, SyncMachine):
                    x = d.initialize(v, th, p, q, omega_n=self.omega_n, xi=xi0)
                else:
                    x = d.initialize(v, th, p, q, omega_n=self.omega_n)
            z[o : o + d.m] = x
        F, _ = self.evaluate(z, jacobian=False)
        worst = int(np.argmax(np.abs(F)))
        if abs(F[worst]) >= NEWTON_TOL:
            owner = self._row_owner(worst)
            raise DeviceInitInfeasible(owner, f"initial residual {F[worst]:.3e} in row of {owner}")
        return SystemState(0.0, z, F)

    def _row_owner(self, row):
        for d in self.devices:
            o = self.offset[d.name]
            if o <= row < o + d.m:
                return d.name
        k = (row - self.n_dev) % self.net.n_bus
        return f"bus {self.net.bus_ids[k]}"

    # -- time stepping --------------------------------------------------------

    def newton(self, prev: SystemState, h: float, t_new: float, guess=None) -> SystemState:
        T = self.t_vector()
        frozen = self.frozen_mask()
        z = (prev.z if guess is None else guess).copy()
        R = None
        for it in range(NEWTON_MAX_ITER + 1):
            R, J = self.step_residual(prev, z, h, True, T, frozen)
            err = float(np.max(np.abs(R))) if np.all(np.isfinite(R)) else math.inf
            if err < NEWTON_TOL:
                F, _ = self.evaluate(z, jacobian=False)
                return SystemState(t_new, z, F)
            if not math.isfinite(err) or it == NEWTON_MAX_ITER:
                break
            try:
                dz = np.linalg.solve(J, -R)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(dz)):
                break
            z = z + dz
        F, _ = self.evaluate(z, jacobian=False)
        ranking = self.bus_ranking(F) if np.all(np.isfinite(F)) else []
        raise StepNewtonDiverged(t_new, it, ranking)

    def step(self, state: SystemState, dt: float) -> SystemState:
        return self.newton(state, dt, state.t + dt)

    def resolve_algebraic(self, state: SystemState) -> SystemState:
        """Re-solve the algebraic equations with differential states frozen."""
        return self.newton(state, 0.0, state.t)

    def apply(self, action) -> None:
        if isinstance(action, ScaleLoad):
            hit = [d for d in self.devices if d.bus == action.bus and isinstance(d, (StaticLoad, RlcLoad))]
            if not hit:
                raise ConfigurationError(f"no load at bus {action.bus} to scale")
            for d in hit:
                d.scale_by(action.factor)
        elif isinstance(action, SetParam):
            self.device(action.device).set_param(action.field, action.value)
        elif isinstance(action, DisconnectDevice):
            self.device(action.device).online = False
        else:
            raise ConfigurationError(f"unknown event action {action!r}")

    # -- recording ------------------------------------------------------------

    def channel_names(self) -> tuple[list, list]:
        names = ["t"]
        for b in self.net.bus_ids:
            names += [f"bus{b}.v", f"bus{b}.theta"]
        states = []
        for d in self.devices:
            for s in d.state_names:
                states.append(f"dev{d.name}.{s}")
        names += states
        for d in self.devices:
            if d.split(*self._dummy(d)) is not None:
                names += [f"dev{d.name}.ps", f"dev{d.name}.pt", f"dev{d.name}.p"]
            for k in d.extra_channels(*self._dummy(d)):
                names.append(f"dev{d.name}.{k}")
        names.append("omega_coi")
        return names, states

    def _dummy(self, d):
        # probe the channel layout of a device; values are irrelevant
        return self._probe_x.get(d.name), self._probe_xd.get(d.name), self._probe_u.get(d.name)

    def record(self, state: SystemState) -> np.ndarray:
        z, F = state.z, state.f
        T = self.t_vector()
        row = [state.t]
        for k in range(self.net.n_bus):
            row += [z[self.iv[k]], z[self.ith[k]]]
        row += list(z[: self.n_dev])
        freqs = {"machine": [], "gfm": [], "gfl": []}
        for d in self.devices:
            x, u = self.states(d, z), self.inputs(d, z)
            o = self.offset[d.name]
            t = T[o : o + d.m]
            xd = np.zeros(d.m)
            nz = t != 0
            xd[nz] = F[o : o + d.m][nz] / t[nz]
            sp = d.split(x, xd, u)
            if sp is not None:
                if d.online:
                    row += [sp.p_s, sp.p_t, sp.p_total]
                else:
                    row += [0.0, 0.0, 0.0]
            extra = d.extra_channels(x, xd, u)
            row += list(extra.values())
            if d.online:
                if isinstance(d, SyncMachine):
                    freqs["machine"].append((d.M, x[1]))
                elif isinstance(d, Gfm):
                    freqs["gfm"].append((1.0, extra["freq"]))
                elif isinstance(d, Gfl):
                    freqs["gfl"].append((abs(d.params.p_ref), extra["freq"]))
        row.append(self._coi(freqs))
        return np.array(row)

    def _coi(self, freqs):
        if freqs["machine"]:
            w = np.array(freqs["machine"])
            return float(w[:, 0] @ w[:, 1] / w[:, 0].sum())
        if freqs["gfm"]:
            return float(np.mean([f for _, f in freqs["gfm"]]))
        if freqs["gfl"]:
            return float(max(freqs["gfl"])[1])
        return self.omega_n

    def prepare_recording(self, state: SystemState):
        T = self.t_vector()
        self._probe_x, self._probe_xd, self._probe_u = {}, {}, {}
        for d in self.devices:
            o = self.offset[d.name]
            t = T[o : o + d.m]
            xd = np.zeros(d.m)
            nz = t != 0
            xd[nz] = state.f[o : o + d.m][nz] / t[nz]
            self._probe_x[d.name] = self.states(d, state.z)
            self._probe_xd[d.name] = xd
            self._probe_u[d.name] = self.inputs(d, state.z)


# ---------------------------------------------------------------------------
# driver


def time_grid(t_end: float, dt: float, event_times=()) -> np.ndarray:
    n = int(math.floor(t_end / dt + 1e-9))
    grid = list(np.arange(n + 1) * dt)
    if t_end - grid[-1] > 1e-9 * dt:
        grid.append(t_end)
    for te in event_times:
        if min(abs(g - te) for g in grid) > 1e-9:
            grid.append(te)
    return np.array(sorted(grid))


def run(system: DynamicSystem, scenario: Scenario, state0: SystemState | None = None) -> Trajectory:
    """Integrate ``scenario`` on a private copy of ``system``.

    Returns the trajectory; on a step Newton failure the trajectory stops at
    the last accepted step and ``failure`` carries the diagnostic.
    """
    sysc = copy.deepcopy(system)
    state = sysc.initialize() if state0 is None else state0.copy()
    if scenario.perturbations:
        for pb in scenario.perturbations:
            state.z[sysc.state_index(pb.device, pb.state)] += pb.delta
        state = sysc.resolve_algebraic(state)
    sysc.prepare_recording(state)
    names, states = sysc.channel_names()
    rows = [sysc.record(state)]
    events = sorted(scenario.events, key=lambda e: e.t)
    grid = time_grid(scenario.t_end, scenario.dt, [e.t for e in events])
    ei = 0
    failure = None
    for k in range(len(grid)):
        t = grid[k]
        pending = []
        while ei < len(events) and abs(events[ei].t - t) <= 1e-9:
            pending.append(events[ei])
            ei += 1
        if pending:
            for ev in pending:
                log.info("t=%.4f: applying %s", t, ev.action)
                sysc.apply(ev.action)
            try:
                state = sysc.resolve_algebraic(state)
            except StepNewtonDiverged as exc:
                failure = exc
                break
            rows[-1] = sysc.record(state)
        if k == len(grid) - 1:
            break
        h = grid[k + 1] - t
        try:
            state = sysc.newton(state, h, grid[k + 1])
        except StepNewtonDiverged as exc:
            log.warning("step Newton diverged at t=%.4f after %d iterations", exc.t, exc.iterations)
            failure = exc
            break
        rows.append(sysc.record(state))
    data = np.vstack(rows)
    return Trajectory(names, data, failure, states)


def assemble_residual(system: DynamicSystem, state: SystemState, x_candidate, y_candidate, dt):
    """Trapezoidal step residual for a candidate split into differential
    (``x``) and algebraic (``y``) parts."""
    z1 = system.join_xy(np.asarray(x_candidate, float), np.asarray(y_candidate, float))
    return system.step_residual(state, z1, dt, jacobian=False)[0]


def initialize(system: DynamicSystem) -> SystemState:
    return system.initialize()


def step(system: DynamicSystem, state: SystemState, dt: float) -> SystemState:
    return system.step(state, dt)
