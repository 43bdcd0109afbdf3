"""Device models written as slack DAEs ``T * x' = f(x, theta, ...)``.

Each networked device owns a state vector ``x`` (rows with a zero entry in
``t_diag`` are algebraic) and reads a short list of external inputs ``u``
(its bus voltage magnitude and angle, the reference speed, the AGC signal).
``evaluate`` returns ``g = [f, p, q]`` together with ``dg/d[x, u]`` so the
simulator can assemble an exact Newton matrix.

Power-split sign convention: ``p`` is the active power injected into the
grid and ``p = p_s + p_t`` holds exactly (``p_loss`` is subtracted for
passive elements that dissipate). Stored-energy terms therefore enter
``p_t`` with a minus sign; ``p_t_textbook`` carries the textbook-sign value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import ConfigurationError, DcSourceAbsent, DeviceInitInfeasible, EmptyMachineSet


@dataclass(frozen=True)
class PowerSplit:
    p_s: float
    p_t: float
    p_total: float
    p_loss: float = 0.0
    p_t_textbook: float | None = None
    p_s_approx: float | None = None

    @property
    def identity_error(self) -> float:
        return abs(self.p_total - (self.p_s + self.p_t - self.p_loss))


@dataclass(frozen=True)
class SlackRole:
    """Structural facts used by :func:`slackdyn.slackcheck.classify`."""

    name: str
    m_states: int
    dynamic: bool
    local: bool
    carries_slack: bool = True


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class MachineParams:
    M: float
    D: float
    tau_e_max: float
    tau_m0: float
    omega_n: float = 1.0

    def __post_init__(self):
        if self.M <= 0 or self.D < 0 or self.tau_e_max <= 0:
            raise ConfigurationError("machine needs M > 0, D >= 0, tau_e_max > 0")


@dataclass(frozen=True)
class GovernorParams:
    R: float
    T: float
    mode: Literal["droop", "integral"] = "droop"
    tau_m_ref: float = 0.0
    agc_share: float = 0.0

    def __post_init__(self):
        if self.R <= 0 or self.T <= 0:
            raise ConfigurationError("governor needs R > 0 and T > 0")
        if self.mode not in ("droop", "integral"):
            raise ConfigurationError(f"unknown governor mode {self.mode!r}")


@dataclass(frozen=True)
class AgcParams:
    K_o: float
    xi0: float = 0.0

    def __post_init__(self):
        if self.K_o <= 0:
            raise ConfigurationError("AGC gain must be positive")


@dataclass(frozen=True)
class RlcLoadParams:
    r: float
    l: float
    c: float

    def __post_init__(self):
        if self.r < 0 or self.l <= 0 or self.c <= 0:
            raise ConfigurationError("RLC load needs r >= 0, l > 0, c > 0")


@dataclass(frozen=True)
class GflParams:
    kp_pll: float = 0.25
    ki_pll: float = 10.0
    r_f: float = 0.005
    l_f: float = 0.15 / (2 * math.pi * 60)
    c_f: float = 0.05 / (2 * math.pi * 60)
    g_dc: float = 0.005
    c_dc: float = 0.02
    T_dc: float = 0.05
    R_dc: float | None = None  # None: dc current held at i_dc0 (no droop)
    i_dc0: float = 0.0
    T_i: float = 0.002  # inner current loop lag
    T_v: float = 0.002  # voltage measurement lag
    K_dc: float = 5.0  # dc-voltage regulator gain, pu power per pu voltage
    v_dc_ref: float = 1.0
    p_ref: float = 0.0
    q_ref: float = 0.0
    dc_source: bool = True

    def __post_init__(self):
        if self.ki_pll <= 0 or self.c_dc <= 0:
            raise ConfigurationError("GFL needs ki_pll > 0 and c_dc > 0")
        if self.R_dc is not None:
            if not self.dc_source:
                raise DcSourceAbsent("dc droop requested but the converter has no dc source")
            if self.R_dc <= 0:
                raise ConfigurationError("R_dc must be positive when dc droop is enabled")

    @property
    def droop(self) -> bool:
        return self.R_dc is not None


@dataclass(frozen=True)
class GfmParams:
    variant: Literal["droop", "vsm"] = "droop"
    D_alpha: float = 0.05
    H_alpha: float = 0.0
    M_alpha: float = 0.0
    p_ref: float = 0.0
    r_f: float = 0.0
    x_f: float = 0.1

    def __post_init__(self):
        if self.variant not in ("droop", "vsm"):
            raise ConfigurationError(f"unknown GFM variant {self.variant!r}")
        if self.D_alpha <= 0:
            raise ConfigurationError("GFM needs D_alpha > 0")
        if self.variant == "vsm" and self.M_alpha <= 0:
            raise ConfigurationError("VSM variant needs M_alpha > 0")


# ---------------------------------------------------------------------------
# pure model equations


def eval_machine(sigma, theta, omega_s, p: MachineParams, omega_b):
    """Swing equations; returns ``(delta', omega')``."""
    delta, omega = sigma
    d_delta = omega_b * (omega - omega_s)
    d_omega = (p.tau_m0 - p.tau_e_max * math.sin(delta - theta) - p.D * (omega - p.omega_n)) / p.M
    return d_delta, d_omega


def machine_power_split(sigma, sigma_prime, p: MachineParams, exact: bool = False) -> PowerSplit:
    """Source/transient split of a classical machine with constant torque.

    The default follows the textbook source term ``tau_m w - D (w - w_n)^2``.
    ``exact=True`` uses ``tau_m w - D w (w - w_n)``, which together with
    ``p_t = -M w' w`` adds up to the electrical power ``tau_e * w``.
    """
    _, omega = sigma
    _, d_omega = sigma_prime
    dw = omega - p.omega_n
    approx = p.tau_m0 * omega - p.D * dw**2
    exact_s = p.tau_m0 * omega - p.D * omega * dw
    p_t = -p.M * d_omega * omega
    p_s = exact_s if exact else approx
    return PowerSplit(p_s=p_s, p_t=p_t, p_total=p_s + p_t, p_t_textbook=p_t, p_s_approx=approx)


def coi_speed(machines) -> float:
    """Inertia-weighted mean speed of ``(M, omega)`` pairs."""
    machines = list(machines)
    total = sum(M for M, _ in machines if M > 0)
    if not machines or total <= 0:
        raise EmptyMachineSet("centre of inertia needs at least one machine with M > 0")
    return sum(M * w for M, w in machines if M > 0) / total


def eval_governor(tau_m, omega, g: GovernorParams, xi=0.0, omega_n=1.0):
    if g.mode == "integral":
        return -(omega - omega_n) / g.R / g.T
    return (g.tau_m_ref + g.agc_share * xi - (omega - omega_n) / g.R - tau_m) / g.T


def machine_gov_power_split(sigma, sigma_prime, tau_m, tau_m_prime, p: MachineParams, g: GovernorParams):
    """Split for a machine with a droop governor.

    ``p_s``/``p_t`` follow the textbook form (``omega ~ 1`` approximation);
    ``p_total`` is the exact electrical power implied by the same state and
    ``approximation_gap`` is ``p_total - p_s - p_t``.
    """
    _, omega = sigma
    _, d_omega = sigma_prime
    dw = omega - p.omega_n
    p_m0 = g.tau_m_ref * p.omega_n
    p_s = p_m0 - (p.D + 1.0 / g.R) * dw**2
    p_t = -p.M * d_omega - g.T * tau_m_prime
    # exact electrical power from the swing equation: tau_e * omega
    tau_e = tau_m - p.D * dw - p.M * d_omega
    p_exact = tau_e * omega
    return PowerSplit(p_s=p_s, p_t=p_t, p_total=p_s + p_t, p_t_textbook=p_t), p_exact - (p_s + p_t)


def eval_agc(omega_s, a: AgcParams, omega_n=1.0):
    return a.K_o * (omega_n - omega_s)


def agc_steady_injection(p_m0, r_h, omega_n, xi):
    return p_m0 + r_h * omega_n * xi


def conventional_agc_shares(droops) -> list[float]:
    total = sum(droops)
    return [R / total for R in droops]


def eval_rlc_load(sigma, v_bus: complex, p: RlcLoadParams, omega_b):
    """Series RLC in the synchronous dq frame; returns ``(i', v_c')``."""
    i_l, v_c = complex(sigma[0]), complex(sigma[1])
    di = (v_bus - v_c - (p.r + 1j * omega_b * p.l) * i_l) / p.l
    dv = (i_l - 1j * omega_b * p.c * v_c) / p.c
    return di, dv


def rlc_steady_state(v_bus: complex, p: RlcLoadParams, omega_b):
    z = p.r + 1j * omega_b * p.l + 1.0 / (1j * omega_b * p.c)
    i_l = v_bus / z
    return i_l, i_l / (1j * omega_b * p.c)


def load_power_split(sigma, sigma_prime, p: RlcLoadParams, v_bus: complex | None = None) -> PowerSplit:
    i_l, v_c = complex(sigma[0]), complex(sigma[1])
    di, dv = complex(sigma_prime[0]), complex(sigma_prime[1])
    stored = p.l * (i_l.real * di.real + i_l.imag * di.imag) + p.c * (v_c.real * dv.real + v_c.imag * dv.imag)
    loss = p.r * abs(i_l) ** 2
    if v_bus is None:
        p_total = -stored - loss
    else:
        p_total = -(v_bus * i_l.conjugate()).real
    return PowerSplit(p_s=0.0, p_t=-stored, p_total=p_total, p_loss=loss, p_t_textbook=stored)


def eval_pll(sigma, theta_bus, p: GflParams, omega_b, omega_s=1.0, omega_n=1.0):
    """PLL loop filter; returns ``(zeta', theta_hat', delta_omega_hat)``."""
    zeta, theta_hat = sigma
    d_zeta = theta_bus - theta_hat
    dw = p.ki_pll * zeta + p.kp_pll * d_zeta
    return d_zeta, omega_b * dw - omega_b * (omega_s - omega_n), dw


def gfl_frame_transform(v_bus, theta_bus, theta_hat):
    return v_bus * math.cos(theta_bus - theta_hat), v_bus * math.sin(theta_bus - theta_hat)


# ---------------------------------------------------------------------------
# networked devices


class Device:
    """Base class for devices handled by the simulator."""

    kind = "device"
    state_names: tuple = ()
    input_keys: tuple = ("v", "theta")
    injects = True

    def __init__(self, name, bus=None):
        self.name = str(name)
        self.bus = bus
        self.online = True

    @property
    def m(self) -> int:
        return len(self.state_names)

    @property
    def t_diag(self) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, x, u):
        """Return ``(g, G)`` with ``g = [f..., p, q]`` and ``G = dg/d[x, u]``."""
        raise NotImplementedError

    def initialize(self, v, theta, p, q, omega_n=1.0) -> np.ndarray:
        raise NotImplementedError

    def derivatives(self, x, u) -> np.ndarray:
        g, _ = self.evaluate(x, u)
        t = self.t_diag
        out = np.zeros(self.m)
        nz = t != 0
        out[nz] = g[: self.m][nz] / t[nz]
        return out

    def split(self, x, xdot, u) -> PowerSplit | None:
        return None

    def extra_channels(self, x, xdot, u) -> dict:
        return {}

    def slack_role(self) -> SlackRole | None:
        return None

    def set_param(self, field_name, value):
        self.params = replace(self.params, **{field_name: value})


class SyncMachine(Device):
    """Classical machine (constant emf behind ``xd_prime``) with an optional
    turbine governor. Electrical power is ``tau_e * omega``."""

    kind = "machine"

    def __init__(self, name, bus, M, D, xd_prime, governor: GovernorParams | None = None, omega_n=1.0, omega_b=None):
        super().__init__(name, bus)
        self.M, self.D, self.xd_prime = float(M), float(D), float(xd_prime)
        self.governor = governor
        self.omega_n = omega_n
        self.omega_b = omega_b
        self.E = None
        self.tau_m0 = None
        if M <= 0 or D < 0 or xd_prime <= 0:
            raise ConfigurationError(f"machine {name}: M > 0, D >= 0, xd_prime > 0 required")
        self.state_names = ("delta", "omega") + (("tau_m",) if governor else ())
        keys = ["v", "theta", "omega_s"]
        if governor and governor.agc_share:
            keys.append("xi")
        self.input_keys = tuple(keys)

    def set_param(self, field_name, value):
        if field_name in ("M", "D", "xd_prime", "E", "tau_m0"):
            setattr(self, field_name, float(value))
        elif self.governor is not None:
            self.governor = replace(self.governor, **{field_name: value})
        else:
            raise ConfigurationError(f"machine {self.name} has no parameter {field_name}")

    @property
    def t_diag(self):
        t = [1.0, self.M]
        if self.governor:
            t.append(self.governor.T)
        return np.array(t)

    def machine_params(self, v) -> MachineParams:
        return MachineParams(self.M, self.D, self.E * v / self.xd_prime, self.tau_m0, self.omega_n)

    def initialize(self, v, theta, p, q, omega_n=1.0, xi=0.0):
        V = v * np.exp(1j * theta)
        I = np.conj(complex(p, q) / V)
        Ec = V + 1j * self.xd_prime * I
        self.E = abs(Ec)
        self.tau_m0 = p / self.omega_n
        delta = machine_rotor_angle(self.name, theta, self.tau_m0, self.E * v / self.xd_prime)
        x = [delta, self.omega_n]
        if self.governor:
            g = self.governor
            if g.mode == "droop":
                self.governor = replace(g, tau_m_ref=self.tau_m0 - g.agc_share * xi)
            x.append(self.tau_m0)
        return np.array(x)

    def evaluate(self, x, u):
        delta, omega = x[0], x[1]
        v, theta, omega_s = u[0], u[1], u[2]
        xi = u[3] if len(u) > 3 else 0.0
        tau_m = x[2] if self.governor else self.tau_m0
        m = self.m
        nz = m + len(u)
        g = np.zeros(m + 2)
        G = np.zeros((m + 2, nz))
        a = self.E / self.xd_prime
        s, c = math.sin(delta - theta), math.cos(delta - theta)
        tau_e = a * v * s
        iv, ith, iws = m, m + 1, m + 2
        # delta
        g[0] = self.omega_b * (omega - omega_s)
        G[0, 1] = self.omega_b
        G[0, iws] = -self.omega_b
        # omega
        g[1] = tau_m - tau_e - self.D * (omega - self.omega_n)
        G[1, 0] = -a * v * c
        G[1, ith] = a * v * c
        G[1, iv] = -a * s
        G[1, 1] = -self.D
        if self.governor:
            G[1, 2] = 1.0
            gv = self.governor
            if gv.mode == "integral":
                g[2] = -(omega - self.omega_n) / gv.R
                G[2, 1] = -1.0 / gv.R
            else:
                g[2] = gv.tau_m_ref + gv.agc_share * xi - (omega - self.omega_n) / gv.R - x[2]
                G[2, 1] = -1.0 / gv.R
                G[2, 2] = -1.0
                if len(u) > 3:
                    G[2, m + 3] = gv.agc_share
        # injections
        g[m] = tau_e * omega
        G[m, 0] = a * v * c * omega
        G[m, ith] = -a * v * c * omega
        G[m, iv] = a * s * omega
        G[m, 1] = tau_e
        g[m + 1] = a * v * c - v * v / self.xd_prime
        G[m + 1, 0] = -a * v * s
        G[m + 1, ith] = a * v * s
        G[m + 1, iv] = a * c - 2 * v / self.xd_prime
        return g, G

    def split(self, x, xdot, u):
        omega = x[1]
        dw = omega - self.omega_n
        p_t = -self.M * xdot[1] * omega
        g, _ = self.evaluate(x, u)
        p = g[self.m]
        if self.governor and self.governor.mode == "droop":
            gv = self.governor
            xi = u[3] if len(u) > 3 else 0.0
            base = gv.tau_m_ref + gv.agc_share * xi
            p_s = omega * base - omega * (self.D + 1.0 / gv.R) * dw
            p_t = p_t - gv.T * xdot[2] * omega
            approx = base * self.omega_n - (self.D + 1.0 / gv.R) * dw**2
            p_t_textbook = -self.M * xdot[1] - gv.T * xdot[2]
        else:
            tau_m = x[2] if self.governor else self.tau_m0
            p_s = tau_m * omega - self.D * omega * dw
            approx = tau_m * omega - self.D * dw**2
            p_t_textbook = p_t
        return PowerSplit(p_s=p_s, p_t=p_t, p_total=p, p_t_textbook=p_t_textbook, p_s_approx=approx)

    def extra_channels(self, x, xdot, u):
        sp = self.split(x, xdot, u)
        return {"ps_approx": sp.p_s_approx}

    def slack_role(self):
        return SlackRole(self.name, self.m, True, local=not (self.governor and self.governor.agc_share))


def machine_rotor_angle(name, theta, tau_m, tau_e_max):
    """Rotor angle that balances ``tau_m`` at nominal speed."""
    ratio = tau_m / tau_e_max
    if abs(ratio) > 1.0:
        raise DeviceInitInfeasible(name, f"sin(delta - theta) = {ratio:.4f} outside [-1, 1]")
    return theta + math.asin(ratio)


class Agc(Device):
    kind = "agc"
    state_names = ("xi",)
    input_keys = ("omega_s",)
    injects = False

    def __init__(self, name, params: AgcParams, omega_n=1.0):
        super().__init__(name, None)
        self.params = params
        self.omega_n = omega_n

    @property
    def t_diag(self):
        return np.array([1.0])

    def initialize(self, v=None, theta=None, p=None, q=None, omega_n=1.0):
        return np.array([self.params.xi0])

    def evaluate(self, x, u):
        g = np.array([self.params.K_o * (self.omega_n - u[0])])
        G = np.array([[0.0, -self.params.K_o]])
        return g, G


class ReferenceFrame(Device):
    """Algebraic reference speed ``omega_s``: centre of inertia of the listed
    machines, or the fixed nominal speed when ``weights`` is empty."""

    kind = "frame"
    state_names = ("omega_s",)
    injects = False

    def __init__(self, name="frame", machines=(), omega_n=1.0):
        super().__init__(name, None)
        self.machines = list(machines)
        self.omega_n = omega_n
        self.input_keys = tuple(("state", mc.name, "omega") for mc in self.machines)

    @property
    def t_diag(self):
        return np.array([0.0])

    def weights(self):
        w = np.array([mc.M if mc.online else 0.0 for mc in self.machines])
        return w / w.sum() if w.sum() > 0 else w

    def initialize(self, v=None, theta=None, p=None, q=None, omega_n=1.0):
        return np.array([self.omega_n])

    def evaluate(self, x, u):
        G = np.zeros((1, 1 + len(u)))
        G[0, 0] = -1.0
        if self.machines and any(mc.online for mc in self.machines):
            w = self.weights()
            G[0, 1:] = w
            return np.array([w @ np.asarray(u) - x[0]]), G
        return np.array([self.omega_n - x[0]]), G


class IdealSlack(Device):
    """Angle-tracking slack source, pure integrator or first-order droop.

    Injects ``p0 + sigma``; reactive power is algebraic and holds ``v_set``.
    """

    kind = "ideal_slack"
    state_names = ("sigma", "q")

    def __init__(self, name, bus, mode="integrator", K=1.0, H=0.0, T=1.0, theta_ref=None, p0=0.0, v_set=None):
        super().__init__(name, bus)
        if mode not in ("integrator", "droop"):
            raise ConfigurationError(f"unknown ideal slack mode {mode!r}")
        if mode == "droop" and T <= 0:
            raise ConfigurationError("droop slack needs T > 0")
        self.mode, self.K, self.H, self.T = mode, K, H, T
        self.theta_ref, self.p0, self.v_set = theta_ref, p0, v_set

    def set_param(self, field_name, value):
        setattr(self, field_name, value)

    @property
    def t_diag(self):
        return np.array([self.T if self.mode == "droop" else 1.0, 0.0])

    def initialize(self, v, theta, p, q, omega_n=1.0):
        if self.v_set is None:
            self.v_set = v
        sigma = p - self.p0
        if self.theta_ref is None:
            # angle setpoint that makes the power-flow point an equilibrium
            self.theta_ref = theta if self.mode == "integrator" else theta + self.H * sigma / self.K
        return np.array([sigma, q])

    def evaluate(self, x, u):
        sigma, q = x
        v, theta = u
        g = np.zeros(4)
        G = np.zeros((4, 4))
        if self.mode == "integrator":
            g[0] = self.theta_ref - theta
            G[0, 3] = -1.0
        else:
            g[0] = self.K * (self.theta_ref - theta) - self.H * sigma
            G[0, 3] = -self.K
            G[0, 0] = -self.H
        g[1] = self.v_set - v
        G[1, 2] = -1.0
        g[2] = self.p0 + sigma
        G[2, 0] = 1.0
        g[3] = q
        G[3, 1] = 1.0
        return g, G

    def split(self, x, xdot, u):
        p = self.p0 + x[0]
        return PowerSplit(p_s=p, p_t=0.0, p_total=p, p_t_textbook=0.0)

    def slack_role(self):
        return SlackRole(self.name, 1, True, local=False)


def eval_ideal_slack(sigma, theta_bus, mode, params=(1.0, 0.0, 1.0), theta_ref=0.0):
    K, H, T = params
    if mode == "integrator":
        return theta_ref - theta_bus
    if T <= 0:
        raise ConfigurationError("droop slack needs T > 0")
    return (K * (theta_ref - theta_bus) - H * sigma) / T


class StaticLoad(Device):
    """Constant-power (``model='pq'``) or constant-impedance (``'z'``) load."""

    kind = "load"
    state_names = ()

    def __init__(self, name, bus, p, q, model="pq", v0=1.0):
        super().__init__(name, bus)
        if model not in ("pq", "z"):
            raise ConfigurationError(f"unknown load model {model!r}")
        self.p, self.q, self.model, self.v0 = float(p), float(q), model, v0
        self.scale = 1.0

    def set_param(self, field_name, value):
        setattr(self, field_name, value)

    @property
    def t_diag(self):
        return np.zeros(0)

    def initialize(self, v, theta, p=None, q=None, omega_n=1.0):
        self.v0 = v
        return np.zeros(0)

    def evaluate(self, x, u):
        v = u[0]
        G = np.zeros((2, 2))
        if self.model == "pq":
            g = -self.scale * np.array([self.p, self.q])
        else:
            k = self.scale * (v / self.v0) ** 2
            g = -k * np.array([self.p, self.q])
            G[:, 0] = -2 * self.scale * v / self.v0**2 * np.array([self.p, self.q])
        return g, G

    def scale_by(self, factor):
        self.scale *= factor

    def shunt_equivalent(self):
        return complex(self.p, -self.q) / self.v0**2


class RlcLoad(Device):
    kind = "rlc_load"
    state_names = ("i_d", "i_q", "vc_d", "vc_q")

    def __init__(self, name, bus, params: RlcLoadParams, omega_b):
        super().__init__(name, bus)
        self.params = params
        self.omega_b = omega_b

    @property
    def t_diag(self):
        p = self.params
        return np.array([p.l, p.l, p.c, p.c])

    def scale_by(self, factor):
        """Scale the admittance: series impedance divided by ``factor``."""
        p = self.params
        self.params = replace(p, r=p.r / factor, l=p.l / factor, c=p.c * factor)

    def steady_admittance(self):
        p, w = self.params, self.omega_b
        return 1.0 / (p.r + 1j * w * p.l + 1.0 / (1j * w * p.c))

    def initialize(self, v, theta, p=None, q=None, omega_n=1.0):
        i_l, v_c = rlc_steady_state(v * np.exp(1j * theta), self.params, self.omega_b)
        return np.array([i_l.real, i_l.imag, v_c.real, v_c.imag])

    def evaluate(self, x, u):
        id_, iq, vcd, vcq = x
        v, theta = u
        p, w = self.params, self.omega_b
        ct, st = math.cos(theta), math.sin(theta)
        vd, vq = v * ct, v * st
        g = np.zeros(6)
        G = np.zeros((6, 6))
        g[0] = vd - vcd - p.r * id_ + w * p.l * iq
        g[1] = vq - vcq - p.r * iq - w * p.l * id_
        g[2] = id_ + w * p.c * vcq
        g[3] = iq - w * p.c * vcd
        G[0, :4] = [-p.r, w * p.l, -1.0, 0.0]
        G[1, :4] = [-w * p.l, -p.r, 0.0, -1.0]
        G[2, :4] = [1.0, 0.0, 0.0, w * p.c]
        G[3, :4] = [0.0, 1.0, -w * p.c, 0.0]
        G[0, 4], G[0, 5] = ct, -vq
        G[1, 4], G[1, 5] = st, vd
        g[4] = -(vd * id_ + vq * iq)
        g[5] = -(vq * id_ - vd * iq)
        G[4, :2] = [-vd, -vq]
        G[4, 4] = -(ct * id_ + st * iq)
        G[4, 5] = -(-vq * id_ + vd * iq)
        G[5, :2] = [-vq, vd]
        G[5, 4] = -(st * id_ - ct * iq)
        G[5, 5] = -(vd * id_ + vq * iq)
        return g, G

    def split(self, x, xdot, u):
        g, _ = self.evaluate(x, u)
        sp = load_power_split((complex(x[0], x[1]), complex(x[2], x[3])), (complex(xdot[0], xdot[1]), complex(xdot[2], xdot[3])), self.params)
        return replace(sp, p_total=g[self.m])

    def extra_channels(self, x, xdot, u):
        return {"ploss": self.split(x, xdot, u).p_loss}


class Gfm(Device):
    """Grid-forming converter: internal emf ``E`` at angle ``alpha`` behind
    the filter impedance, with a droop or virtual-synchronous-machine power
    loop. The dc side is an ideal source (``p_dc - p_losses = p_ref``)."""

    kind = "gfm"
    input_keys = ("v", "theta", "omega_s")

    def __init__(self, name, bus, params: GfmParams, omega_b, omega_n=1.0):
        super().__init__(name, bus)
        self.params = params
        self.omega_b = omega_b
        self.omega_n = omega_n
        self.E = None
        self.state_names = ("alpha",) if params.variant == "droop" else ("alpha", "omega_v")

    @property
    def t_diag(self):
        p = self.params
        return np.array([p.D_alpha]) if p.variant == "droop" else np.array([1.0, p.M_alpha])

    def initialize(self, v, theta, p, q, omega_n=1.0):
        V = v * np.exp(1j * theta)
        I = np.conj(complex(p, q) / V)
        Ec = V + complex(self.params.r_f, self.params.x_f) * I
        self.E = abs(Ec)
        alpha = float(np.angle(Ec))
        self.params = replace(self.params, p_ref=p + self.params.H_alpha * alpha)
        return np.array([alpha] if self.params.variant == "droop" else [alpha, 0.0])

    def _pq(self, alpha, v, theta):
        y = 1.0 / complex(self.params.r_f, self.params.x_f)
        gg, bb = y.real, y.imag
        phi = theta - alpha
        c, s = math.cos(phi), math.sin(phi)
        E = self.E
        p = gg * (v * E * c - v * v) + bb * v * E * s
        q = gg * v * E * s - bb * (v * E * c - v * v)
        dp_dphi = -gg * v * E * s + bb * v * E * c
        dq_dphi = gg * v * E * c + bb * v * E * s
        dp_dv = gg * (E * c - 2 * v) + bb * E * s
        dq_dv = gg * E * s - bb * (E * c - 2 * v)
        return p, q, dp_dphi, dq_dphi, dp_dv, dq_dv

    def evaluate(self, x, u):
        pr = self.params
        alpha = x[0]
        v, theta, omega_s = u
        m = self.m
        iv, ith, iws = m, m + 1, m + 2
        p, q, dp_dphi, dq_dphi, dp_dv, dq_dv = self._pq(alpha, v, theta)
        g = np.zeros(m + 2)
        G = np.zeros((m + 2, m + 3))
        frame = self.omega_b * (omega_s - self.omega_n)
        if pr.variant == "droop":
            g[0] = pr.p_ref - p - pr.H_alpha * alpha - pr.D_alpha * frame
            G[0, 0] = dp_dphi - pr.H_alpha
            G[0, ith] = -dp_dphi
            G[0, iv] = -dp_dv
            G[0, iws] = -pr.D_alpha * self.omega_b
        else:
            wv = x[1]
            g[0] = wv - frame
            G[0, 1] = 1.0
            G[0, iws] = -self.omega_b
            g[1] = pr.p_ref - p - pr.D_alpha * wv - pr.H_alpha * alpha
            G[1, 0] = dp_dphi - pr.H_alpha
            G[1, 1] = -pr.D_alpha
            G[1, ith] = -dp_dphi
            G[1, iv] = -dp_dv
        g[m], g[m + 1] = p, q
        G[m, 0], G[m, ith], G[m, iv] = -dp_dphi, dp_dphi, dp_dv
        G[m + 1, 0], G[m + 1, ith], G[m + 1, iv] = -dq_dphi, dq_dphi, dq_dv
        return g, G

    def _alpha_rate(self, x, xdot, u):
        # angle rate relative to the nominal synchronous frame, rad/s
        return xdot[0] + self.omega_b * (u[2] - self.omega_n)

    def split(self, x, xdot, u):
        pr = self.params
        g, _ = self.evaluate(x, u)
        p = g[self.m]
        if pr.variant == "droop":
            rate = self._alpha_rate(x, xdot, u)
            p_s = pr.p_ref - pr.H_alpha * x[0]
            p_t_textbook = pr.D_alpha * rate
        else:
            p_s = pr.p_ref - pr.H_alpha * x[0] - pr.D_alpha * x[1]
            p_t_textbook = pr.M_alpha * xdot[1]
        return PowerSplit(p_s=p_s, p_t=-p_t_textbook, p_total=p, p_t_textbook=p_t_textbook)

    def frequency(self, x, xdot, u):
        if self.params.variant == "vsm":
            return self.omega_n + x[1] / self.omega_b
        return self.omega_n + self._alpha_rate(x, xdot, u) / self.omega_b

    def extra_channels(self, x, xdot, u):
        return {"freq": self.frequency(x, xdot, u)}

    def slack_role(self):
        return SlackRole(self.name, self.m, True, local=True)


def eval_gfm(sigma, bus, p: GfmParams, p_inj, omega_b=None):
    """Power-loop derivatives for a measured injection ``p_inj``.

    Returns ``alpha'`` (droop) or ``(alpha', omega_v')`` (vsm) in the
    nominal synchronous frame.
    """
    if p.variant == "droop":
        alpha = sigma[0] if np.ndim(sigma) else sigma
        return (p.p_ref - p_inj - p.H_alpha * alpha) / p.D_alpha
    alpha, wv = sigma
    return wv, (p.p_ref - p_inj - p.D_alpha * wv - p.H_alpha * alpha) / p.M_alpha


def gfm_voltage_link(v_bus, theta_bus, alpha):
    """Bus voltage in the converter frame set by ``alpha``."""
    return v_bus * math.cos(theta_bus - alpha), v_bus * math.sin(theta_bus - alpha)


def gfm_power_split(sigma, sigma_prime, p: GfmParams, p_dc_net=None) -> PowerSplit:
    """``p_dc_net`` is ``p_dc - p_losses``; it equals ``p_ref`` for the ideal source."""
    src = p.p_ref if p_dc_net is None else p_dc_net
    if p.variant == "droop":
        alpha = sigma[0] if np.ndim(sigma) else sigma
        d_alpha = sigma_prime[0] if np.ndim(sigma_prime) else sigma_prime
        p_s = src - p.H_alpha * alpha
        stored_rate = p.D_alpha * d_alpha
    else:
        alpha, wv = sigma
        p_s = src - p.H_alpha * alpha - p.D_alpha * wv
        stored_rate = p.M_alpha * sigma_prime[1]
    return PowerSplit(p_s=p_s, p_t=-stored_rate, p_total=p_s - stored_rate, p_t_textbook=stored_rate)


class Gfl(Device):
    """Grid-following converter.

    PLL (``zeta``, ``theta_hat``), current loops as fast first-order lags to
    power setpoints, measured voltage ``v_m``, dc link ``v_dc`` fed by a dc
    source ``i_dc`` that is either constant or frequency-droop controlled.
    The converter-side power balance closes the dc capacitor equation so the
    source/transient split is exact.
    """

    kind = "gfl"
    state_names = ("zeta", "theta_hat", "i_d", "i_q", "v_m", "v_dc", "i_dc")
    input_keys = ("v", "theta", "omega_s")

    def __init__(self, name, bus, params: GflParams, omega_b, omega_n=1.0):
        super().__init__(name, bus)
        self.params = params
        self.omega_b = omega_b
        self.omega_n = omega_n

    @property
    def t_diag(self):
        p = self.params
        return np.array([1.0, 1.0, p.T_i, p.T_i, p.T_v, p.c_dc, p.T_dc])

    def initialize(self, v, theta, p, q, omega_n=1.0):
        pr = self.params
        i_d, i_q = p / v, -q / v
        vdc = pr.v_dc_ref
        i_dc = (p + pr.r_f * (i_d**2 + i_q**2) + pr.g_dc * vdc**2) / vdc
        self.params = replace(pr, p_ref=p, q_ref=q, i_dc0=i_dc)
        return np.array([0.0, theta, i_d, i_q, v, vdc, i_dc])

    def evaluate(self, x, u):
        pr = self.params
        zeta, th_hat, i_d, i_q, v_m, v_dc, i_dc = x
        v, theta, omega_s = u
        wb = self.omega_b
        Z = 10  # [x(7), v, theta, omega_s]
        IV, ITH, IWS = 7, 8, 9
        e = theta - th_hat
        de = np.zeros(Z)
        de[ITH], de[1] = 1.0, -1.0
        dw = pr.ki_pll * zeta + pr.kp_pll * e
        ddw = pr.kp_pll * de
        ddw[0] += pr.ki_pll

        g = np.zeros(9)
        G = np.zeros((9, Z))
        g[0] = e
        G[0] = de
        g[1] = wb * dw - wb * (omega_s - self.omega_n)
        G[1] = wb * ddw
        G[1, IWS] -= wb

        # current references that deliver (p*, q*) at the measured voltage,
        # resolved in the PLL frame
        ce, se = math.cos(e), math.sin(e)
        p_star = pr.p_ref + pr.K_dc * (v_dc - pr.v_dc_ref)
        q_star = pr.q_ref
        id_ref = (p_star * ce + q_star * se) / v_m
        iq_ref = (p_star * se - q_star * ce) / v_m
        f_id = id_ref - i_d
        f_iq = iq_ref - i_q
        df_id = ((-p_star * se + q_star * ce) / v_m) * de
        df_id[5] += pr.K_dc * ce / v_m
        df_id[4] += -id_ref / v_m
        df_id[2] -= 1.0
        df_iq = ((p_star * ce + q_star * se) / v_m) * de
        df_iq[5] += pr.K_dc * se / v_m
        df_iq[4] += -iq_ref / v_m
        df_iq[3] -= 1.0
        g[2], g[3] = f_id, f_iq
        G[2], G[3] = df_id, df_iq

        f_vm = v - v_m
        df_vm = np.zeros(Z)
        df_vm[IV], df_vm[4] = 1.0, -1.0
        g[4], G[4] = f_vm, df_vm

        p = v * (ce * i_d + se * i_q)
        q = v * (se * i_d - ce * i_q)
        dp = np.zeros(Z)
        dp[2], dp[3], dp[IV] = v * ce, v * se, ce * i_d + se * i_q
        dp += -q * de
        dq = np.zeros(Z)
        dq[2], dq[3], dq[IV] = v * se, -v * ce, se * i_d - ce * i_q
        dq += p * de

        kl = pr.l_f / pr.T_i
        kc = pr.c_f / pr.T_v
        p_conv = p + pr.r_f * (i_d**2 + i_q**2) + kl * (i_d * f_id + i_q * f_iq) + kc * v_m * f_vm
        dpc = dp.copy()
        dpc[2] += 2 * pr.r_f * i_d + kl * f_id
        dpc[3] += 2 * pr.r_f * i_q + kl * f_iq
        dpc += kl * (i_d * df_id + i_q * df_iq) + kc * v_m * df_vm
        dpc[4] += kc * f_vm

        g[5] = i_dc - pr.g_dc * v_dc - p_conv / v_dc
        G[5] = -dpc / v_dc
        G[5, 5] += -pr.g_dc + p_conv / v_dc**2
        G[5, 6] += 1.0

        if pr.droop:
            g[6] = pr.i_dc0 - dw / pr.R_dc - i_dc
            G[6] = -ddw / pr.R_dc
        else:
            g[6] = pr.i_dc0 - i_dc
        G[6, 6] -= 1.0

        g[7], g[8] = p, q
        G[7], G[8] = dp, dq
        return g, G

    def delta_omega_hat(self, x, u):
        return self.params.ki_pll * x[0] + self.params.kp_pll * (u[1] - x[1])

    def split(self, x, xdot, u):
        pr = self.params
        _, _, i_d, i_q, v_m, v_dc, i_dc = x
        g, _ = self.evaluate(x, u)
        p = g[7]
        i2 = i_d**2 + i_q**2
        stored = (
            pr.c_dc * v_dc * xdot[5]
            + pr.l_f * (i_d * xdot[2] + i_q * xdot[3])
            + pr.c_f * v_m * xdot[4]
        )
        if pr.droop:
            dw = self.delta_omega_hat(x, u)
            p_s = v_dc * pr.i_dc0 - v_dc * dw / pr.R_dc - pr.g_dc * v_dc**2 - pr.r_f * i2
            stored += pr.T_dc * v_dc * xdot[6]
        else:
            p_s = v_dc * i_dc - pr.g_dc * v_dc**2 - pr.r_f * i2
        return PowerSplit(p_s=p_s, p_t=-stored, p_total=p, p_t_textbook=stored)

    def extra_channels(self, x, xdot, u):
        return {"freq": self.omega_n + self.delta_omega_hat(x, u)}

    def slack_role(self):
        return SlackRole(self.name, self.m, True, local=True, carries_slack=self.params.droop)


def eval_gfl(sigma, bus, p: GflParams, omega_b, omega_s=1.0, omega_n=1.0):
    """State derivatives of a :class:`Gfl` with parameters ``p``."""
    dev = Gfl("gfl", None, p, omega_b, omega_n)
    return dev.derivatives(np.asarray(sigma, dtype=float), np.array([bus[0], bus[1], omega_s]))


def gfl_power_split(sigma, sigma_prime, p: GflParams, bus, omega_b, omega_s=1.0, omega_n=1.0) -> PowerSplit:
    dev = Gfl("gfl", None, p, omega_b, omega_n)
    return dev.split(np.asarray(sigma, float), np.asarray(sigma_prime, float), np.array([bus[0], bus[1], omega_s]))


def check_integral_governors(devices) -> None:
    """Only one integral governor may act on an interconnected grid."""
    names = [
        d.name
        for d in devices
        if isinstance(d, SyncMachine) and d.governor is not None and d.governor.mode == "integral"
    ]
    if len(names) > 1:
        raise ConfigurationError(
            f"integral governors on {names}: at most one turbine governor per island may be "
            "integral, otherwise the generator injections are undetermined"
        )
