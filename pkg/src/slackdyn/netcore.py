"""Grid data model and nodal admittance matrix.

All quantities are per unit on the system base ``s_base``; angles are in
radians. Bus vectors always follow the order in which buses were given.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, ZeroImpedanceBranch


@dataclass(frozen=True)
class Bus:
    id: int
    v_mag: float = 1.0
    theta: float = 0.0
    base_kv: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.0
    b_sh: float = 0.0
    tap: float = 1.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r == 0.0 and self.x == 0.0:
            raise ZeroImpedanceBranch(f"branch {self.from_bus}-{self.to_bus} has zero impedance")
        if self.tap <= 0.0:
            raise ValueError("tap ratio must be positive")


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    s_base: float = 100.0
    f_nominal: float = 60.0
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("bus ids must be unique")
        object.__setattr__(self, "index", {bid: k for k, bid in enumerate(ids)})
        for br in self.branches:
            for b in (br.from_bus, br.to_bus):
                if b not in self.index:
                    raise ValueError(f"branch references unknown bus {b}")
        check_connected(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def omega_b(self) -> float:
        return 2.0 * np.pi * self.f_nominal

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]


def check_connected(net: Network) -> None:
    n = len(net.buses)
    if n == 0:
        return
    adj = [[] for _ in range(n)]
    for br in net.branches:
        i, k = net.index[br.from_bus], net.index[br.to_bus]
        adj[i].append(k)
        adj[k].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for k in adj[i]:
            if k not in seen:
                seen.add(k)
                queue.append(k)
    if len(seen) != n:
        missing = sorted(net.buses[k].id for k in range(n) if k not in seen)
        raise DisconnectedGraph(f"buses {missing} are not connected to bus {net.buses[0].id}")


def build_admittance(net: Network) -> np.ndarray:
    """Nodal admittance matrix, dense, in bus file order.

    Off-nominal taps sit on the from side (ideal transformer ratio ``tap:1``).
    """
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        i, k = net.index[br.from_bus], net.index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_sh
        t = br.tap
        Y[i, i] += (ys + ysh) / t**2
        Y[k, k] += ys + ysh
        Y[i, k] -= ys / t
        Y[k, i] -= ys / t
    return Y


def bus_voltages(v, theta) -> np.ndarray:
    return np.asarray(v, dtype=float) * np.exp(1j * np.asarray(theta, dtype=float))


def power_injections(Y: np.ndarray, v, theta) -> np.ndarray:
    """Complex power flowing from every bus into the network."""
    V = bus_voltages(v, theta)
    return V * np.conj(Y @ V)


def injection_jacobians(Y: np.ndarray, v, theta):
    """Return ``(S, dS/dtheta, dS/dv)`` for the network injections."""
    V = bus_voltages(v, theta)
    I = Y @ V
    S = V * np.conj(I)
    dV = np.diag(V)
    dS_dth = 1j * dV @ np.conj(np.diag(I) - Y @ dV)
    Vn = np.exp(1j * np.asarray(theta, dtype=float))  # unit phasors, well defined at v = 0
    dS_dv = dV @ np.conj(Y @ np.diag(Vn)) + np.conj(np.diag(I)) @ np.diag(Vn)
    return S, dS_dth, dS_dv


def bus_power_injection(net: Network, v, theta, h: int) -> tuple[float, float]:
    """Net ``(p, q)`` flowing from bus ``h`` (a bus id) into the network."""
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if v.shape != (net.n_bus,) or theta.shape != (net.n_bus,):
        raise IndexError("voltage vectors must match the bus count")
    if h not in net.index:
        raise IndexError(f"bus {h} not in network")
    S = power_injections(build_admittance(net), v, theta)
    s = S[net.index[h]]
    return float(s.real), float(s.imag)


def branch_flows(net: Network, v, theta) -> np.ndarray:
    """Complex power entering each branch at its from end, in branch order."""
    V = bus_voltages(v, theta)
    out = np.empty(len(net.branches), dtype=complex)
    for n, br in enumerate(net.branches):
        i, k = net.index[br.from_bus], net.index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        t = br.tap
        i_from = V[i] * (ys + 0.5j * br.b_sh) / t**2 - V[k] * ys / t
        out[n] = V[i] * np.conj(i_from)
    return out
