"""Newton power flow with single, distributed and droop-equilibrium slack.

The slack power ``sigma_hat`` is always an explicit unknown. Every bus keeps
its active-power mismatch row; participating generators inject
``p0 + k * sigma_hat``. One extra row removes the rotational null space:

* ``single`` / ``distributed``: ``theta[ref] = theta_ref``
* ``dynamic``: the steady state of the first-order droop slack,
  ``K * (theta_ref - theta[ref]) - H * sigma_hat = 0``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import NonConvergence, NoSlackParticipant, SingularJacobian
from .netcore import Network, branch_flows, build_admittance, injection_jacobians

log = logging.getLogger(__name__)

SlackMode = Literal["single", "distributed", "dynamic"]


@dataclass(frozen=True)
class Generator:
    bus: int
    p: float = 0.0
    q: float = 0.0
    v: float | None = None  # voltage setpoint; None -> PQ generator
    name: str = ""


@dataclass(frozen=True)
class Injections:
    """Scheduled injections. ``loads`` maps bus id to consumed complex power,
    ``shunts`` maps bus id to a consumed constant admittance ``g + jb``."""

    generators: tuple[Generator, ...] = ()
    loads: dict = field(default_factory=dict)
    shunts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SlackSpec:
    mode: SlackMode = "single"
    reference_bus: int | None = None
    theta_ref: float = 0.0
    participation: dict | None = None
    droop: tuple[float, float, float] = (1.0, 0.0, 1.0)  # K, H, T
    allow_negative: bool = False

    def factors(self, net: Network) -> dict:
        if self.mode == "distributed":
            k = dict(self.participation or {})
        else:
            if self.reference_bus is None:
                raise NoSlackParticipant("single/dynamic slack needs a reference bus")
            k = {self.reference_bus: 1.0}
        if not k or all(v == 0 for v in k.values()):
            raise NoSlackParticipant("no generator participates in the slack")
        for b in k:
            if b not in net.index:
                raise NoSlackParticipant(f"participation refers to unknown bus {b}")
        total = sum(k.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"participation factors sum to {total}, expected 1")
        if not self.allow_negative and any(v < 0 for v in k.values()):
            raise ValueError("negative participation factors need allow_negative=True")
        return k

    def angle_bus(self) -> int:
        if self.reference_bus is not None:
            return self.reference_bus
        return next(b for b, v in (self.participation or {}).items() if v != 0)


@dataclass
class PowerFlowSolution:
    v: np.ndarray
    theta: np.ndarray
    sigma_hat: float
    p_gen: np.ndarray
    q_gen: np.ndarray
    losses: float
    iterations: int
    mismatch: float
    bus_ids: list = field(default_factory=list)

    def at(self, bus: int) -> tuple[float, float]:
        k = self.bus_ids.index(bus)
        return float(self.v[k]), float(self.theta[k])


def equal_participation(inj: Injections) -> dict:
    buses = sorted({g.bus for g in inj.generators})
    return {b: 1.0 / len(buses) for b in buses}


def _bus_vectors(net: Network, inj: Injections):
    n = net.n_bus
    p0 = np.zeros(n)
    q0 = np.zeros(n)
    vset = np.full(n, np.nan)
    has_gen = np.zeros(n, dtype=bool)
    for g in inj.generators:
        k = net.index[g.bus]
        p0[k] += g.p
        q0[k] += g.q
        has_gen[k] = True
        if g.v is not None:
            vset[k] = g.v
    sl = np.zeros(n, dtype=complex)
    for b, s in inj.loads.items():
        sl[net.index[b]] += complex(s)
    ysh = np.zeros(n, dtype=complex)
    for b, y in inj.shunts.items():
        ysh[net.index[b]] += complex(y)
    return p0, q0, vset, has_gen, sl, ysh


def solve_powerflow(
    net: Network,
    inj: Injections,
    spec: SlackSpec,
    tol: float = 1e-8,
    max_iter: int = 20,
) -> PowerFlowSolution:
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = net.n_bus
    Y = build_admittance(net)
    p0, q0, vset, has_gen, sl, ysh = _bus_vectors(net, inj)
    kfac = spec.factors(net)
    k = np.zeros(n)
    for b, val in kfac.items():
        if not has_gen[net.index[b]]:
            raise NoSlackParticipant(f"bus {b} participates in the slack but hosts no generator")
        k[net.index[b]] = val

    pv = ~np.isnan(vset)
    pq = np.flatnonzero(~pv)
    ref = net.index[spec.angle_bus()]
    K, H, _ = spec.droop

    v = np.where(pv, vset, 1.0)
    theta = np.full(n, spec.theta_ref)
    sigma = 0.0
    g_sh, b_sh = ysh.real, ysh.imag

    trace = []
    for it in range(max_iter + 1):
        S, dS_dth, dS_dv = injection_jacobians(Y, v, theta)
        p_spec = p0 + k * sigma - sl.real - g_sh * v**2
        q_spec = q0 - sl.imag + b_sh * v**2
        dp = S.real - p_spec
        dq = (S.imag - q_spec)[pq]
        if spec.mode == "dynamic":
            da = K * (spec.theta_ref - theta[ref]) - H * sigma
        else:
            da = theta[ref] - spec.theta_ref
        F = np.concatenate([dp, dq, [da]])
        err = float(np.max(np.abs(F))) if F.size else 0.0
        trace.append(err)
        log.debug("powerflow iteration %d: max mismatch %.3e", it, err)
        if err < tol:
            break
        if it == max_iter:
            raise NonConvergence(
                f"power flow did not converge in {max_iter} iterations (mismatch {err:.3e})",
                iterations=max_iter,
                trace=trace,
            )
        npq = len(pq)
        J = np.zeros((n + npq + 1, n + npq + 1))
        J[:n, :n] = dS_dth.real
        J[:n, n : n + npq] = (dS_dv.real + np.diag(2 * g_sh * v))[:, pq]
        J[:n, -1] = -k
        J[n : n + npq, :n] = dS_dth.imag[pq]
        J[n : n + npq, n : n + npq] = (dS_dv.imag - np.diag(2 * b_sh * v))[np.ix_(pq, pq)]
        if spec.mode == "dynamic":
            J[-1, ref] = -K
            J[-1, -1] = -H
        else:
            J[-1, ref] = 1.0
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("non-finite Newton update")
        theta = theta + dx[:n]
        v[pq] += dx[n : n + npq]
        sigma += dx[-1]
        # the angle row is linear: pin it so the reference holds exactly
        if spec.mode == "dynamic":
            theta[ref] = spec.theta_ref - H / K * sigma
        else:
            theta[ref] = spec.theta_ref

    S = injection_jacobians(Y, v, theta)[0]
    p_gen = p0 + k * sigma
    q_gen = S.imag + sl.imag - b_sh * v**2
    return PowerFlowSolution(
        v=v.copy(),
        theta=theta.copy(),
        sigma_hat=float(sigma),
        p_gen=p_gen,
        q_gen=q_gen,
        losses=float(S.real.sum()),
        iterations=it,
        mismatch=err,
        bus_ids=net.bus_ids,
    )


@dataclass
class AngleOffsetReport:
    theta_ref_droop: float
    theta_ref_single: float
    max_angle_difference_error: float
    max_flow_error: float
    sigma_hat_droop: float
    sigma_hat_single: float
    consistent: bool


def verify_angle_offset_invariance(
    net: Network,
    inj: Injections,
    spec_droop: SlackSpec,
    spec_single: SlackSpec,
    tol: float = 1e-8,
) -> AngleOffsetReport:
    """Compare a droop-equilibrium solution with the single-slack one.

    Angle differences and branch flows must agree; the absolute reference
    angle may not.
    """
    a = solve_powerflow(net, inj, spec_droop, tol=1e-12)
    b = solve_powerflow(net, inj, spec_single, tol=1e-12)
    da = (a.theta - a.theta[0]) - (b.theta - b.theta[0])
    fa = branch_flows(net, a.v, a.theta)
    fb = branch_flows(net, b.v, b.theta)
    ang_err = float(np.max(np.abs(da))) if da.size else 0.0
    flow_err = float(np.max(np.abs(fa - fb))) if fa.size else 0.0
    ref = net.index[spec_droop.angle_bus()]
    refs = net.index[spec_single.angle_bus()]
    return AngleOffsetReport(
        theta_ref_droop=float(a.theta[ref]),
        theta_ref_single=float(b.theta[refs]),
        max_angle_difference_error=ang_err,
        max_flow_error=flow_err,
        sigma_hat_droop=a.sigma_hat,
        sigma_hat_single=b.sigma_hat,
        consistent=ang_err < tol and flow_err < tol,
    )
