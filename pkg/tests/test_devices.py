import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_jacobian
from slackdyn.devices import (
    Agc,
    AgcParams,
    Gfl,
    GflParams,
    Gfm,
    GfmParams,
    GovernorParams,
    IdealSlack,
    MachineParams,
    ReferenceFrame,
    RlcLoad,
    RlcLoadParams,
    StaticLoad,
    SyncMachine,
    agc_steady_injection,
    check_integral_governors,
    coi_speed,
    conventional_agc_shares,
    eval_agc,
    eval_gfl,
    eval_gfm,
    eval_governor,
    eval_ideal_slack,
    eval_machine,
    eval_pll,
    eval_rlc_load,
    gfl_frame_transform,
    gfl_power_split,
    gfm_power_split,
    load_power_split,
    machine_gov_power_split,
    machine_power_split,
    machine_rotor_angle,
    rlc_steady_state,
)
from slackdyn.errors import ConfigurationError, DcSourceAbsent, DeviceInitInfeasible, EmptyMachineSet

WB = 2 * math.pi * 60
MP = MachineParams(M=10, D=2, tau_e_max=2, tau_m0=1)


class TestMachine:
    def test_constructed_equilibrium(self):
        d, w = eval_machine((math.pi / 6, 1.0), 0.0, 1.0, MP, WB)
        assert d == 0.0
        assert w == pytest.approx(0.0, abs=1e-15)
        d, w = eval_machine((0.5236, 1.0), 0.0, 1.0, MP, WB)
        assert w == pytest.approx(0.0, abs=1e-5)

    def test_synchronous_speed_freezes_angle(self):
        d, _ = eval_machine((1.3, 1.02), 0.4, 1.02, MP, WB)
        assert d == 0.0

    def test_overspeed(self):
        d, w = eval_machine((math.pi / 6, 1.005), 0.0, 1.0, MP, 376.991)
        assert d == pytest.approx(1.884955, abs=1e-6)
        assert w == pytest.approx(-0.001, abs=1e-12)

    def test_power_split_examples(self):
        sp = machine_power_split((0.3, 1.0), (0.0, 0.0), MP)
        assert sp.p_t == 0.0
        assert sp.p_s == pytest.approx(1.0)
        sp = machine_power_split((0.3, 1.005), (0.0, -0.001), MP)
        assert sp.p_t == pytest.approx(0.01005, abs=1e-12)
        assert sp.p_s == pytest.approx(1.00495, abs=1e-12)
        assert sp.identity_error < 1e-12

    def test_exact_split_adds_to_electrical_power(self):
        delta, omega = 0.7, 1.004
        _, dw = eval_machine((delta, omega), 0.1, 1.0, MP, WB)
        sp = machine_power_split((delta, omega), (0.0, dw), MP, exact=True)
        p_e = MP.tau_e_max * math.sin(delta - 0.1) * omega
        assert sp.p_total == pytest.approx(p_e, abs=1e-12)

    def test_rotor_angle_init(self):
        assert machine_rotor_angle("g", 0.2, 1.0, 2.0) == pytest.approx(0.2 + math.asin(0.5))
        with pytest.raises(DeviceInitInfeasible):
            machine_rotor_angle("g", 0.0, 2.5, 2.0)


class TestCoi:
    def test_single(self):
        assert coi_speed([(3.0, 1.013)]) == 1.013

    def test_weighted(self):
        assert coi_speed([(10, 1.01), (5, 0.98)]) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.1, 50), min_size=1, max_size=6), st.floats(0.9, 1.1))
    def test_equal_speeds(self, Ms, w):
        assert coi_speed([(M, w) for M in Ms]) == pytest.approx(w, rel=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyMachineSet):
            coi_speed([])


class TestGovernor:
    def test_equilibrium(self):
        g = GovernorParams(R=0.05, T=0.5, tau_m_ref=1.0)
        assert eval_governor(1.0, 1.0, g) == 0.0

    def test_droop(self):
        g = GovernorParams(R=0.05, T=0.5, tau_m_ref=1.0)
        assert eval_governor(1.0, 1.002, g) == pytest.approx(-0.08)

    def test_integral(self):
        g = GovernorParams(R=0.05, T=0.5, mode="integral")
        assert eval_governor(0.7, 1.001, g) == pytest.approx(-0.04)

    def test_split(self):
        g = GovernorParams(R=0.05, T=0.5, tau_m_ref=0.8)
        sp, gap = machine_gov_power_split((0.2, 1.0), (0.0, 0.0), 0.8, 0.0, MP, g)
        assert sp.p_t == 0.0 and sp.p_s == pytest.approx(0.8)
        assert gap == pytest.approx(0.0, abs=1e-15)
        sp, _ = machine_gov_power_split((0.2, 1.002), (0.0, 0.0), 0.8, 0.0, MP, g)
        assert 0.8 - sp.p_s == pytest.approx(8.8e-5, rel=1e-9)

    def test_frozen_governor_reduces_to_machine(self):
        g = GovernorParams(R=1e12, T=1e12, tau_m_ref=1.0)
        sp_g, _ = machine_gov_power_split((0.2, 1.0), (0.0, -0.001), 1.0, 0.0, MP, g)
        sp_m = machine_power_split((0.2, 1.0), (0.0, -0.001), MP)
        assert sp_g.p_s == pytest.approx(sp_m.p_s, abs=1e-9)
        assert sp_g.p_t == pytest.approx(sp_m.p_t, abs=1e-9)

    def test_two_integral_governors_rejected(self):
        gi = GovernorParams(R=0.05, T=1.0, mode="integral")
        ms = [SyncMachine(f"G{k}", k, 10, 1, 0.2, governor=gi) for k in (1, 2)]
        check_integral_governors(ms[:1])
        with pytest.raises(ConfigurationError, match="integral"):
            check_integral_governors(ms)


class TestAgc:
    def test_examples(self):
        a = AgcParams(K_o=50)
        assert eval_agc(1.0, a) == 0.0
        assert eval_agc(0.999, a) == pytest.approx(0.05)
        assert eval_agc(1.001, a) < 0

    def test_steady_injection(self):
        assert agc_steady_injection(0.8, 0.4, 1.0, 0.0) == 0.8
        assert agc_steady_injection(0.8, 0.4, 1.0, 0.05) == pytest.approx(0.82)

    def test_shares_sum(self):
        r = conventional_agc_shares([0.05, 0.04, 0.06])
        xi = 0.07
        assert sum(agc_steady_injection(0.0, rh, 1.0, xi) for rh in r) == pytest.approx(xi)


class TestRlc:
    P = RlcLoadParams(r=0.5, l=0.3 / WB, c=2.0 / WB)

    def test_phasor_steady_state(self):
        v = 1.02 * np.exp(0.3j)
        i_l, v_c = rlc_steady_state(v, self.P, WB)
        di, dv = eval_rlc_load((i_l, v_c), v, self.P, WB)
        assert abs(di) < 1e-10 and abs(dv) < 1e-10

    def test_deenergized(self):
        di, dv = eval_rlc_load((0j, 0j), 0j, self.P, WB)
        assert di == 0 and dv == 0

    def test_split(self):
        v = 1.0 + 0j
        i_l, v_c = rlc_steady_state(v, self.P, WB)
        sp = load_power_split((i_l, v_c), (0j, 0j), self.P, v)
        assert sp.p_t == 0.0 and sp.p_s == 0.0
        assert sp.identity_error < 1e-12
        sig, vb = (0.3 + 0.1j, 0.2j), 1.0 + 0.1j
        sp = load_power_split(sig, eval_rlc_load(sig, vb, self.P, WB), self.P, vb)
        assert sp.p_s == 0.0 and sp.p_t != 0.0
        assert sp.identity_error < 1e-12


class TestPll:
    P = GflParams(kp_pll=10, ki_pll=50)

    def test_locked(self):
        assert eval_pll((0.0, 0.4), 0.4, self.P, WB) == (0.0, 0.0, 0.0)

    def test_hand(self):
        dz, dth, dw = eval_pll((0.0001, 0.0), 0.001, self.P, WB)
        assert dw == pytest.approx(0.015)
        assert dth == pytest.approx(5.654867, abs=1e-6)
        assert dz == pytest.approx(0.001)

    def test_off_nominal_steady_state(self):
        dw = 0.003
        dz, dth, est = eval_pll((dw / 50, 0.2), 0.2, self.P, WB)
        assert dz == 0.0
        assert est == pytest.approx(dw)
        assert dth == pytest.approx(WB * dw)

    def test_frame(self):
        assert gfl_frame_transform(1.1, 0.3, 0.3) == (1.1, 0.0)
        d, q = gfl_frame_transform(1.0, math.pi / 2, 0.0)
        assert d == pytest.approx(0.0, abs=1e-15) and q == pytest.approx(1.0)
        d, q = gfl_frame_transform(1.05, 0.1, 0.0)
        assert (d, q) == pytest.approx((1.044754, 0.104825), abs=1e-6)


class TestGfl:
    def make(self, **kw):
        dev = Gfl("c", 1, GflParams(**kw), WB)
        x = dev.initialize(1.02, 0.1, 0.7, 0.2)
        return dev, x

    def test_equilibrium(self):
        dev, x = self.make(R_dc=0.05)
        u = np.array([1.02, 0.1, 1.0])
        np.testing.assert_allclose(dev.derivatives(x, u), 0, atol=1e-13)
        sp = dev.split(x, np.zeros(7), u)
        assert sp.p_t == 0.0
        assert sp.p_total == pytest.approx(0.7, abs=1e-12)
        assert sp.identity_error < 1e-12
        assert x[6] == dev.params.i_dc0

    def test_dc_droop(self):
        dev, x = self.make(R_dc=0.05, T_dc=0.1)
        x = x.copy()
        x[0] = -0.002 / dev.params.ki_pll
        xd = eval_gfl(x, (1.02, 0.1), dev.params, WB)
        assert xd[6] == pytest.approx(0.4)

    def test_split_identity_off_equilibrium(self):
        for R_dc in (None, 0.05):
            dev, x = self.make(R_dc=R_dc)
            x = x + np.array([1e-3, -0.02, 0.05, -0.03, 0.01, 0.02, -0.01])
            u = np.array([0.99, 0.12, 1.001])
            xd = dev.derivatives(x, u)
            sp = gfl_power_split(x, xd, dev.params, (0.99, 0.12), WB, omega_s=1.001)
            assert sp.identity_error < 1e-12

    def test_droop_without_source(self):
        with pytest.raises(DcSourceAbsent):
            GflParams(R_dc=0.05, dc_source=False)


class TestGfm:
    def test_droop_examples(self):
        p = GfmParams("droop", D_alpha=0.2, H_alpha=0.1, p_ref=1.0)
        assert eval_gfm([0.2], None, p, 0.95) == pytest.approx(0.15)
        assert eval_gfm([0.5], None, p, 1.0 - 0.1 * 0.5) == pytest.approx(0.0, abs=1e-15)

    def test_vsm_split(self):
        p = GfmParams("vsm", D_alpha=0.2, H_alpha=0.1, M_alpha=5.0, p_ref=1.0)
        sp = gfm_power_split((0.1, 0.0), (0.0, 0.002), p)
        assert sp.p_t_textbook == pytest.approx(0.01)
        assert sp.p_t == pytest.approx(-0.01)
        assert sp.identity_error < 1e-15

    def test_steady_state_split(self):
        p = GfmParams("droop", D_alpha=0.2, H_alpha=0.0, p_ref=0.9)
        sp = gfm_power_split([0.3], [0.0], p)
        assert sp.p_t == 0.0 and sp.p_s == pytest.approx(0.9)

    @pytest.mark.parametrize("variant", ["droop", "vsm"])
    def test_device_identity(self, variant):
        dev = Gfm("f", 1, GfmParams(variant, D_alpha=0.05, H_alpha=0.5, M_alpha=2.0, r_f=0.01, x_f=0.12), WB)
        x = dev.initialize(1.01, 0.05, 0.8, 0.1)
        u = np.array([1.01, 0.05, 1.0])
        np.testing.assert_allclose(dev.derivatives(x, u), 0, atol=1e-12)
        x = x + 0.03
        u = np.array([0.98, 0.02, 1.0004])
        sp = dev.split(x, dev.derivatives(x, u), u)
        assert sp.identity_error < 1e-12


class TestIdealSlack:
    def test_examples(self):
        assert eval_ideal_slack(0.3, 0.2, "integrator", theta_ref=0.2) == 0.0
        assert eval_ideal_slack(0.1, -0.01, "droop", (1.0, 0.1, 0.5)) == pytest.approx(0.0, abs=1e-16)

    def test_droop_needs_t(self):
        with pytest.raises(ConfigurationError):
            eval_ideal_slack(0.1, 0.0, "droop", (1.0, 0.1, 0.0))


def _devices():
    gov = GovernorParams(R=0.05, T=0.4, agc_share=0.3)
    mc = SyncMachine("G", 1, M=8.0, D=1.5, xd_prime=0.2, governor=gov, omega_b=WB)
    mc.initialize(1.03, 0.2, 0.9, 0.3, xi=0.01)
    mi = SyncMachine("Gi", 1, M=8.0, D=1.5, xd_prime=0.2, governor=GovernorParams(R=0.05, T=0.4, mode="integral"), omega_b=WB)
    mi.initialize(1.03, 0.2, 0.9, 0.3)
    m0 = SyncMachine("G0", 1, M=8.0, D=1.5, xd_prime=0.2, omega_b=WB)
    m0.initialize(1.03, 0.2, 0.9, 0.3)
    gfm_d = Gfm("Fd", 1, GfmParams("droop", D_alpha=0.05, H_alpha=0.5, r_f=0.01, x_f=0.12), WB)
    gfm_d.initialize(1.0, 0.1, 0.6, 0.1)
    gfm_v = Gfm("Fv", 1, GfmParams("vsm", D_alpha=0.05, H_alpha=0.5, M_alpha=2.0, r_f=0.01, x_f=0.12), WB)
    gfm_v.initialize(1.0, 0.1, 0.6, 0.1)
    gfl = Gfl("C", 1, GflParams(R_dc=0.05), WB)
    gfl.initialize(1.0, 0.1, 0.6, 0.1)
    gfl0 = Gfl("C0", 1, GflParams(), WB)
    gfl0.initialize(1.0, 0.1, 0.6, 0.1)
    rlc = RlcLoad("L", 1, RlcLoadParams(0.4, 0.2 / WB, 3.0 / WB), WB)
    sl_i = IdealSlack("S", 1, theta_ref=0.0, v_set=1.0)
    sl_d = IdealSlack("Sd", 1, mode="droop", K=2.0, H=0.3, T=0.5, theta_ref=0.05, v_set=1.0)
    zl = StaticLoad("Z", 1, 0.9, 0.3, model="z", v0=1.02)
    pq = StaticLoad("PQ", 1, 0.9, 0.3)
    agc = Agc("A", AgcParams(K_o=20))
    frame = ReferenceFrame(machines=[mc, m0])
    return [mc, mi, m0, gfm_d, gfm_v, gfl, gfl0, rlc, sl_i, sl_d, zl, pq, agc, frame]


@pytest.mark.parametrize("dev", _devices(), ids=lambda d: d.name)
def test_device_jacobians_match_finite_differences(dev):
    rng = np.random.default_rng(abs(hash(dev.name)) % 2**32)
    nu = len(dev.input_keys)
    if dev.kind == "frame":
        nu = len(dev.machines)
    base_u = {"v": 1.01, "theta": 0.12, "omega_s": 1.002, "xi": 0.02}
    u = np.array([base_u.get(k, 1.0) if isinstance(k, str) else 1.001 for k in dev.input_keys])
    if dev.kind == "frame":
        u = np.array([1.003, 0.998])
    z = rng.normal(scale=0.05, size=dev.m + nu)
    if dev.kind == "machine":
        z[: dev.m] += np.array([0.6, 1.0, 0.9][: dev.m])
    elif dev.kind == "gfl":
        z[: dev.m] += np.array([0.0, 0.1, 0.6, -0.1, 1.0, 1.0, 0.7])
    elif dev.kind == "gfm":
        z[: dev.m] += 0.3
    elif dev.kind == "frame":
        z[:1] += 1.0
    z[dev.m :] += u

    def fun(zz):
        return dev.evaluate(zz[: dev.m], zz[dev.m :])[0]

    _, G = dev.evaluate(z[: dev.m], z[dev.m :])
    J = central_jacobian(fun, z, h=1e-6)
    scale = max(1.0, np.max(np.abs(J)))
    assert np.max(np.abs(G - J)) / scale < 1e-4
    assert G.shape == (dev.m + (2 if dev.injects else 0), dev.m + nu)
