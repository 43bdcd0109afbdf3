import numpy as np
import pytest

from oracles import two_bus_newton
from slackdyn.errors import NonConvergence, NoSlackParticipant
from slackdyn.netcore import Branch, Bus, Network, branch_flows
from slackdyn.powerflow import (
    Generator,
    Injections,
    SlackSpec,
    solve_powerflow,
    verify_angle_offset_invariance,
)

R, X = 0.01, 0.1
LOAD = 1.0 + 0.2j


def net2():
    return Network(buses=(Bus(1), Bus(2)), branches=(Branch(1, 2, r=R, x=X),))


def inj_single():
    return Injections(generators=(Generator(1, p=1.0, v=1.0),), loads={2: LOAD})


def inj_dist():
    return Injections(generators=(Generator(1, p=1.0, v=1.0), Generator(2, p=0.0)), loads={2: LOAD})


def test_flat_solution_without_load():
    net = net2()
    inj = Injections(generators=(Generator(1, p=0.0, v=1.0),))
    for spec in (
        SlackSpec("single", reference_bus=1, theta_ref=0.3),
        SlackSpec("distributed", participation={1: 1.0}, theta_ref=0.3),
        SlackSpec("dynamic", reference_bus=1, theta_ref=0.3, droop=(1.0, 0.5, 1.0)),
    ):
        sol = solve_powerflow(net, inj, spec)
        np.testing.assert_allclose(sol.v, 1.0, atol=1e-12)
        np.testing.assert_allclose(sol.theta, 0.3, atol=1e-12)
        assert sol.sigma_hat == pytest.approx(0.0, abs=1e-12)


def test_single_slack_matches_oracle():
    th2, v2, s = two_bus_newton(R, X, 1.0, 1.0, LOAD)
    sol = solve_powerflow(net2(), inj_single(), SlackSpec("single", reference_bus=1), tol=1e-12)
    assert sol.theta[0] == 0.0
    np.testing.assert_allclose([sol.theta[1], sol.v[1], sol.sigma_hat], [th2, v2, s], atol=1e-8)
    # scheduled dispatch equals the load, so the slack covers the losses
    assert sol.sigma_hat == pytest.approx(sol.losses, abs=1e-10)
    assert sol.losses > 0


def test_distributed_slack_matches_oracle():
    th2, v2, s = two_bus_newton(R, X, 1.0, 1.0, LOAD, k=(0.5, 0.5))
    spec = SlackSpec("distributed", reference_bus=1, participation={1: 0.5, 2: 0.5})
    sol = solve_powerflow(net2(), inj_dist(), spec, tol=1e-12)
    np.testing.assert_allclose([sol.theta[1], sol.v[1], sol.sigma_hat], [th2, v2, s], atol=1e-8)
    np.testing.assert_allclose(sol.p_gen, [1.0 + 0.5 * sol.sigma_hat, 0.5 * sol.sigma_hat], atol=1e-15)
    single = solve_powerflow(net2(), inj_single(), SlackSpec("single", reference_bus=1))
    f_d = branch_flows(net2(), sol.v, sol.theta)
    f_s = branch_flows(net2(), single.v, single.theta)
    assert abs(f_d[0] - f_s[0]) > 1e-4


def test_single_equals_distributed_one_participant():
    a = solve_powerflow(net2(), inj_dist(), SlackSpec("single", reference_bus=1))
    b = solve_powerflow(net2(), inj_dist(), SlackSpec("distributed", participation={1: 1.0, 2: 0.0}))
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-10)
    np.testing.assert_allclose(a.v, b.v, atol=1e-10)
    assert a.sigma_hat == pytest.approx(b.sigma_hat, abs=1e-10)


@pytest.mark.parametrize(
    "spec",
    [
        SlackSpec("single", reference_bus=1),
        SlackSpec("distributed", participation={1: 0.3, 2: 0.7}),
        SlackSpec("dynamic", reference_bus=1, droop=(1.0, 0.1, 0.5)),
    ],
)
def test_balance_and_losses(spec):
    sol = solve_powerflow(net2(), inj_dist(), spec)
    assert sol.p_gen.sum() - LOAD.real == pytest.approx(sol.losses, abs=1e-8)


def test_sigma_independent_of_theta_ref():
    a = solve_powerflow(net2(), inj_dist(), SlackSpec("distributed", participation={1: 0.5, 2: 0.5}))
    b = solve_powerflow(
        net2(), inj_dist(), SlackSpec("distributed", participation={1: 0.5, 2: 0.5}, theta_ref=0.7)
    )
    assert a.sigma_hat == pytest.approx(b.sigma_hat, abs=1e-12)
    np.testing.assert_allclose(b.theta - a.theta, 0.7, atol=1e-12)


def test_droop_equilibrium_offsets_reference_angle():
    K, H = 1.0, 0.1
    droop = SlackSpec("dynamic", reference_bus=1, droop=(K, H, 0.5))
    single = SlackSpec("single", reference_bus=1)
    rep = verify_angle_offset_invariance(net2(), inj_single(), droop, single)
    assert rep.consistent
    assert rep.max_flow_error < 1e-8
    assert rep.theta_ref_droop == pytest.approx(0.0 - H / K * rep.sigma_hat_droop, abs=1e-12)
    assert rep.theta_ref_droop != 0.0


def test_droop_without_h_fixes_reference():
    droop = SlackSpec("dynamic", reference_bus=1, droop=(1.0, 0.0, 0.5))
    rep = verify_angle_offset_invariance(net2(), inj_single(), droop, SlackSpec("single", reference_bus=1))
    assert rep.theta_ref_droop == 0.0


def test_droop_zero_loss_network():
    net = Network(buses=(Bus(1), Bus(2)), branches=(Branch(1, 2, x=0.1),))
    inj = Injections(generators=(Generator(1, p=0.5, v=1.0),), loads={2: 0.5})
    droop = SlackSpec("dynamic", reference_bus=1, droop=(1.0, 0.4, 0.5))
    rep = verify_angle_offset_invariance(net, inj, droop, SlackSpec("single", reference_bus=1))
    assert rep.sigma_hat_droop == pytest.approx(0.0, abs=1e-12)
    assert rep.theta_ref_droop == pytest.approx(0.0, abs=1e-12)


def test_participation_validation():
    with pytest.raises(ValueError):
        solve_powerflow(net2(), inj_dist(), SlackSpec("distributed", participation={1: 0.6, 2: 0.6}))
    with pytest.raises(ValueError):
        solve_powerflow(net2(), inj_dist(), SlackSpec("distributed", participation={1: 1.5, 2: -0.5}))
    sol = solve_powerflow(
        net2(), inj_dist(), SlackSpec("distributed", participation={1: 1.5, 2: -0.5}, allow_negative=True)
    )
    assert sol.mismatch < 1e-8
    with pytest.raises(NoSlackParticipant):
        solve_powerflow(net2(), inj_single(), SlackSpec("distributed", participation={2: 1.0}))


def test_nonconvergence_reports_trace():
    inj = Injections(generators=(Generator(1, p=0.0, v=1.0),), loads={2: 50.0 + 10j})
    with pytest.raises(NonConvergence) as exc:
        solve_powerflow(net2(), inj, SlackSpec("single", reference_bus=1), max_iter=10)
    assert len(exc.value.trace) == 11
