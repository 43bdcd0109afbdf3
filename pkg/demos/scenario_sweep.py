"""Run the four WSCC 9-bus load-loss scenarios and report slack capability.

Machines, droop GFMs and VSM GFMs all settle to a common frequency; three
grid-following converters cannot, and the step after the load loss fails.

    python3 demos/scenario_sweep.py
"""

from slackdyn import caseio
from slackdyn.dynsim import run
from slackdyn.slackcheck import audit_power_split, check_strong

CASES = ["wscc9_machines", "wscc9_gfm_droop", "wscc9_gfm_vsm", "wscc9_gfl"]


def main():
    for name in CASES:
        case, system = caseio.load(name)
        traj = run(system, caseio.build_scenario(case, "load_loss"))
        if traj.failure is not None:
            print(f"{name:18s} failed at t={traj.failure.t:.3f} s: {traj.failure}")
            continue
        rep = check_strong(traj)
        audit = audit_power_split(traj, strict=False)
        worst = max(audit.residual_transient.values(), default=float("nan"))
        print(
            f"{name:18s} {rep.verdict.value:6s} sigma_hat={rep.sigma_hat_estimate:.6f} "
            f"steady from t={audit.steady_time:.2f} s, max|p_t| there={worst:.1e}"
        )


if __name__ == "__main__":
    main()
