"""Integral AGC on top of droop governors returns the centre-of-inertia speed to nominal.

Each machine ends at its dispatch plus its share of the AGC signal xi.

    python3 demos/agc_restore.py
"""

from slackdyn import caseio
from slackdyn.dynsim import run

case, system = caseio.load("wscc9_agc")
traj = run(system, caseio.build_scenario(case, "load_loss"))
pf = system.solve_powerflow()
xi = traj.column("devAGC.xi")[-1]

print(f"final omega_coi - 1 = {traj.column('omega_coi')[-1] - system.omega_n:.2e}")
print(f"xi = {xi:.5f}")
for k, name in enumerate(("G1", "G2", "G3")):
    share = system.device(name).governor.agc_share
    p_end = traj.column(f"dev{name}.p")[-1]
    print(f"{name}: p = {p_end:.5f}   p0 + share*xi = {pf.p_gen[k] + share * xi:.5f}")
