"""Two lossless, undamped machines: no common steady speed, but equal period averages.

    python3 demos/undamped_weak.py
"""

from slackdyn import caseio
from slackdyn.dynsim import run
from slackdyn.slackcheck import check_strong, check_weak

case, system = caseio.load("two_machine_undamped")
traj = run(system, caseio.build_scenario(case, "kick"))

print("strong:", check_strong(traj).verdict.value)
weak = check_weak(traj)
print(weak.to_text())
