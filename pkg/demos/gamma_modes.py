# How the two reliability accumulators react to one bad step.
#
# A generated rollout of 12 steps where every transition scores 0.4 except
# step 8, which scores 6.0 (think: a wall crossing). alpha is 2.0.
import numpy as np

from rt_lab.reliability import ReliabilityTrace, gamma_update, pessimistic_relabel
from rt_lab.trajdata import GENERATED, Trajectory, compute_rtg

alpha = 2.0
d = np.full(12, 0.4)
d[7] = 6.0

for mode in ("weighted", "sum"):
    tr = ReliabilityTrace(alpha=alpha, mode=mode)
    for t in range(len(d)):
        e = np.zeros(t + 1)               # flat attention: every earlier step counts the same
        gamma_update(tr, e, d[t])
        if tr.stop_index is not None:
            break
    print(mode.ljust(8), "gamma:", np.round(tr.gamma, 3), "stop at", tr.stop_index)

# weighted mode averages the spike away: (7 * 0.4 + 6.0) / 8 = 1.1 stays under 2.0.
# The running sum crosses alpha at index 5, before the spike even arrives.

# sharper attention on the offending step changes the weighted picture
tr = ReliabilityTrace(alpha=alpha)
for t in range(8):
    e = np.zeros(t + 1)
    e[-1] = 3.0                             # attend mostly to the newest step
    gamma_update(tr, e, d[t])
print("peaked  ", "gamma:", np.round(tr.gamma, 3), "stop at", tr.stop_index)

# relabeling: three generated steps in front of a two-step original suffix
rewards = [0.0, 0.0, 0.0, 0.0, 1.0]
traj = Trajectory(tuple(range(5)), (0,) * 5, tuple(rewards), tuple(compute_rtg(rewards)),
                  True, GENERATED, 3)
tr = ReliabilityTrace(alpha=alpha)
for t, dist in enumerate([0.2, 0.6, 1.0]):
    gamma_update(tr, np.zeros(t + 1), dist)
out = pessimistic_relabel(traj, tr, alpha, beta=0.5)
print("relabeled rewards", out.rewards)
print("rtgs", np.round(out.rtgs, 4))
