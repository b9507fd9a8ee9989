# Classifier guidance over return-to-go bins, computed exactly.
#
# The model's prior over 6 RTG bins is peaked on low returns; the classifier
# thinks high bins make a high-return trajectory likely.
import numpy as np

from rt_lab.rtmodel import guided_rtg_distribution

prior_logits = np.log(np.array([0.35, 0.25, 0.15, 0.12, 0.08, 0.05]))
high_logits = np.array([-4.0, -2.5, -1.0, 0.5, 2.0, 3.0])   # log-odds of H=1 per bin

np.set_printoptions(precision=3, suppress=True)
for lam in (0.0, 0.5, 1.0, 2.0, 8.0):
    p = guided_rtg_distribution(prior_logits, high_logits, lam)
    print(f"lambda={lam:<4} {p}  mean bin {p @ np.arange(6):.2f}")

# lambda=0 returns the prior untouched; lambda=1 is the Bayes posterior
# P(R | H=1); large lambda collapses onto the bin the classifier likes best.
prior = np.exp(prior_logits)
lik = 1 / (1 + np.exp(-high_logits))
print("by hand, lambda=1:", prior * lik / (prior * lik).sum())
