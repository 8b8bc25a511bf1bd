"""How much noise does each accountant need for the same budget?

Calibrates the Gaussian noise multiplier for four accountants across a range
of target epsilons, then runs the forward accounting to confirm each sigma
lands just under its target.
"""

from dplab.accountant import PrivacyBudget, Variant, achieved_budget, advantage_bound, calibrate_sigma

K = 500  # e.g. 100 epochs of 5 batches
DELTA = 1e-5

print(f"noise multiplier for k={K} steps, delta={DELTA}")
print(f"{'eps':>8} " + " ".join(f"{v.value:>10}" for v in Variant) + f" {'e^eps-1':>12}")
for eps in (0.1, 1.0, 10.0, 100.0, 1000.0):
    sigmas = [calibrate_sigma(v, PrivacyBudget(eps, DELTA), K) for v in Variant]
    print(f"{eps:>8g} " + " ".join(f"{s:>10.4g}" for s in sigmas) + f" {advantage_bound(eps):>12.4g}")

# the tighter the accountant, the less noise for the same guarantee; at very
# large budgets the advanced-composition slack term dominates and it loses to NC
sigma = calibrate_sigma("RDP", PrivacyBudget(1.0, DELTA), K)
for v in Variant:
    spent = achieved_budget(v, sigma, K, DELTA)
    print(f"sigma={sigma:.4g} accounted by {v.value:>4}: eps={spent.epsilon:.4g}")
