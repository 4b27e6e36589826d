"""
Pointwise confidence intervals
==============================

Trees are grown in little bags: groups of trees that share one half of the
data. Comparing bag averages of the score residuals gives a variance for
each prediction without refitting anything.

"""

# %%
import numpy as np

from llforest import ForestConfig, SimSpec, fit_llf, generate
from llforest.simbench import truth

train, mu = generate(SimSpec("step", n=1000, d=2, sigma=1.0, seed=3))
model = fit_llf(train, ForestConfig(num_trees=1000, mtry=2, seed=4))

# %%
# Predictions with 95% intervals at a few points across the first step.
X = np.column_stack([np.linspace(0.1, 0.9, 9), np.full(9, 0.5)])
p = model.predict(X, ci_level=0.95)
for x, m, lo, hi in zip(X[:, 0], truth("step", X), p.ci_lo, p.ci_hi):
    print(f"x1={x:.1f}  truth={m:6.3f}  interval=[{lo:6.3f}, {hi:6.3f}]")

# %%
# Out-of-bag intervals on the training rows: how often do they cover the
# true signal?
oob = model.predict(ci_level=0.95)
covered = (oob.ci_lo <= mu) & (mu <= oob.ci_hi)
print(f"out-of-bag coverage {covered.mean():.3f}, mean length {np.mean(oob.ci_hi - oob.ci_lo):.3f}")
