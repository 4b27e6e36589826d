"""
Boundary bias of forest averages
================================

A regression forest predicts by averaging responses in leaves. Near the
edge of the covariate space every leaf lies on one side of the test point,
so a steep trend gets flattened. A local linear correction on the forest
kernel removes most of that bias.

"""

# %%
# The signal depends on x1 only; nine more covariates are pure noise and
# make the leaves wide.
import numpy as np

from llforest import ForestConfig, SimSpec, fit_llf, fit_rf, generate
from llforest.simbench import truth

train, _ = generate(SimSpec("boundary", n=1000, d=10, sigma=1.0, seed=0))
cfg = ForestConfig(num_trees=500, seed=1)

# %%
# The plain forest uses CART splits and a kernel average; the local linear
# forest reuses the same kind of kernel but fits a ridge-penalized line at
# each test point.
rf = fit_rf(train, cfg)
llf = fit_llf(train, cfg)
print("penalty chosen out of bag:", llf.lambda_predict)
print("columns in the local regression (lasso):", llf.selected_features)

# %%
# Compare both along x1, right up to the edges, with the other covariates
# held at 0.5.
grid = np.full((11, 10), 0.5)
grid[:, 0] = np.linspace(0, 1, 11)
mu = truth("boundary", grid)
print(" x     truth    RF      LLF")
for x, m, a, b in zip(grid[:, 0], mu, rf.predict(grid).mu, llf.predict(grid).mu):
    print(f"{x:4.1f} {m:8.3f} {a:7.3f} {b:7.3f}")

# %%
# The plain forest overshoots at x1 = 0 and undershoots at x1 = 1.
edge = grid[-1:]
print("error at x=1  RF: %.3f  LLF: %.3f"
      % (rf.predict(edge).mu[0] - mu[-1], llf.predict(edge).mu[0] - mu[-1]))
