"""
Where the trees split
=====================

CART splits chase the strongest marginal trend. On the Friedman function
x4 and x5 enter linearly, so CART spends many early splits on them. Ridge
residual splits remove the linear part inside each node first and leave
the early splits to the nonlinear variables x1 to x3.

"""

# %%
from llforest import ForestConfig, SimSpec, generate, grow_forest

data, _ = generate(SimSpec("friedman", n=600, d=5, seed=0))

# %%
# Split counts by depth (rows, root first) and variable (columns).
for rule in ("cart", "ridge"):
    forest = grow_forest(data, ForestConfig(num_trees=500, split_rule=rule, seed=1))
    freq = forest.split_frequencies(4)
    share = freq / freq.sum(axis=1, keepdims=True)
    print(f"\n{rule} splits, share per depth")
    print("depth   x1    x2    x3    x4    x5")
    for depth, row in enumerate(share, start=1):
        print(f"{depth:5d} " + " ".join(f"{v:5.2f}" for v in row))
