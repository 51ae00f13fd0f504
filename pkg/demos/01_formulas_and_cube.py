"""Derived metrics over a dimension cube.

Fundamentals such as views and conversions add up along every dimension.
Derived metrics such as the conversion rate are formulas over fundamentals
and are recomputed at every node rather than summed.
"""
# %% a formula is parsed once and evaluated over numpy arrays
import numpy as np

from crossrca.core import aggregate_panel, build_tree
from crossrca.datasets import snapshot_leaf_panel, snapshot_schemas
from crossrca.formula import parse_formula

expr = parse_formula("log(a + 1) / log(b + 1)")
print(expr, "->", expr.evaluate({"a": np.array([9.0, 99.0]), "b": np.array([99.0, 9.0])}))

# %% eight leaves: two channels times four regions
dims, metrics = snapshot_schemas()
leaf = snapshot_leaf_panel()
tree = build_tree(dims, leaf.keys)
print(f"{tree.n_leaves} leaves, {len(tree)} nodes, depth {tree.depth.max()}")

# %% exact aggregation fills every node with fundamentals and deriveds
full = aggregate_panel(leaf, tree, metrics)
for key in tree.nodes[: tree.leaf_start]:
    row = full.values[0, full.key_index[key]]
    print("|".join(key).ljust(20), " ".join(f"{v:12.4f}" for v in row))

# %% the same leaves grouped by region first
by_region = build_tree(dims, leaf.keys, order=(1, 0))
print("children of the root:", by_region.children(by_region.root))
