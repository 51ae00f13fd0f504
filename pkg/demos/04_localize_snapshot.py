"""Localizing a conversion-rate drop.

The root conversion rate fell from an expected 0.52 to 0.38. Candidate
leaves are filtered by deviation and importance, a genetic search picks the
set whose replacement by forecasts best restores the root, and backtracking
folds the chosen leaves into coarser nodes.
"""
# %%
from crossrca.core import aggregate_panel, build_tree
from crossrca.datasets import snapshot_expected, snapshot_leaf_panel, snapshot_schemas
from crossrca.evaluation import individual_recovery
from crossrca.localize import LocalizeConfig, localize
from crossrca.oracle import ExactModel

dims, metrics = snapshot_schemas()
leaf = snapshot_leaf_panel()
tree = build_tree(dims, leaf.keys)
full = aggregate_panel(leaf, tree, metrics)
expected = snapshot_expected()

# %% the exact model stands in for a trained attention model here
report = localize(full, expected, ExactModel(metrics), tree, metrics, "conversion_rate",
                  LocalizeConfig())
print(report.summary())

# %% how much of the drop each leaf explains on its own
import numpy as np

real = leaf.values[0]
exp_leaf = np.array([expected.expected[expected.key_index[k], :3] for k in tree.leaves])
m = metrics.index("conversion_rate")
rec = individual_recovery(ExactModel(metrics), tree, real, exp_leaf, m,
                          full.get(0, tree.root, "conversion_rate"), 0.52)
for key, r in sorted(zip(tree.leaves, rec), key=lambda kv: -kv[1]):
    print("|".join(key).ljust(20), round(float(r), 3))
