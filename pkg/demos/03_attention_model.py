"""Learning how children combine into their parent.

A graph attention layer is shared by every parent-children subtree. It is
trained with hand-written backpropagation and then applied bottom-up to
predict the root from leaf fundamentals. Its attention weights, multiplied
along each path, rank how much every leaf matters to the root.
"""
# %% a small synthetic cube with d = a / b
import numpy as np

from crossrca.gat import GatConfig, train
from crossrca.oracle import ExactModel
from crossrca.synth import SynthConfig, generate_dataset

ds = generate_dataset(SynthConfig(values_per_dim=(2, 4), T=200, f_index=0, seed=0))
print(ds.metrics.names, "g =", ds.g)

# %% train with early stopping on the last fifth of the timestamps
model, log = train(GatConfig(seed=0), ds.tree, ds.panel, ds.metrics)
print(f"epochs {log.epochs}, best {log.best_epoch}, val mse {min(log.val_mse):.2e}"
      f" (mean predictor {log.baseline_val_mse:.2e})")

# %% held-out root predictions next to the exact aggregation
leaf = ds.panel.reindex(ds.tree.leaves).select_metrics(ds.metrics.fundamentals).values
exact = ExactModel(ds.metrics)
d = ds.metrics.index("d")
for t in (170, 185, 199):
    print(t, round(model.predict_root(ds.tree, leaf[t])[d], 4),
          round(exact.predict_root(ds.tree, leaf[t])[d], 4))

# %% leaf importance from attention path products
imp = model.leaf_importance(ds.tree, leaf[199])
for key, w in sorted(zip(ds.tree.leaves, imp), key=lambda kv: -kv[1])[:4]:
    print("|".join(key), round(float(w), 4))
