"""Genetic search against exhaustive enumeration.

The fitness of a chromosome is the share of the root deviation left after
replacing the selected leaves by their forecasts, plus a size penalty. With
a dozen candidates the exhaustive optimum is still cheap, so it can check
the genetic search; beyond that only the genetic search stays affordable.
"""
# %%
import time

import numpy as np

from crossrca.forecast import forecast_panel
from crossrca.localize import (FitnessContext, GaConfig, exhaustive_search, filter_candidates,
                               ga_search)
from crossrca.oracle import ExactModel
from crossrca.synth import SynthConfig, generate_dataset

ds = generate_dataset(SynthConfig(values_per_dim=(4, 5), T=60, n_anomalies=1, causes=(2, 2),
                                  seed=77))
t = ds.labels[0].t
fp = forecast_panel(ds.panel, t)
oracle = ExactModel(ds.metrics)
real = ds.panel.values[t, ds.tree.leaf_start:, :2]
expected = np.array([fp.expected[fp.key_index[k], :2] for k in ds.tree.leaves])
d = ds.metrics.index("d")
order = filter_candidates(real, expected, oracle.leaf_importance(ds.tree, real), 0.0).positions
print("injected:", ds.labels[0].keys)

# %% grow the candidate list and time both searches
for n in (4, 8, 12, 16):
    ctx = FitnessContext(oracle, ds.tree, real, expected, order[:n], d,
                         ds.panel.values[t, 0, d], fp.get(ds.tree.root, "d"))
    start = time.perf_counter()
    res = ga_search(GaConfig(seed=0), n, ctx)
    ga_s = time.perf_counter() - start
    start = time.perf_counter()
    best, best_fit = exhaustive_search(n, ctx)
    ex_s = time.perf_counter() - start
    print(f"n={n:2d} ga {res.best_fitness:.4f} in {ga_s * 1e3:6.1f} ms,"
          f" exhaustive {best_fit:.4f} in {ex_s * 1e3:8.1f} ms")
