"""Exact relationship model: true aggregation plus formulas.

Interface-compatible with :class:`crossrca.gat.GatModel` for the calls the
localizer makes, so the search can run against the known relationship
(synthetic data, worked examples) or the learned one.
"""
from __future__ import annotations

import numpy as np

from .core import DimensionTree, MetricSchema, aggregate_levels, compute_derived
from .gat import path_products


class ExactModel:
    def __init__(self, metrics: MetricSchema):
        self.metrics = metrics
        self.fundamentals = metrics.fundamentals
        self.derived = tuple(n for n, _ in metrics.derived)
        self._how = [metrics.agg(m) for m in metrics.fundamentals]

    @property
    def P(self):
        return self.metrics.P

    @property
    def outputs(self):
        return self.metrics.names

    def propagate(self, tree: DimensionTree, leaf_values):
        """Every node's fundamentals and deriveds, shape (..., n_nodes, P+Q)."""
        fund, _ = aggregate_levels(tree, leaf_values, self._how)
        with np.errstate(all="ignore"):
            return compute_derived(self.metrics, fund)

    def root_weights(self, tree):
        """Linear map leaf -> root fundamental (SUM weight 1, nested MEAN shares)."""
        w = np.ones((tree.n_leaves, self.P))
        is_mean = np.array([h == "MEAN" for h in self._how])
        if is_mean.any():
            for l in range(tree.n_levels, 0, -1):
                a, b = tree.level_bounds[l]
                share = 1.0 / tree.n_children[tree.parent[a:b]]
                # spread node share to its leaves
                for i, s in zip(range(a, b), share):
                    w[tree.leaf_lo[i]:tree.leaf_hi[i], is_mean] *= s
        return w

    def predict_root(self, tree: DimensionTree, leaf_values):
        """Root metrics only; cheaper than a full propagate."""
        if getattr(self, "_w_key", None) != id(tree):
            self._w = self.root_weights(tree)
            self._w_key = id(tree)
        root = np.einsum("...lp,lp->...p", np.asarray(leaf_values, dtype=float), self._w)
        with np.errstate(all="ignore"):
            return compute_derived(self.metrics, root)

    def leaf_importance(self, tree: DimensionTree, leaf_values):
        """Each node's share of its parent, averaged over fundamentals, multiplied along paths."""
        fund = self.propagate(tree, leaf_values)[..., : self.P]
        parent = fund[..., np.maximum(tree.parent, 0), :]
        with np.errstate(all="ignore"):
            share = np.where(parent != 0, fund / parent, 0.0)
        edge = share.mean(axis=-1)
        edge[..., 0] = 1.0
        # siblings with all-zero parents get a uniform share
        for l in range(1, tree.n_levels + 1):
            a, b = tree.level_bounds[l]
            dead = np.all(parent[..., a:b, :] == 0, axis=-1)
            edge[..., a:b] = np.where(dead, 1.0 / tree.n_children[tree.parent[a:b]], edge[..., a:b])
        return path_products(tree, edge)

    def root_with_changes(self, tree: DimensionTree, base, leaf_pos, new_values):
        """Root metrics when leaves at ``leaf_pos`` take ``new_values`` (B, k, P)."""
        if getattr(self, "_w_key", None) != id(tree):
            self._w = self.root_weights(tree)
            self._w_key = id(tree)
        leaf_pos = np.asarray(leaf_pos, dtype=np.int64)
        old = base[tree.leaf_start + leaf_pos, : self.P]
        delta = np.einsum("bkp,kp->bp", np.asarray(new_values, dtype=float) - old, self._w[leaf_pos])
        with np.errstate(all="ignore"):
            return compute_derived(self.metrics, base[0, : self.P] + delta)
