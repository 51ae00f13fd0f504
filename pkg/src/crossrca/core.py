"""Dimension tree, metric schemas, metric panels and exact aggregation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    FormulaDomainError,
    FormulaError,
    IncompletePanelError,
    SchemaError,
)
from .formula import Expr, parse_formula

logger = logging.getLogger(__name__)

AGG = "AGG"

NodeKey = tuple  # one entry per dimension: a value label or AGG


def format_key(key: NodeKey) -> str:
    return "|".join(key)


def parse_key(text: str) -> NodeKey:
    return tuple(text.split("|"))


def is_leaf_key(key: NodeKey) -> bool:
    return AGG not in key


def key_covers(ancestor: NodeKey, key: NodeKey) -> bool:
    """True when ``key`` lies below (or is) ``ancestor`` in the cube lattice."""
    return all(a == AGG or a == k for a, k in zip(ancestor, key))


@dataclass(frozen=True)
class DimensionSchema:
    dimensions: tuple
    values: tuple  # tuple of value-label tuples, aligned with ``dimensions``

    def __post_init__(self):
        dims = tuple(self.dimensions)
        vals = tuple(tuple(v) for v in self.values)
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "values", vals)
        if len(dims) == 0:
            raise SchemaError("at least one dimension is required")
        if len(set(dims)) != len(dims):
            raise SchemaError(f"duplicate dimension names in {dims}")
        if len(vals) != len(dims):
            raise SchemaError("one value list per dimension is required")
        for name, labels in zip(dims, vals):
            if len(set(labels)) != len(labels):
                raise SchemaError(f"duplicate value labels in dimension {name!r}")
            if AGG in labels:
                raise SchemaError(f"reserved label {AGG!r} used as a value of {name!r}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str]]) -> "DimensionSchema":
        return cls(tuple(mapping), tuple(tuple(v) for v in mapping.values()))

    @property
    def n_dims(self) -> int:
        return len(self.dimensions)

    def value_index(self, dim: int, label: str) -> int:
        try:
            return self.values[dim].index(label)
        except ValueError:
            raise SchemaError(
                f"unknown value {label!r} for dimension {self.dimensions[dim]!r}"
            ) from None

    def fingerprint(self) -> str:
        blob = json.dumps([self.dimensions, self.values])
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class MetricSchema:
    """Fundamental metrics, derived formulas and per-fundamental aggregation."""

    fundamentals: tuple
    derived: tuple  # ((name, formula_text), ...) in definition order
    aggregation: tuple = ()  # ((fundamental, "SUM" | "MEAN"), ...); missing -> SUM
    _parsed: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        fundamentals = tuple(self.fundamentals)
        derived = tuple((str(n), str(f)) for n, f in
                        (self.derived.items() if isinstance(self.derived, Mapping) else self.derived))
        agg = dict(self.aggregation.items() if isinstance(self.aggregation, Mapping)
                   else self.aggregation)
        object.__setattr__(self, "fundamentals", fundamentals)
        object.__setattr__(self, "derived", derived)
        if not fundamentals:
            raise SchemaError("at least one fundamental metric is required")
        if not derived:
            raise SchemaError("at least one derived metric is required")
        names = list(fundamentals) + [n for n, _ in derived]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate metric names in {names}")
        for name in agg:
            if name not in fundamentals:
                raise SchemaError(f"aggregation given for non-fundamental {name!r}")
        full_agg = {}
        for name in fundamentals:
            how = str(agg.get(name, "SUM")).upper()
            if how not in ("SUM", "MEAN"):
                raise SchemaError(f"aggregation for {name!r} must be SUM or MEAN, got {how!r}")
            full_agg[name] = how
        object.__setattr__(self, "aggregation", tuple(full_agg.items()))

        parsed = {}
        known = set(fundamentals)
        for name, text in derived:
            try:
                expr = parse_formula(text)
            except FormulaError as exc:
                raise SchemaError(f"formula for {name!r}: {exc}") from exc
            unknown = expr.names() - known
            if unknown:
                raise SchemaError(
                    f"formula for {name!r} references undefined or later metrics {sorted(unknown)}"
                )
            parsed[name] = expr
            known.add(name)
        object.__setattr__(self, "_parsed", parsed)

    @property
    def names(self) -> tuple:
        return self.fundamentals + tuple(n for n, _ in self.derived)

    @property
    def P(self) -> int:
        return len(self.fundamentals)

    @property
    def Q(self) -> int:
        return len(self.derived)

    def formula(self, name: str) -> Expr:
        return self._parsed[name]

    def agg(self, name: str) -> str:
        return dict(self.aggregation)[name]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown metric {name!r}") from None

    def dependencies(self, name: str) -> set:
        """Fundamental metrics a metric depends on, directly or via other deriveds."""
        if name in self.fundamentals:
            return {name}
        out = set()
        for ref in self.formula(name).names():
            out |= self.dependencies(ref)
        return out

    def fingerprint(self) -> str:
        blob = json.dumps([self.fundamentals, self.derived, self.aggregation])
        return hashlib.sha256(blob.encode()).hexdigest()


class DimensionTree:
    """Canonical aggregation tree over dimension-value combinations.

    Nodes are stored level by level (root first, leaves last); inside a level
    nodes are sorted by the value order of the expanded dimensions, so the
    children of any node, and its leaf descendants, are contiguous ranges.
    ``order`` is the dimension expansion order (default: schema order).
    """

    def __init__(self, schema: DimensionSchema, nodes, parent, order):
        self.schema = schema
        self.order = tuple(order)
        self.nodes = list(nodes)
        self.index = {k: i for i, k in enumerate(self.nodes)}
        self.parent = np.asarray(parent, dtype=np.int64)
        n = len(self.nodes)
        self.depth = np.array([sum(1 for v in k if v != AGG) for k in self.nodes], dtype=np.int64)
        self.n_levels = schema.n_dims
        self.level_bounds = [
            (int(np.searchsorted(self.depth, l, "left")), int(np.searchsorted(self.depth, l, "right")))
            for l in range(self.n_levels + 1)
        ]
        counts = np.bincount(self.parent[1:], minlength=n)
        self.n_children = counts
        first = np.full(n, -1, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            first[self.parent[i]] = i
        self.first_child = first
        lo, hi = self.level_bounds[self.n_levels]
        self.leaf_start = lo
        self.n_leaves = hi - lo
        # leaf descendant ranges, computed bottom-up
        leaf_lo = np.zeros(n, dtype=np.int64)
        leaf_hi = np.zeros(n, dtype=np.int64)
        leaf_lo[lo:hi] = np.arange(hi - lo)
        leaf_hi[lo:hi] = np.arange(hi - lo) + 1
        for l in range(self.n_levels - 1, -1, -1):
            a, b = self.level_bounds[l]
            for i in range(a, b):
                c0 = first[i]
                c1 = c0 + counts[i] - 1
                leaf_lo[i] = leaf_lo[c0]
                leaf_hi[i] = leaf_hi[c1]
        self.leaf_lo = leaf_lo
        self.leaf_hi = leaf_hi

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"DimensionTree({len(self.nodes)} nodes, {self.n_leaves} leaves, depth {self.n_levels})"

    @property
    def root(self) -> NodeKey:
        return self.nodes[0]

    @property
    def leaves(self) -> list:
        return self.nodes[self.leaf_start:]

    @property
    def non_leaf_count(self) -> int:
        return self.leaf_start

    def level(self, l: int) -> range:
        a, b = self.level_bounds[l]
        return range(a, b)

    def children(self, key: NodeKey) -> list:
        i = self.index[key]
        if self.n_children[i] == 0:
            return []
        c0 = self.first_child[i]
        return self.nodes[c0:c0 + self.n_children[i]]

    def parent_of(self, key: NodeKey):
        p = self.parent[self.index[key]]
        return None if p < 0 else self.nodes[p]

    def is_leaf(self, key: NodeKey) -> bool:
        i = self.index.get(key)
        return i is not None and i >= self.leaf_start

    def leaf_slice(self, key: NodeKey) -> slice:
        """Positions (in ``leaves``) of the leaf descendants of a tree node."""
        i = self.index[key]
        return slice(int(self.leaf_lo[i]), int(self.leaf_hi[i]))

    def leaf_descendants(self, key: NodeKey) -> list:
        """Leaf keys covered by ``key``; works for any cube cell, not only tree nodes."""
        if key in self.index:
            return self.leaves[self.leaf_slice(key)]
        if len(key) != self.schema.n_dims:
            raise SchemaError(f"key {key} has {len(key)} entries, expected {self.schema.n_dims}")
        return [leaf for leaf in self.leaves if key_covers(key, leaf)]

    def expand(self, keys: Iterable[NodeKey]) -> set:
        out = set()
        for k in keys:
            out.update(self.leaf_descendants(tuple(k)))
        return out


def build_tree(schema: DimensionSchema, leaf_keys, order=None) -> DimensionTree:
    """Build the tree holding ``leaf_keys`` and all their ancestors.

    An ancestor at depth ``l`` keeps the first ``l`` dimensions of the
    expansion order concrete and sets the rest to AGG.
    """
    leaf_keys = {tuple(k) for k in leaf_keys}
    if not leaf_keys:
        raise EmptyInputError("no leaf keys given")
    L = schema.n_dims
    order = tuple(range(L)) if order is None else tuple(order)
    if sorted(order) != list(range(L)):
        raise SchemaError(f"expansion order {order} is not a permutation of {L} dimensions")
    sort_ids = {}
    for key in leaf_keys:
        if len(key) != L:
            raise SchemaError(f"key {key} has {len(key)} entries, expected {L}")
        if AGG in key:
            raise SchemaError(f"leaf key {format_key(key)} contains {AGG}")
        sort_ids[key] = tuple(schema.value_index(d, key[d]) for d in order)

    levels = []
    for depth in range(L + 1):
        keep = order[:depth]
        seen = {}
        for key, ids in sort_ids.items():
            anc = tuple(key[d] if d in keep else AGG for d in range(L))
            seen[anc] = ids[:depth]
        levels.append(sorted(seen, key=seen.get))

    nodes = [k for level in levels for k in level]
    index = {k: i for i, k in enumerate(nodes)}
    parent = [-1]
    for depth in range(1, L + 1):
        drop = order[depth - 1]
        for key in levels[depth]:
            anc = tuple(AGG if d == drop else v for d, v in enumerate(key))
            parent.append(index[anc])
    return DimensionTree(schema, nodes, parent, order)


class MetricPanel:
    """Values ``v[t, key, metric]`` over timestamps ``0..T-1``.

    Missing cells are NaN. ``time_labels`` keeps the original timestamp text.
    """

    def __init__(self, keys, metrics, values, time_labels=None, present=None):
        self.keys = [tuple(k) for k in keys]
        self.metrics = tuple(metrics)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[1:] != (len(self.keys), len(self.metrics)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.keys)} keys x {len(self.metrics)} metrics"
            )
        self.key_index = {k: i for i, k in enumerate(self.keys)}
        if len(self.key_index) != len(self.keys):
            raise SchemaError("duplicate keys in panel")
        if time_labels is None:
            time_labels = [str(t) for t in range(self.values.shape[0])]
        self.time_labels = list(time_labels)
        # cells that were observed at all; NaN inside a present cell is bad data
        self.present = (np.ones(self.values.shape, dtype=bool) if present is None
                        else np.asarray(present, dtype=bool))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def __repr__(self):
        return f"MetricPanel(T={self.T}, keys={len(self.keys)}, metrics={self.metrics})"

    def get(self, t: int, key: NodeKey, metric: str) -> float:
        return float(self.values[t, self.key_index[tuple(key)], self.metrics.index(metric)])

    def series(self, key: NodeKey, metric: str) -> np.ndarray:
        return self.values[:, self.key_index[tuple(key)], self.metrics.index(metric)]

    def metric_index(self, name: str) -> int:
        try:
            return self.metrics.index(name)
        except ValueError:
            raise SchemaError(f"unknown metric {name!r}") from None

    def reindex(self, keys) -> "MetricPanel":
        """Panel restricted/reordered to ``keys``; absent keys become NaN rows."""
        keys = [tuple(k) for k in keys]
        out = np.full((self.T, len(keys), len(self.metrics)), np.nan)
        present = np.zeros(out.shape, dtype=bool)
        for j, k in enumerate(keys):
            i = self.key_index.get(k)
            if i is not None:
                out[:, j] = self.values[:, i]
                present[:, j] = self.present[:, i]
        return MetricPanel(keys, self.metrics, out, self.time_labels, present)

    def select_metrics(self, names) -> "MetricPanel":
        idx = [self.metric_index(n) for n in names]
        return MetricPanel(self.keys, names, self.values[:, :, idx], self.time_labels,
                           self.present[:, :, idx])

    def copy(self) -> "MetricPanel":
        return MetricPanel(self.keys, self.metrics, self.values.copy(), self.time_labels,
                           self.present.copy())

    def equals(self, other: "MetricPanel") -> bool:
        """Equality on keys, metrics and values that ignores key order."""
        if set(self.keys) != set(other.keys) or self.metrics != other.metrics:
            return False
        if self.time_labels != other.time_labels:
            return False
        b = other.reindex(self.keys).values
        return bool(np.array_equal(self.values, b, equal_nan=True))


def aggregate_levels(tree: DimensionTree, leaf_values: np.ndarray, how, allow_missing=False):
    """Fill every node bottom-up from leaf values.

    ``leaf_values`` has shape ``(..., n_leaves, P)``; ``how`` lists SUM/MEAN
    per column. Returns ``(..., n_nodes, P)`` and the number of missing leaf
    cells that were skipped.
    """
    leaf_values = np.asarray(leaf_values, dtype=float)
    batch = leaf_values.shape[:-2]
    P = leaf_values.shape[-1]
    out = np.empty(batch + (len(tree), P))
    out[..., tree.leaf_start:, :] = leaf_values
    missing = int(np.isnan(leaf_values).sum())
    if missing and not allow_missing:
        raise IncompletePanelError(f"{missing} missing leaf cells")
    is_mean = np.array([h == "MEAN" for h in how])
    for l in range(tree.n_levels - 1, -1, -1):
        a, b = tree.level_bounds[l]
        c0, c1 = tree.level_bounds[l + 1]
        starts = tree.first_child[a:b] - c0
        child = out[..., c0:c1, :]
        present = ~np.isnan(child)
        sums = np.add.reduceat(np.where(present, child, 0.0), starts, axis=-2)
        if is_mean.any():
            counts = np.add.reduceat(present.astype(float), starts, axis=-2)
            with np.errstate(invalid="ignore", divide="ignore"):
                means = sums / counts
            sums = np.where(is_mean, means, sums)
        out[..., a:b, :] = sums
    return out, missing


def compute_derived(metrics: MetricSchema, fundamentals: np.ndarray, context=None):
    """Evaluate derived metrics from fundamentals of shape ``(..., P)``.

    Returns ``(..., P + Q)``. Domain errors are re-raised with the offending
    position translated through ``context`` (a callable index -> text).
    """
    fundamentals = np.asarray(fundamentals, dtype=float)
    bindings = {name: fundamentals[..., i] for i, name in enumerate(metrics.fundamentals)}
    cols = [fundamentals]
    for name, _ in metrics.derived:
        try:
            val = metrics.formula(name).evaluate(bindings)
        except FormulaDomainError as exc:
            where = ""
            idx = getattr(exc, "index", None)
            if idx is not None and context is not None:
                where = f" at {context(idx)}"
            err = FormulaDomainError(f"derived metric {name!r}{where}: {exc}")
            err.index = idx
            raise err from exc
        val = np.broadcast_to(np.asarray(val, dtype=float), fundamentals.shape[:-1])
        bindings[name] = val
        cols.append(val[..., None])
    return np.concatenate(cols, axis=-1)


def aggregate_panel(leaf_panel: MetricPanel, tree: DimensionTree, metrics: MetricSchema,
                    allow_missing: bool = False) -> MetricPanel:
    """Exact aggregation of leaf fundamentals to every node, then derived metrics.

    With ``allow_missing`` missing leaf cells count as 0 for SUM and are
    skipped for MEAN; otherwise they raise :class:`IncompletePanelError`.
    """
    leaves = leaf_panel.reindex(tree.leaves).select_metrics(metrics.fundamentals)
    fundamentals, missing = aggregate_levels(
        tree, leaves.values, [metrics.agg(m) for m in metrics.fundamentals], allow_missing
    )
    if missing:
        logger.warning("aggregate_panel: %d missing leaf cells treated per aggregation rule", missing)
        fundamentals = np.nan_to_num(fundamentals, nan=0.0)

    def where(idx):
        t, node = idx[0], idx[1]
        return f"timestamp {leaf_panel.time_labels[t]}, node {format_key(tree.nodes[node])}"

    values = compute_derived(metrics, fundamentals, where)
    panel = MetricPanel(tree.nodes, metrics.names, values, leaf_panel.time_labels)
    panel.missing_count = missing
    return panel
