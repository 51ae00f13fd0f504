"""Synthetic benchmark datasets with injected anomalies.

Each leaf carries two fundamentals ``b`` and ``c``. Two derived metrics sit on
top: ``a = g(c)`` and the monitored ``d = f(a, b)``. Fundamentals follow a
per-leaf base level with small multiplicative noise, are summed up the tree,
and the deriveds are recomputed at every node.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (DimensionSchema, DimensionTree, MetricPanel, MetricSchema,
                   aggregate_panel, build_tree, format_key, parse_key)
from .errors import FormulaDomainError, SchemaError, SynthesisError
from .forecast import flag_series
from .ingest import write_dataset

F_CHOICES = (
    "a / b",
    "a * b",
    "log(a) / log(b)",
    "a * exp(b)",
    "log(a + 1) / log(b + 1)",
)
G_CHOICES = {
    "c": "c",
    "sin": "sin(c)",
    "exp": "exp(c)",
    "square": "c ^ 2",
    "sqrt": "sqrt(c)",
}
LOG_FLOOR = 5.0  # lowest base level of b and c when f takes logs
EXP_BUDGET = 5.0  # root-level cap for a metric fed to exp


def _g_compatible(g: str, f_index: int) -> bool:
    # sin can reach zero or go negative, which the log-based f cannot take
    return not (g == "sin" and f_index in (2, 4))


@dataclass
class SynthConfig:
    values_per_dim: tuple = (2, 4)
    T: int = 200
    f_index: int = 0
    g: str = "c"  # a key of G_CHOICES, or "random"
    g_pool: tuple = tuple(G_CHOICES)
    n_anomalies: int = 10  # anomalous timestamps
    causes: tuple = (1, 2)  # injected leaves per anomalous timestamp, inclusive
    magnitude: tuple = (0.3, 0.7)
    value_range: tuple = (1.0, 100.0)
    noise: float = 0.02
    first_anomaly: int = 40
    seed: int = 0

    def __post_init__(self):
        self.values_per_dim = tuple(int(v) for v in self.values_per_dim)
        if self.T < 20:
            raise ValueError("T must be at least 20")
        if not self.values_per_dim or min(self.values_per_dim) < 1:
            raise ValueError("every dimension needs at least one value")
        if not 0 <= self.f_index < len(F_CHOICES):
            raise ValueError(f"f_index must lie in 0..{len(F_CHOICES) - 1}")
        if self.g != "random" and self.g not in G_CHOICES:
            raise ValueError(f"g must be 'random' or one of {sorted(G_CHOICES)}")
        lo, hi = self.magnitude
        if not 0 <= lo <= hi:
            raise ValueError("magnitude range must satisfy 0 <= lo <= hi")
        if self.n_anomalies and hi <= 0:
            raise ValueError("anomaly magnitude must be positive")
        if self.n_anomalies > max(0, self.T - self.first_anomaly):
            raise ValueError("not enough timestamps after first_anomaly for the anomalies")
        if self.causes[0] < 1 or self.causes[1] < self.causes[0]:
            raise ValueError("causes must be a range (lo, hi) with 1 <= lo <= hi")


@dataclass(frozen=True)
class GroundTruthLabel:
    t: int
    keys: tuple  # injected leaf keys
    deltas: tuple  # (key, metric, factor) per injection

    def __post_init__(self):
        if not self.keys:
            raise ValueError("a label needs at least one injected leaf")


@dataclass
class SynthDataset:
    config: SynthConfig
    dims: DimensionSchema
    metrics: MetricSchema
    tree: DimensionTree
    leaf_panel: MetricPanel
    panel: MetricPanel  # every node, fundamentals and deriveds
    labels: list
    clean_leaf_panel: MetricPanel
    root_flags: np.ndarray  # 3-sigma flags on the monitored root metric
    g: str
    monitored: str = "d"

    @property
    def anomalous_times(self):
        return [lab.t for lab in self.labels]

    def case_panel(self, i: int) -> MetricPanel:
        """Full panel holding only the ``i``-th anomaly, so its history is clean."""
        leaf = inject_anomalies(self.clean_leaf_panel, [self.labels[i]])
        return aggregate_panel(leaf, self.tree, self.metrics)


def synth_schema(config: SynthConfig, g: str):
    L = len(config.values_per_dim)
    dims = DimensionSchema(tuple(f"dim{i + 1}" for i in range(L)),
                           tuple(tuple(f"v{j + 1}" for j in range(n)) for n in config.values_per_dim))
    metrics = MetricSchema(("b", "c"), (("a", G_CHOICES[g]), ("d", F_CHOICES[config.f_index])))
    return dims, metrics


def _choose_g(config, rng):
    if config.g != "random":
        if not _g_compatible(config.g, config.f_index):
            raise SynthesisError(
                f"g={config.g} gives values outside the domain of f={F_CHOICES[config.f_index]}")
        return config.g
    pool = [g for g in config.g_pool if _g_compatible(g, config.f_index)]
    if not pool:
        raise SynthesisError(f"no g in {config.g_pool} fits f={F_CHOICES[config.f_index]}")
    return pool[int(rng.integers(len(pool)))]


def _base_ranges(config, g, n_leaves):
    lo, hi = map(float, config.value_range)
    if lo <= 0:
        raise SynthesisError(f"value range {config.value_range} must be positive")
    ranges = {"b": [lo, hi], "c": [lo, hi]}
    if config.f_index in (2, 4):
        for m in ranges:
            ranges[m] = [max(lo, LOG_FLOOR), max(hi, LOG_FLOOR)]
    exp_fed = (["c"] if g == "exp" else []) + (["b"] if config.f_index == 3 else [])
    for m in exp_fed:
        s = min(1.0, EXP_BUDGET / (n_leaves * ranges[m][1]))
        ranges[m] = [ranges[m][0] * s, ranges[m][1] * s]
    return ranges


def inject_anomalies(leaf_panel: MetricPanel, labels) -> MetricPanel:
    """Multiply the labelled leaf fundamentals by their factors."""
    out = leaf_panel.copy()
    for lab in labels:
        if not 0 <= lab.t < out.T:
            raise SchemaError(f"label timestamp {lab.t} outside 0..{out.T - 1}")
        for key, metric, factor in lab.deltas:
            if tuple(key) not in out.key_index:
                raise SchemaError(f"label key {format_key(key)} is not a leaf of the panel")
            out.values[lab.t, out.key_index[tuple(key)], out.metric_index(metric)] *= factor
    return out


def isolate_case(leaf_panel: MetricPanel, labels, i: int) -> MetricPanel:
    """Undo every labelled injection, then re-apply only the ``i``-th one."""
    clean = leaf_panel.copy()
    for lab in labels:
        for key, metric, factor in lab.deltas:
            clean.values[lab.t, clean.key_index[tuple(key)], clean.metric_index(metric)] /= factor
    return inject_anomalies(clean, [labels[i]])


def generate_dataset(config: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(config.seed)
    g = _choose_g(config, rng)
    dims, metrics = synth_schema(config, g)
    leaves = [tuple(dims.values[d][i] for d, i in enumerate(ix))
              for ix in np.ndindex(*config.values_per_dim)]
    tree = build_tree(dims, leaves)
    n = tree.n_leaves
    ranges = _base_ranges(config, g, n)

    values = np.empty((config.T, n, 2))
    for j, m in enumerate(("b", "c")):
        base = rng.uniform(*ranges[m], size=n)
        jitter = rng.uniform(-1.0, 1.0, size=(config.T, n))
        values[:, :, j] = base * (1.0 + config.noise * jitter)
    clean = MetricPanel(tree.leaves, metrics.fundamentals, values)

    labels = []
    if config.n_anomalies:
        pool = np.arange(config.first_anomaly, config.T)
        times = np.sort(rng.choice(pool, size=config.n_anomalies, replace=False))
        lo, hi = config.magnitude
        for t in times:
            k = int(rng.integers(config.causes[0], min(config.causes[1], n) + 1))
            picked = sorted(rng.choice(n, size=k, replace=False))
            metric = ("b", "c")[int(rng.integers(2))]
            sign = 1.0 if rng.random() < 0.5 else -1.0
            deltas = []
            for i in picked:
                deltas.append((tree.leaves[i], metric, 1.0 + sign * rng.uniform(lo, hi)))
            labels.append(GroundTruthLabel(int(t), tuple(tree.leaves[i] for i in picked),
                                           tuple(deltas)))
    leaf_panel = inject_anomalies(clean, labels)
    try:
        panel = aggregate_panel(leaf_panel, tree, metrics)
    except FormulaDomainError as exc:
        raise SynthesisError(
            f"f={F_CHOICES[config.f_index]}, g={G_CHOICES[g]} with ranges {ranges}: {exc}") from exc
    flags, _ = flag_series(panel.series(tree.root, "d"), min_history=config.first_anomaly // 2)
    return SynthDataset(config, dims, metrics, tree, leaf_panel, panel, labels, clean, flags, g)


def write_labels(labels, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "keys", "deltas"])
        for lab in labels:
            w.writerow([lab.t, ";".join(format_key(k) for k in lab.keys),
                        ";".join(f"{format_key(k)}:{m}:{f!r}" for k, m, f in lab.deltas)])


def read_labels(path):
    labels = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            deltas = []
            for item in filter(None, row.get("deltas", "").split(";")):
                key, metric, factor = item.rsplit(":", 2)
                deltas.append((parse_key(key), metric, float(factor)))
            keys = tuple(parse_key(k) for k in row["keys"].split(";") if k)
            labels.append(GroundTruthLabel(int(row["timestamp"]), keys, tuple(deltas)))
    return labels


def write_synth(dataset: SynthDataset, directory, name="synth"):
    """Write the leaf CSV, manifest and labels; returns the manifest path."""
    directory = Path(directory)
    manifest = write_dataset(directory, name, dataset.leaf_panel, dataset.dims, dataset.metrics)
    write_labels(dataset.labels, directory / f"{name}.labels.csv")
    return manifest
