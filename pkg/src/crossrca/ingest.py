"""Load leaf-level records from CSV files described by a manifest.

Manifest format: one ``key=value`` per line, ``#`` starts a comment::

    data=leaves.csv
    timestamp_col=timestamp
    dims=Channel,Region
    fundamentals=views,conversions,cost
    derived.rate=conversions / views
    agg.views=SUM
    values.Region=US,Norway,Brazil,Others     # optional declared value order
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .core import AGG, DimensionSchema, DimensionTree, MetricPanel, MetricSchema, format_key
from .forecast import ForecastPanel
from .errors import DuplicateRowError, EmptyInputError, IngestError, SchemaError


@dataclass
class DatasetManifest:
    data: str
    dims: tuple
    fundamentals: tuple
    derived: tuple = ()
    timestamp_col: str = "timestamp"
    aggregation: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)  # declared value labels per dimension
    base_dir: str = "."

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.fundamentals = tuple(self.fundamentals)
        self.derived = tuple(self.derived.items()) if isinstance(self.derived, dict) else tuple(self.derived)
        columns = [self.timestamp_col, *self.dims, *self.fundamentals]
        if len(set(columns)) != len(columns):
            raise SchemaError(f"manifest columns overlap: {columns}")
        derived_names = [n for n, _ in self.derived]
        if set(derived_names) & set(columns):
            raise SchemaError("derived metric names collide with data columns")

    @property
    def data_path(self) -> Path:
        return Path(self.base_dir) / self.data

    def metric_schema(self) -> MetricSchema:
        return MetricSchema(self.fundamentals, self.derived, self.aggregation)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise IngestError(f"{path}: expected key=value", lineno)
                key, value = (s.strip() for s in line.split("=", 1))
                entries[key] = value

        def listed(key, required=True):
            if key not in entries:
                if required:
                    raise IngestError(f"{path}: missing key {key!r}")
                return ()
            return tuple(s.strip() for s in entries[key].split(",") if s.strip())

        if "data" not in entries:
            raise IngestError(f"{path}: missing key 'data'")
        derived = tuple((k[len("derived."):], v) for k, v in entries.items() if k.startswith("derived."))
        agg = {k[len("agg."):]: v.upper() for k, v in entries.items() if k.startswith("agg.")}
        values = {k[len("values."):]: tuple(s.strip() for s in v.split(","))
                  for k, v in entries.items() if k.startswith("values.")}
        return cls(
            data=entries["data"],
            dims=listed("dims"),
            fundamentals=listed("fundamentals"),
            derived=derived,
            timestamp_col=entries.get("timestamp_col", "timestamp"),
            aggregation=agg,
            values=values,
            base_dir=str(path.parent),
        )

    def write(self, path) -> None:
        lines = [
            f"data={self.data}",
            f"timestamp_col={self.timestamp_col}",
            f"dims={','.join(self.dims)}",
            f"fundamentals={','.join(self.fundamentals)}",
        ]
        lines += [f"derived.{n}={f}" for n, f in self.derived]
        lines += [f"agg.{m}={a}" for m, a in sorted(self.aggregation.items())]
        lines += [f"values.{d}={','.join(v)}" for d, v in self.values.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _timestamp_order(labels):
    try:
        return sorted(labels, key=int)
    except ValueError:
        pass
    try:
        return sorted(labels, key=datetime.fromisoformat)
    except ValueError:
        return sorted(labels)


def load_csv(manifest):
    """Read the manifest's data file.

    Returns ``(DimensionSchema, MetricSchema, leaf MetricPanel)``; timestamps
    are sorted and re-indexed from 0. Dimension values not declared in the
    manifest are inferred and sorted.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    metrics = manifest.metric_schema()
    path = manifest.data_path
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path}: empty file") from None
        expected = [manifest.timestamp_col, *manifest.dims, *manifest.fundamentals]
        missing = [c for c in expected if c not in header]
        if missing:
            raise IngestError(f"{path}: header lacks columns {missing}", 1)
        cols = [header.index(c) for c in expected]
        L = len(manifest.dims)
        rows = {}
        first_line = {}
        malformed = []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                malformed.append(lineno)
                continue
            cells = [row[c].strip() for c in cols]
            ts, dims, raw = cells[0], tuple(cells[1:1 + L]), cells[1 + L:]
            if AGG in dims:
                raise SchemaError(f"{path}: reserved value {AGG!r} in data (line {lineno})")
            try:
                vals = [float(x) for x in raw]
            except ValueError:
                raise IngestError(f"{path}: non-numeric metric cell", lineno) from None
            if (ts, dims) in rows:
                raise DuplicateRowError(
                    f"{path}: duplicate row for timestamp {ts}, key {format_key(dims)} "
                    f"(first seen on line {first_line[(ts, dims)]})", lineno)
            rows[(ts, dims)] = vals
            first_line[(ts, dims)] = lineno
    if malformed:
        raise IngestError(f"{path}: {len(malformed)} malformed rows", malformed[0])
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    values = []
    for d, name in enumerate(manifest.dims):
        seen = sorted({k[d] for _, k in rows})
        declared = manifest.values.get(name)
        if declared:
            unknown = [v for v in seen if v not in declared]
            if unknown:
                raise SchemaError(f"values {unknown} of {name!r} are not declared")
            values.append(tuple(declared))
        else:
            values.append(tuple(seen))
    schema = DimensionSchema(manifest.dims, values)

    times = _timestamp_order({t for t, _ in rows})
    t_index = {t: i for i, t in enumerate(times)}
    keys = sorted({k for _, k in rows},
                  key=lambda k: tuple(schema.value_index(d, v) for d, v in enumerate(k)))
    k_index = {k: i for i, k in enumerate(keys)}
    arr = np.full((len(times), len(keys), metrics.P), np.nan)
    present = np.zeros(arr.shape, dtype=bool)
    for (ts, key), vals in rows.items():
        arr[t_index[ts], k_index[key]] = vals
        present[t_index[ts], k_index[key]] = True
    panel = MetricPanel(keys, metrics.fundamentals, arr, times, present)
    return schema, metrics, panel


def write_csv(panel: MetricPanel, path, dims, timestamp_col="timestamp", suffix=""):
    """Write a panel in the ingest layout, one row per observed (timestamp, key)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([timestamp_col, *dims, *(m + suffix for m in panel.metrics)])
        for t, label in enumerate(panel.time_labels):
            for i, key in enumerate(panel.keys):
                if not panel.present[t, i].any():
                    continue
                w.writerow([label, *key, *(repr(float(v)) for v in panel.values[t, i])])


@dataclass
class ValidationReport:
    missing: list  # (key, metric, timestamp index)
    nonfinite: list  # (key, metric, timestamp index)
    coverage: float

    @property
    def ok(self) -> bool:
        return not self.missing and not self.nonfinite


def validate_panel(panel: MetricPanel, tree: DimensionTree, metrics: MetricSchema) -> ValidationReport:
    """Report missing and non-finite cells.

    A leaf-only panel is checked for every leaf and fundamental; a panel that
    holds non-leaf keys is checked for every node and metric.
    """
    full = any(AGG in k for k in panel.keys)
    keys = tree.nodes if full else tree.leaves
    names = metrics.names if full else metrics.fundamentals
    sub = panel.reindex(keys)
    T = panel.T
    present = np.zeros((T, len(keys), len(names)), dtype=bool)
    values = np.full(present.shape, np.nan)
    for j, name in enumerate(names):
        if name in sub.metrics:
            c = sub.metrics.index(name)
            present[:, :, j] = sub.present[:, :, c]
            values[:, :, j] = sub.values[:, :, c]
    total = present.size
    # report in (key, metric, timestamp) order
    order = (1, 2, 0)
    missing = [(keys[i], names[j], int(t))
               for i, j, t in np.argwhere((~present).transpose(order))]
    bad = present & ~np.isfinite(values)
    nonfinite = [(keys[i], names[j], int(t)) for i, j, t in np.argwhere(bad.transpose(order))]
    coverage = 1.0 - len(missing) / total if total else 0.0
    return ValidationReport(missing, nonfinite, coverage)


def write_dataset(directory, name, panel, schema, metrics, timestamp_col="timestamp"):
    """Write ``<name>.csv`` and ``<name>.manifest`` into ``directory``."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    csv_path = directory / f"{name}.csv"
    write_csv(panel, csv_path, schema.dimensions, timestamp_col)
    manifest = DatasetManifest(
        data=csv_path.name,
        dims=schema.dimensions,
        fundamentals=metrics.fundamentals,
        derived=metrics.derived,
        timestamp_col=timestamp_col,
        aggregation=dict(metrics.aggregation),
        values=dict(zip(schema.dimensions, schema.values)),
        base_dir=str(directory),
    )
    manifest_path = directory / f"{name}.manifest"
    manifest.write(manifest_path)
    return manifest_path


EXPECTED_SUFFIX = "_expected"


def write_expected_csv(fp: ForecastPanel, path, dims, timestamp_label="0", timestamp_col="timestamp"):
    """Expected values in the ingest layout with suffixed metric columns; AGG rows allowed."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([timestamp_col, *dims, *(m + EXPECTED_SUFFIX for m in fp.metrics)])
        for i, key in enumerate(fp.keys):
            w.writerow([timestamp_label, *key, *(repr(float(v)) for v in fp.expected[i])])


def read_expected_csv(path, dims, t=0, timestamp_label=None, timestamp_col="timestamp"):
    """Read expected values for one timestamp (the only one, or ``timestamp_label``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path}: empty file") from None
        missing = [c for c in (timestamp_col, *dims) if c not in header]
        if missing:
            raise IngestError(f"{path}: header lacks columns {missing}", 1)
        metric_cols = [(i, h[: -len(EXPECTED_SUFFIX)]) for i, h in enumerate(header)
                       if h.endswith(EXPECTED_SUFFIX)]
        if not metric_cols:
            raise IngestError(f"{path}: no *{EXPECTED_SUFFIX} columns", 1)
        ts_i = header.index(timestamp_col)
        dim_i = [header.index(d) for d in dims]
        keys, rows, labels = [], [], set()
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}: malformed row", lineno)
            if timestamp_label is not None and row[ts_i].strip() != str(timestamp_label):
                continue
            labels.add(row[ts_i].strip())
            key = tuple(row[i].strip() for i in dim_i)
            if key in keys:
                raise DuplicateRowError(f"{path}: duplicate expected row for {format_key(key)}", lineno)
            try:
                rows.append([float(row[i]) for i, _ in metric_cols])
            except ValueError:
                raise IngestError(f"{path}: non-numeric cell", lineno) from None
            keys.append(key)
    if not rows:
        raise EmptyInputError(f"{path}: no expected rows")
    if len(labels) > 1:
        raise IngestError(f"{path}: several timestamps; choose one")
    expected = np.array(rows)
    return ForecastPanel(keys, tuple(m for _, m in metric_cols), t, expected, np.zeros_like(expected))
