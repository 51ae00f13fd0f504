"""A small channel x region advertising snapshot used in tests and demos.

Eight leaves (two channels, four regions) with three fundamentals and two
derived metrics. Real values and expected values are given for every node
at a single timestamp; the conversion rate at the root dropped from an
expected 0.52 to 0.38.
"""
from __future__ import annotations

import numpy as np

from .core import AGG, DimensionSchema, MetricPanel, MetricSchema
from .forecast import ForecastPanel

CHANNELS = ("Search", "Social Media")
REGIONS = ("US", "Norway", "Brazil", "Others")

# key -> ((views, conversions, cost) real, same expected, (rate, cpc) expected)
_ROWS = {
    ("Search", "US"): ((51949, 14651, 219765), (57328, 25741, 249067), (0.45, 17)),
    ("Search", "Norway"): ((3152, 783, 13311), (2627, 1228, 12528), (0.47, 16)),
    ("Search", "Brazil"): ((3125, 341, 6820), (2981, 980, 7502), (0.33, 22)),
    ("Search", "Others"): ((64351, 19321, 618272), (59721, 25931, 579630), (0.43, 30)),
    ("Social Media", "US"): ((43949, 21525, 344400), (39312, 24057, 322875), (0.59, 15)),
    ("Social Media", "Norway"): ((20453, 8731, 139696), (18327, 9068, 148427), (0.50, 17)),
    ("Social Media", "Brazil"): ((1957, 1023, 17391), (1512, 1001, 16368), (0.66, 16)),
    ("Social Media", "Others"): ((70384, 32253, 903084), (60413, 35912, 838578), (0.59, 26)),
    (AGG, "US"): ((95898, 36176, 564165), (96640, 49798, 614992), (0.50, 17)),
    (AGG, "Norway"): ((23605, 9514, 153007), (20954, 10296, 161738), (0.49, 17)),
    (AGG, "Brazil"): ((5082, 1364, 24211), (4493, 1981, 25916), (0.44, 19)),
    (AGG, "Others"): ((134735, 51574, 1521356), (120134, 61843, 1598794), (0.50, 31)),
    ("Search", AGG): ((122577, 35096, 858168), (122657, 53880, 877400), (0.43, 25)),
    ("Social Media", AGG): ((136743, 63532, 1404571), (119564, 70038, 1397704), (0.59, 22)),
    (AGG, AGG): ((259320, 98628, 2262739), (242221, 123918, 2268444), (0.52, 23)),
}


def snapshot_schemas():
    dims = DimensionSchema(("Channel", "Region"), (CHANNELS, REGIONS))
    metrics = MetricSchema(
        ("views", "conversions", "cost"),
        (("conversion_rate", "conversions / views"), ("cost_per_conversion", "cost / conversions")),
    )
    return dims, metrics


def snapshot_leaf_panel() -> MetricPanel:
    """Real leaf fundamentals at one timestamp."""
    _, metrics = snapshot_schemas()
    keys = [k for k in _ROWS if AGG not in k]
    values = np.array([[_ROWS[k][0] for k in keys]], dtype=float)
    return MetricPanel(keys, metrics.fundamentals, values)


def snapshot_expected(keys=None) -> ForecastPanel:
    """Expected values for every listed node (fundamentals and deriveds), t = 0."""
    _, metrics = snapshot_schemas()
    keys = list(_ROWS) if keys is None else [tuple(k) for k in keys]
    expected = np.array([list(_ROWS[k][1]) + list(_ROWS[k][2]) for k in keys], dtype=float)
    return ForecastPanel(keys, metrics.names, 0, expected, np.zeros_like(expected))


def snapshot_expected_fundamentals(key):
    return np.array(_ROWS[tuple(key)][1], dtype=float)


def snapshot_real_fundamentals(key):
    return np.array(_ROWS[tuple(key)][0], dtype=float)
