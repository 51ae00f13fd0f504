import numpy as np
import pytest

from crossrca.core import AGG, aggregate_panel, build_tree
from crossrca.datasets import (snapshot_expected, snapshot_leaf_panel, snapshot_schemas)
from crossrca.forecast import ForecastPanel


@pytest.fixture
def snapshot():
    """Schemas, tree, leaf panel, full panel and expected values of the 8-leaf snapshot."""
    dims, metrics = snapshot_schemas()
    leaf = snapshot_leaf_panel()
    tree = build_tree(dims, leaf.keys)
    full = aggregate_panel(leaf, tree, metrics)
    return dims, metrics, tree, leaf, full, snapshot_expected()


def leaf_forecast(tree, metrics, expected_leaf, t=0):
    """ForecastPanel whose non-leaf rows are exact aggregates of ``expected_leaf``."""
    from crossrca.oracle import ExactModel

    values = ExactModel(metrics).propagate(tree, expected_leaf)
    return ForecastPanel(tree.nodes, metrics.names, t, values, np.zeros_like(values))



ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


__all__ = ["AGG", "ACCEPTANCE_LINES", "leaf_forecast"]
