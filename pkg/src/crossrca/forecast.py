"""Autoregressive expected values and 3-sigma anomaly flags."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MetricPanel, format_key
from .errors import InsufficientHistoryError

SIGMA_FLOOR = 1e-8
_CHUNK = 2048  # series per batched fit


@dataclass(frozen=True)
class ArModel:
    order: int
    coef: np.ndarray  # lag-1 first
    intercept: float
    resid_std: float
    n_train: int

    def predict_next(self, history) -> float:
        history = np.asarray(history, dtype=float)
        if len(history) < self.order:
            raise InsufficientHistoryError(
                f"need {self.order} past values, got {len(history)}")
        lags = history[::-1][: self.order]
        return float(self.intercept + lags @ self.coef)


def _fit_batch(Y, order):
    """Least-squares AR(order) with intercept for each row of ``Y``.

    Returns (coef (S, order), intercept (S,), resid_std (S,), next-step
    prediction (S,)). Rank-deficient designs get the minimum-norm solution.
    """
    S, n = Y.shape
    mu = Y.mean(axis=1, keepdims=True)
    Z = Y - mu
    rows = n - order
    X = np.empty((S, rows, order + 1))
    for lag in range(1, order + 1):
        X[:, :, lag - 1] = Z[:, order - lag: n - lag]
    X[:, :, order] = 1.0
    y = Z[:, order:]
    beta = np.einsum("sij,sj->si", np.linalg.pinv(X), y)
    resid = y - np.einsum("sij,sj->si", X, beta)
    resid_std = np.sqrt(np.mean(resid ** 2, axis=1))
    nxt = np.concatenate([Z[:, ::-1][:, :order], np.ones((S, 1))], axis=1)
    pred = np.einsum("si,si->s", nxt, beta) + mu[:, 0]
    intercept = beta[:, order] + mu[:, 0] * (1.0 - beta[:, :order].sum(axis=1))
    return beta[:, :order], intercept, resid_std, pred


def fit_ar(series, order: int) -> ArModel:
    """Fit value_t on the previous ``order`` values plus an intercept."""
    series = np.asarray(series, dtype=float)
    if order < 1:
        raise ValueError("order must be >= 1")
    if len(series) < order + 2:
        raise InsufficientHistoryError(
            f"series of length {len(series)} is too short for order {order}")
    coef, intercept, resid_std, _ = _fit_batch(series[None, :], order)
    return ArModel(order, coef[0], float(intercept[0]), float(resid_std[0]), len(series))


def default_order(n_history: int) -> int:
    return min(7, n_history // 3)


@dataclass
class ForecastPanel:
    """Expected values ``f`` for every (key, metric) at one timestamp."""

    keys: list
    metrics: tuple
    t: int
    expected: np.ndarray  # (n_keys, n_metrics)
    sigma: np.ndarray  # residual std of each fit; 0 for fallbacks
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.key_index = {tuple(k): i for i, k in enumerate(self.keys)}

    def get(self, key, metric) -> float:
        return float(self.expected[self.key_index[tuple(key)], self.metrics.index(metric)])


def forecast_series(history, order=None):
    """One-step-ahead forecast after ``history``; returns (expected, sigma, note)."""
    h = np.asarray(history, dtype=float)
    h = h[np.isfinite(h)]
    order = default_order(len(h)) if order is None else order
    if len(h) == 0:
        return np.nan, 0.0, "no history"
    if order < 1 or len(h) < order + 2:
        return float(h.mean()), float(h.std()), "mean fallback"
    _, _, sd, pred = _fit_batch(h[None, :], order)
    return float(pred[0]), float(sd[0]), None


def forecast_panel(panel: MetricPanel, t: int, order=None, keys=None) -> ForecastPanel:
    """AR forecast of every cell at ``t`` using only values before ``t``.

    Cells whose history is shorter than ``order + 2`` (or has gaps) fall back
    to the history mean, or to the value at ``t`` itself when nothing earlier
    exists; each fallback is listed in ``warnings``.
    """
    if not 0 <= t < panel.T:
        raise IndexError(f"timestamp {t} outside 0..{panel.T - 1}")
    order = default_order(t) if order is None else order
    if keys is None:
        idx = np.arange(len(panel.keys))
        keys = list(panel.keys)
    else:
        keys = [tuple(k) for k in keys]
        idx = np.array([panel.key_index[k] for k in keys], dtype=np.int64)
    hist = panel.values[:t, idx, :]  # (t, K, M)
    K, M = len(idx), len(panel.metrics)
    expected = np.empty((K, M))
    sigma = np.zeros((K, M))
    flat = hist.reshape(t, K * M).T  # (K*M, t)
    ok = np.isfinite(flat).all(axis=1) if t else np.zeros(K * M, dtype=bool)
    warnings = []
    if order >= 1 and t >= order + 2:
        good = np.flatnonzero(ok)
        for s in range(0, len(good), _CHUNK):
            sel = good[s:s + _CHUNK]
            _, _, sd, pred = _fit_batch(flat[sel], order)
            expected.flat[sel] = pred
            sigma.flat[sel] = sd
        todo = np.flatnonzero(~ok)
    else:
        todo = np.arange(K * M)
    for c in todo:
        k, m = divmod(int(c), M)
        h = flat[c][np.isfinite(flat[c])] if t else flat[c]
        if len(h) == 0:
            expected[k, m] = panel.values[t, idx[k], m]
            reason = "last observed value"
        else:
            expected[k, m] = h.mean()
            sigma[k, m] = h.std()
            reason = "mean fallback"
        warnings.append((keys[k], panel.metrics[m], reason))
    return ForecastPanel(keys, panel.metrics, t, expected, sigma, warnings)


def detect_3sigma(v: float, f: float, sigma: float, floor: float = SIGMA_FLOOR) -> bool:
    """True iff |v - f| exceeds three (floored) standard deviations."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return bool(abs(v - f) > 3.0 * max(sigma, floor))


def flag_series(series, order=None, min_history=None, floor=SIGMA_FLOOR):
    """3-sigma flags for every timestamp of one series (False without history)."""
    series = np.asarray(series, dtype=float)
    flags = np.zeros(len(series), dtype=bool)
    expected = np.full(len(series), np.nan)
    start = 3 if min_history is None else min_history
    for t in range(start, len(series)):
        f, sd, _ = forecast_series(series[:t], order)
        expected[t] = f
        flags[t] = detect_3sigma(series[t], f, sd, floor)
    return flags, expected


def describe_warnings(fp: ForecastPanel, limit=5) -> str:
    head = ", ".join(f"{format_key(k)}/{m}: {r}" for k, m, r in fp.warnings[:limit])
    more = len(fp.warnings) - limit
    return head + (f" (+{more} more)" if more > 0 else "")
