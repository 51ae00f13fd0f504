"""Scoring localization results.

Ground truth comes from counterfactual recovery under the exact relationship;
predictions and truth are compared as leaf sets. Adtributor is included as a
single-dimension baseline.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import AGG, DimensionTree, MetricSchema, compute_derived, format_key
from .errors import FormulaDomainError, NoAnomalyError, NoCandidateError
from .forecast import ForecastPanel, forecast_panel
from .localize import EPS_DELTA, LocalizeConfig, _forecast_rows, _rows, localize, relative_deviation
from .oracle import ExactModel

logger = logging.getLogger(__name__)

METHOD = "crossrca"
BASELINE = "adtributor"
CSV_COLUMNS = ("case_id", "method", "TP", "FP", "FN", "P", "R", "F1", "runtime_ms")


@dataclass
class EvalReport:
    TP: int
    FP: int
    FN: int
    rows: list = field(default_factory=list)  # per-case detail rows

    @property
    def precision(self) -> float:
        if self.TP + self.FP == 0:
            return 1.0 if self.FN == 0 else 0.0
        return self.TP / (self.TP + self.FP)

    @property
    def recall(self) -> float:
        if self.TP + self.FN == 0:
            return 1.0 if self.FP == 0 else 0.0
        return self.TP / (self.TP + self.FN)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf1(predicted, truth, tree: DimensionTree = None) -> EvalReport:
    """Counts on leaf sets; with a tree, aggregated nodes expand to their leaves.

    Two empty sets agree perfectly (P = R = F1 = 1).
    """
    predicted = {tuple(k) for k in predicted}
    truth = {tuple(k) for k in truth}
    if tree is not None:
        predicted, truth = tree.expand(predicted), tree.expand(truth)
    tp = len(predicted & truth)
    return EvalReport(tp, len(predicted - truth), len(truth - predicted))


def micro_average(reports) -> EvalReport:
    reports = list(reports)
    return EvalReport(sum(r.TP for r in reports), sum(r.FP for r in reports),
                      sum(r.FN for r in reports))


# -- ground truth ------------------------------------------------------

def individual_recovery(model: ExactModel, tree, real_leaf, expected_leaf, m, v_root, f_root):
    """Recovery ratio of replacing each leaf alone by its expected values."""
    w = model.root_weights(tree)
    base = model.predict_root(tree, real_leaf)
    root = base[: model.P] + w * (expected_leaf - real_leaf)
    with np.errstate(all="ignore"):
        try:
            cf = compute_derived(model.metrics, root)[:, m]
        except FormulaDomainError:
            cf = np.array([_safe_derived(model.metrics, r)[m] for r in root])
    delta = abs(v_root - f_root)
    rec = 1.0 - np.abs(cf - f_root) / delta
    return np.where(np.isfinite(rec), rec, -np.inf)


def _safe_derived(metrics, fund):
    try:
        return compute_derived(metrics, fund)
    except FormulaDomainError:
        return np.full(metrics.P + metrics.Q, np.nan)


def ground_truth(panel, forecasts: ForecastPanel, tree: DimensionTree, metrics: MetricSchema,
                 monitored: str, threshold: float = 0.8):
    """Leaves picked greedily by individual recovery until the joint recovery reaches ``threshold``.

    Ties go to the larger relative leaf deviation, then the smaller key.
    When the threshold is never reached, the prefix with the best joint
    recovery is returned. No root deviation gives an empty set.
    """
    t = forecasts.t
    m = metrics.index(monitored)
    P = metrics.P
    real = _rows(panel.values[t], panel.key_index, list(panel.metrics), tree.leaves, metrics.fundamentals)
    expected = _forecast_rows(forecasts, tree.leaves, metrics.fundamentals)
    model = ExactModel(metrics)
    root_real = _rows(panel.values[t], panel.key_index, list(panel.metrics), [tree.root], [monitored])[0, 0]
    v_root = float(model.predict_root(tree, real)[m]) if not np.isfinite(root_real) else float(root_real)
    f_root = float(_forecast_rows(forecasts, [tree.root], [monitored])[0, 0])
    if not abs(v_root - f_root) > EPS_DELTA:
        return set()
    rec = individual_recovery(model, tree, real, expected, m, v_root, f_root)
    dev = relative_deviation(real, expected)
    keys = [format_key(k) for k in tree.leaves]
    order = sorted(range(tree.n_leaves), key=lambda i: (-rec[i], -dev[i], keys[i]))

    w = model.root_weights(tree)
    root = model.predict_root(tree, real)[:P].copy()
    best, best_k = -np.inf, 0
    for k, i in enumerate(order, 1):
        root += w[i] * (expected[i] - real[i])
        cum = 1.0 - abs(_safe_derived(metrics, root)[m] - f_root) / abs(v_root - f_root)
        if np.isfinite(cum) and cum > best:
            best, best_k = cum, k
        if np.isfinite(cum) and cum >= threshold:
            return {tree.leaves[j] for j in order[:k]}
    return {tree.leaves[j] for j in order[:best_k]}


# -- Adtributor --------------------------------------------------------

@dataclass
class AdtributorConfig:
    t_eep: float = 0.3
    t_ep: float = 0.8

    def __post_init__(self):
        for name in ("t_eep", "t_ep"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")


def js_divergence(p, q, smoothing: float = 1e-12) -> float:
    """Jensen-Shannon divergence (natural log) between two distributions."""
    return float(_surprise(np.asarray(p, dtype=float), np.asarray(q, dtype=float), smoothing).sum())


def _smooth(p, smoothing):
    # normalize first: tiny cells can underflow to zero on division
    p = p / p.sum()
    p = np.where(p == 0, smoothing, p)
    return p / p.sum()


def _surprise(p, q, smoothing=1e-12):
    """Per-element Jensen-Shannon terms; their sum is the divergence."""
    p, q = _smooth(p, smoothing), _smooth(q, smoothing)
    mix = 0.5 * (p + q)
    return 0.5 * p * np.log(p / mix) + 0.5 * q * np.log(q / mix)


def adtributor(real_leaf, expected_leaf, tree: DimensionTree, metrics: MetricSchema,
               monitored: str, config: AdtributorConfig = None):
    """Best single-dimension explanation as a list of one-concrete-value nodes.

    Per dimension, values are ranked by surprise (Jensen-Shannon terms of the
    value shares, summed over the fundamentals behind ``monitored``). A value
    joins when its explanatory power (share of the root change undone by
    restoring that value's forecast) exceeds ``t_eep``; the dimension
    qualifies once the joined power reaches ``t_ep``. The qualifying set with
    the largest surprise wins.
    """
    config = AdtributorConfig() if config is None else config
    real_leaf = np.asarray(real_leaf, dtype=float)
    expected_leaf = np.asarray(expected_leaf, dtype=float)
    model = ExactModel(metrics)
    m = metrics.index(monitored)
    deps = [metrics.fundamentals.index(f) for f in sorted(metrics.dependencies(monitored))]
    w = model.root_weights(tree)
    root_r = (real_leaf * w).sum(axis=0)
    root_f = (expected_leaf * w).sum(axis=0)
    v = _safe_derived(metrics, root_r)[m]
    f = _safe_derived(metrics, root_f)[m]
    if not (np.isfinite(v) and np.isfinite(f)) or abs(v - f) <= EPS_DELTA:
        return []
    schema = tree.schema
    best, best_s = [], -np.inf
    for d in range(schema.n_dims):
        labels = [lab for lab in schema.values[d] if any(k[d] == lab for k in tree.leaves)]
        member = np.array([[k[d] == lab for k in tree.leaves] for lab in labels])  # (V, leaves)
        r_val = member.astype(float) @ real_leaf  # (V, P)
        f_val = member.astype(float) @ expected_leaf
        surprise = np.zeros(len(labels))
        for p in deps:
            tr, tf = r_val[:, p].sum(), f_val[:, p].sum()
            if tr <= 0 or tf <= 0:
                continue
            surprise += _surprise(f_val[:, p] / tf, r_val[:, p] / tr)
        if not surprise.any():
            logger.warning("adtributor: degenerate distributions in dimension %s", schema.dimensions[d])
            continue
        shift = (member[:, :, None] * w[None] * (expected_leaf - real_leaf)[None]).sum(axis=1)
        cf = np.array([_safe_derived(metrics, root_r + s)[m] for s in shift])
        ep = (v - cf) / (v - f)
        chosen, cum, s_sum = [], 0.0, 0.0
        for j in np.argsort(-surprise, kind="stable"):
            if ep[j] > config.t_eep:
                chosen.append(labels[j])
                cum += ep[j]
                s_sum += surprise[j]
                if cum >= config.t_ep:
                    break
        if chosen and cum >= config.t_ep and s_sum > best_s:
            best_s = s_sum
            best = [tuple(lab if i == d else AGG for i in range(schema.n_dims)) for lab in chosen]
    return best


# -- case runner -------------------------------------------------------

def localize_case(panel, tree, metrics, monitored, model, t, config: LocalizeConfig = None,
                  order=None, forecasts=None):
    """Predicted node set at ``t`` (empty when there is no anomaly or no candidate)."""
    fp = forecast_panel(panel, t, order) if forecasts is None else forecasts
    try:
        report = localize(panel, fp, model, tree, metrics, monitored, config)
    except (NoAnomalyError, NoCandidateError):
        return set(), None
    return set(report.nodes), report


def evaluate_cases(cases, tree, metrics, monitored, model, config: LocalizeConfig = None,
                   order=None, threshold=0.8, with_baseline=True, timing=True):
    """Score the localizer (and Adtributor) on ``cases``.

    Each case is ``(full panel, timestamp, truth)``; ``truth`` lists leaf
    keys, or is None to use the recovery ground truth. Returns CSV-ready row
    dicts: per-case rows of each method followed by its aggregate row.
    """
    rows = {METHOD: [], BASELINE: []}
    reports = {METHOD: [], BASELINE: []}
    for case, (panel, t, truth) in enumerate(cases):
        fp = forecast_panel(panel, t, order)
        if truth is None:
            true_set = ground_truth(panel, fp, tree, metrics, monitored, threshold)
        else:
            true_set = {tuple(k) for k in truth}
        start = time.perf_counter()
        pred, _ = localize_case(panel, tree, metrics, monitored, model, t, config, forecasts=fp)
        elapsed = (time.perf_counter() - start) * 1000.0
        _add(rows, reports, METHOD, case, prf1(pred, true_set, tree), elapsed, timing)
        if with_baseline:
            start = time.perf_counter()
            real = _rows(panel.values[t], panel.key_index, list(panel.metrics), tree.leaves,
                         metrics.fundamentals)
            exp = _forecast_rows(fp, tree.leaves, metrics.fundamentals)
            base = adtributor(real, exp, tree, metrics, monitored)
            elapsed = (time.perf_counter() - start) * 1000.0
            _add(rows, reports, BASELINE, case, prf1(base, true_set, tree), elapsed, timing)
    out = []
    for method in (METHOD, BASELINE):
        if not rows[method]:
            continue
        out.extend(rows[method])
        agg = micro_average(reports[method])
        total = sum(r["runtime_ms"] for r in rows[method])
        out.append(_row("ALL", method, agg, total))
    return out


def _add(rows, reports, method, case, rep, elapsed, timing):
    reports[method].append(rep)
    rows[method].append(_row(str(case), method, rep, elapsed if timing else 0.0))


def _row(case_id, method, rep: EvalReport, runtime_ms):
    return {"case_id": case_id, "method": method, "TP": rep.TP, "FP": rep.FP, "FN": rep.FN,
            "P": rep.precision, "R": rep.recall, "F1": rep.f1, "runtime_ms": runtime_ms}


def write_eval_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["case_id"], r["method"], r["TP"], r["FP"], r["FN"],
                        repr(float(r["P"])), repr(float(r["R"])), repr(float(r["F1"])),
                        "%.3f" % r["runtime_ms"]])


def read_eval_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("TP", "FP", "FN"):
            r[k] = int(r[k])
        for k in ("P", "R", "F1", "runtime_ms"):
            r[k] = float(r[k])
    return rows
