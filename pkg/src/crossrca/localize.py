"""Root-cause localization: candidate filtering, genetic search, backtrack.

A chromosome is a boolean vector over the filtered candidate leaves. Its
fitness replaces the selected leaves' real fundamentals by their forecasts,
pushes the result through the relationship model to the root, and measures
how much of the root deviation remains, plus a succinctness penalty.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DimensionTree, MetricPanel, MetricSchema, format_key
from .errors import FormulaDomainError, NoAnomalyError, NoCandidateError, SchemaError
from .forecast import SIGMA_FLOOR, ForecastPanel

logger = logging.getLogger(__name__)

EPS_V = 1e-8  # denominator floor for relative deviations
EPS_DELTA = 1e-9  # smallest root deviation that counts as an anomaly


@dataclass
class GaConfig:
    population: int = 50
    iterations: int = 10
    cross_rate: float = 0.5
    mutation_rate: float = 0.1
    beta: float = 1.0
    init_density: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("cross_rate", "mutation_rate", "init_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class LocalizeConfig:
    t_delta: float = 0.1
    t_gamma: float = 0.6
    importance_norm: str = "mean"  # "sum": literal shares; "mean": shares times leaf count
    replace: str = "all"  # "all" fundamentals of a selected leaf, or only "anomalous" ones
    penalty: str = "leaves"  # ||s||_1 divided by tree leaves, by "candidates", or "none"
    anchored: bool = False  # measure counterfactual shifts from the model's own G(X(0))
    ga: GaConfig = field(default_factory=GaConfig)

    def __post_init__(self):
        if isinstance(self.ga, dict):
            self.ga = GaConfig(**self.ga)
        if not 0.0 <= self.t_gamma <= 1.0:
            raise ValueError("t_gamma must lie in [0, 1]")
        if self.t_delta < 0:
            raise ValueError("t_delta must be >= 0")
        if self.importance_norm not in ("sum", "mean"):
            raise ValueError("importance_norm must be 'sum' or 'mean'")
        if self.replace not in ("all", "anomalous"):
            raise ValueError("replace must be 'all' or 'anomalous'")
        if self.penalty not in ("leaves", "candidates", "none"):
            raise ValueError("penalty must be 'leaves', 'candidates' or 'none'")


# -- filtering ---------------------------------------------------------

@dataclass
class CandidateSet:
    positions: np.ndarray  # leaf positions, best score first
    keys: list
    scores: np.ndarray  # scores of the kept leaves, same order
    all_scores: np.ndarray  # score of every leaf


def relative_deviation(real, expected, eps_v=EPS_V):
    """Largest |v - f| / max(|v|, eps_v) per row, ignoring NaN columns."""
    real = np.asarray(real, dtype=float)
    expected = np.asarray(expected, dtype=float)
    with np.errstate(invalid="ignore"):
        dev = np.abs(real - expected) / np.maximum(np.abs(real), eps_v)
    dev = np.where(np.isfinite(dev), dev, 0.0)
    return dev.max(axis=-1)


def filter_scores(real, expected, importance, norm="sum", eps_v=EPS_V):
    """Relative deviation times normalized importance, one score per leaf.

    ``real``/``expected``: (n_leaves, n_metrics) over the metrics that count
    (fundamentals and the monitored one). ``norm="mean"`` rescales the
    importance shares so their average is 1.
    """
    importance = np.asarray(importance, dtype=float)
    total = importance.sum()
    share = importance / total if total > 0 else np.full(len(importance), 1.0 / len(importance))
    if norm == "mean":
        share = share * len(share)
    return relative_deviation(real, expected, eps_v) * share


def filter_candidates(real, expected, importance, t_delta, keys=None, norm="sum", eps_v=EPS_V):
    """Leaves whose filtering score reaches ``t_delta``, best first."""
    scores = filter_scores(real, expected, importance, norm, eps_v)
    kept = np.flatnonzero(scores >= t_delta)
    if len(kept) == 0:
        raise NoCandidateError()
    kept = kept[np.argsort(-scores[kept], kind="stable")]
    keys = list(range(len(scores))) if keys is None else list(keys)
    return CandidateSet(kept, [keys[i] for i in kept], scores[kept], scores)


# -- fitness -----------------------------------------------------------

class FitnessContext:
    """Batched fitness of chromosomes over a fixed candidate list."""

    def __init__(self, model, tree: DimensionTree, real_leaf, expected_leaf, candidates,
                 monitored_index: int, v_root: float, f_root: float, beta: float = 1.0,
                 replace_mask=None, penalty: str = "leaves", anchored: bool = False,
                 eps_delta: float = EPS_DELTA):
        self.model = model
        self.tree = tree
        self.real = np.asarray(real_leaf, dtype=float)
        self.expected = np.asarray(expected_leaf, dtype=float)
        self.candidates = np.asarray(candidates, dtype=np.int64)
        self.n = len(self.candidates)
        self.m = monitored_index
        self.v_root = float(v_root)
        self.f_root = float(f_root)
        self.delta = abs(self.v_root - self.f_root)
        if not self.delta > eps_delta:
            raise NoAnomalyError(f"root deviation {self.delta:.3g} is not above {eps_delta:g}")
        self.beta = beta
        P = self.real.shape[1]
        mask = np.ones((self.n, P), dtype=bool) if replace_mask is None else np.asarray(replace_mask, bool)
        if mask.shape != (self.n, P):
            raise ValueError(f"replace mask must have shape {(self.n, P)}")
        self.mask = mask
        self.norm = {"leaves": tree.n_leaves, "candidates": max(self.n, 1), "none": 1}[penalty]
        self.base = model.propagate(tree, self.real)
        self.anchor = float(self.base[0, self.m]) if anchored else None
        self.evaluations = 0

    def counterfactual_root(self, S):
        """Predicted root metrics G(X(s)) for each row of ``S`` (B, n)."""
        S = np.atleast_2d(np.asarray(S, dtype=bool))
        c = self.candidates
        new = np.where(S[:, :, None] & self.mask[None], self.expected[c][None], self.real[c][None])
        if hasattr(self.model, "root_with_changes"):
            run = lambda x: self.model.root_with_changes(self.tree, self.base, c, x)  # noqa: E731
        else:
            def run(x):
                full = np.broadcast_to(self.real, (len(x),) + self.real.shape).copy()
                full[:, c] = x
                return self.model.predict_root(self.tree, full)
        try:
            return run(new)
        except FormulaDomainError:
            out = []
            for row in new:
                try:
                    out.append(run(row[None])[0])
                except FormulaDomainError:
                    out.append(np.full(len(self.base[0]), np.nan))
            return np.array(out)

    def residual(self, S):
        """First fitness term: remaining share of the root deviation."""
        root = self.counterfactual_root(S)[:, self.m]
        if self.anchor is not None:
            root = root - self.anchor + self.v_root
        r = np.abs(root - self.f_root) / self.delta
        return np.where(np.isfinite(r), r, np.inf)

    def __call__(self, S):
        S = np.atleast_2d(np.asarray(S, dtype=bool))
        self.evaluations += len(S)
        return self.residual(S) + self.beta * S.sum(axis=1) / self.norm

    def recovery(self, S):
        return 1.0 - self.residual(S)


def fitness(s, ctx: FitnessContext) -> float:
    """Fitness of one chromosome."""
    return float(ctx(np.asarray(s, dtype=bool)[None])[0])


# -- genetic search ----------------------------------------------------

@dataclass
class GaResult:
    best: np.ndarray
    best_fitness: float
    history: list  # best-so-far fitness after each iteration
    evaluations: int


def initial_population(config: GaConfig, n: int, rng) -> np.ndarray:
    """Half random sparse chromosomes, half singletons of the top candidates."""
    Np = config.population
    n_single = Np // 2
    pop = rng.random((Np, n)) < config.init_density
    for i in range(n_single):
        pop[Np - n_single + i] = False
        pop[Np - n_single + i, i % n] = True
    return pop


def select(pop, fit, rng):
    """Rank roulette: the best of N_p gets weight N_p, the worst weight 1."""
    Np = len(pop)
    order = np.argsort(fit, kind="stable")
    w = np.empty(Np)
    w[order] = np.arange(Np, 0, -1)
    return pop[rng.choice(Np, size=Np, p=w / w.sum())]


def crossover(pop, rate, rng):
    """Single-point tail swap on adjacent pairs, each with probability ``rate``."""
    pop = pop.copy()
    n = pop.shape[1]
    for i in range(0, len(pop) - 1, 2):
        if rng.random() < rate and n > 1:
            cut = int(rng.integers(1, n))
            tail = pop[i, cut:].copy()
            pop[i, cut:] = pop[i + 1, cut:]
            pop[i + 1, cut:] = tail
    return pop


def mutate(pop, rate, rng):
    """Flip one random bit of each chromosome with probability ``rate``."""
    pop = pop.copy()
    n = pop.shape[1]
    for i in range(len(pop)):
        if rng.random() < rate:
            j = int(rng.integers(n))
            pop[i, j] = not pop[i, j]
    return pop


def ga_search(config: GaConfig, n: int, evaluate, init=None) -> GaResult:
    """Minimize ``evaluate`` (batched, (B, n) bool -> (B,)) over n-bit chromosomes.

    Candidates are assumed ordered best first, which the singleton half of
    the initial population exploits. ``init`` overrides the initial population.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(config.seed)
    pop = initial_population(config, n, rng) if init is None else np.asarray(init, dtype=bool).copy()
    cache = {}

    def cached(P):
        keys = [np.packbits(row).tobytes() for row in P]
        todo = [i for i, k in enumerate(keys) if k not in cache]
        if todo:
            uniq = {}
            for i in todo:
                uniq.setdefault(keys[i], i)
            vals = evaluate(P[list(uniq.values())])
            for k, v in zip(uniq, vals):
                cache[k] = float(v)
        return np.array([cache[k] for k in keys])

    best, best_fit, history = None, np.inf, []
    for _ in range(config.iterations):
        fit = cached(pop)
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best_fit, best = float(fit[i]), pop[i].copy()
        history.append(best_fit)
        pop = select(pop, fit, rng)
        pop = crossover(pop, config.cross_rate, rng)
        pop = mutate(pop, config.mutation_rate, rng)
    return GaResult(best, best_fit, history, len(cache))


def exhaustive_search(n: int, evaluate, chunk: int = 4096):
    """Minimum fitness over all 2^n chromosomes (ties: first in binary order)."""
    if n > 20:
        raise ValueError("exhaustive search is limited to n <= 20")
    best, best_fit = None, np.inf
    for s in range(0, 2 ** n, chunk):
        codes = np.arange(s, min(2 ** n, s + chunk))
        S = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
        fit = evaluate(S)
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best_fit, best = float(fit[i]), S[i].copy()
    return best, best_fit


# -- backtrack ---------------------------------------------------------

def backtrack(S, tree: DimensionTree, t_gamma: float = 0.6) -> set:
    """Compact chosen nodes into ancestors that are mostly chosen.

    Works layer by layer from the bottom: a parent of a chosen node joins
    when the chosen share of its leaves is at least ``t_gamma``, and then
    replaces its chosen descendants. Stops at the first layer that adds
    nothing. Internal nodes are accepted as input; they cover their leaves.
    """
    S = {tuple(k) for k in S}
    for k in S:
        if k not in tree.index:
            raise SchemaError(f"{format_key(k)} is not a node of the tree")
    out = set(S)
    covered = np.zeros(tree.n_leaves, dtype=bool)
    for k in out:
        covered[tree.leaf_slice(k)] = True
    for l in range(tree.n_levels - 1, 0, -1):
        members = [k for k in out if tree.depth[tree.index[k]] == l + 1]
        parents = sorted({int(tree.parent[tree.index[k]]) for k in members})
        added = False
        for p in parents:
            lo, hi = tree.leaf_lo[p], tree.leaf_hi[p]
            if covered[lo:hi].mean() >= t_gamma:
                out = {k for k in out if not (lo <= tree.leaf_lo[tree.index[k]] < hi)}
                out.add(tree.nodes[p])
                covered[lo:hi] = True
                added = True
        if not added:
            break
    return out


# -- end to end --------------------------------------------------------

@dataclass
class RootCauseReport:
    t: int
    monitored: str
    nodes: list  # backtracked nodes, strongest first
    leaves: list  # chosen leaves before backtrack
    best_fitness: float
    recovered_root: float  # G(X(s*)) for the monitored metric
    v_root: float
    f_root: float
    recovery_ratio: float
    candidates: list  # (key, filtering score), best first
    details: list = field(default_factory=list)  # one dict per node
    history: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def top(self):
        return self.nodes[0] if self.nodes else None

    def lines(self):
        """JSON lines: one per reported node, then one summary record."""
        for d in self.details:
            yield json.dumps(d, sort_keys=True)
        yield json.dumps({
            "record": "summary", "t": self.t, "monitored": self.monitored,
            "nodes": [format_key(k) for k in self.nodes],
            "leaves": [format_key(k) for k in self.leaves],
            "best_fitness": self.best_fitness, "recovered_root": self.recovered_root,
            "v_root": self.v_root, "f_root": self.f_root,
            "recovery_ratio": self.recovery_ratio,
            "candidates": [[format_key(k), s] for k, s in self.candidates],
            "history": self.history,
        }, sort_keys=True)

    def summary(self) -> str:
        shown = min(max(self.recovery_ratio, 0.0), 1.0)
        out = [f"root cause: {format_key(self.top) if self.top else '(none)'}",
               f"timestamp {self.t}, metric {self.monitored}: real {self.v_root:.6g}, "
               f"expected {self.f_root:.6g}, explained value {self.recovered_root:.6g}",
               f"recovery ratio {shown:.3f}, fitness {self.best_fitness:.4f}, "
               f"{len(self.candidates)} candidates, {self.evaluations} evaluations"]
        for d in self.details:
            out.append(f"  {d['key']}: individual recovery {d['recovery']:.3f}")
        return "\n".join(out) + "\n"

    def write(self, jsonl_path, summary_path=None):
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")
        if summary_path is not None:
            with open(summary_path, "w", encoding="utf-8") as fh:
                fh.write(self.summary())


def _rows(values, key_index, columns, keys, names):
    """(len(keys), len(names)) slice of a 2-d table; NaN where a key or metric is absent."""
    out = np.full((len(keys), len(names)), np.nan)
    src = [columns.index(n) for n in names if n in columns]
    dst = [j for j, n in enumerate(names) if n in columns]
    rows = np.array([key_index.get(tuple(k), -1) for k in keys], dtype=np.int64)
    hit = rows >= 0
    out[np.ix_(hit, dst)] = values[np.ix_(rows[hit], src)]
    return out


def _forecast_rows(fp: ForecastPanel, keys, names, what="expected"):
    return _rows(getattr(fp, what), fp.key_index, list(fp.metrics), keys, names)


def localize(panel: MetricPanel, forecasts: ForecastPanel, model, tree: DimensionTree,
             metrics: MetricSchema, monitored: str, config: LocalizeConfig = None) -> RootCauseReport:
    """Filter, search and backtrack at the forecast panel's timestamp."""
    config = LocalizeConfig() if config is None else config
    t = forecasts.t
    if monitored not in metrics.names or monitored in metrics.fundamentals:
        raise SchemaError(f"monitored metric {monitored!r} is not a derived metric")
    real = _rows(panel.values[t], panel.key_index, list(panel.metrics), tree.nodes, metrics.names)
    expected = _forecast_rows(forecasts, tree.nodes, metrics.names)
    m = metrics.index(monitored)
    v_root, f_root = real[0, m], expected[0, m]
    if not (np.isfinite(v_root) and np.isfinite(f_root)):
        raise SchemaError("the root's real and expected monitored values are required")
    if not abs(v_root - f_root) > EPS_DELTA:
        raise NoAnomalyError(f"no deviation on {monitored} at timestamp {t}")

    P = metrics.P
    leaf = slice(tree.leaf_start, None)
    real_leaf, exp_leaf = real[leaf, :P], expected[leaf, :P]
    if np.isnan(real_leaf).any() or np.isnan(exp_leaf).any():
        raise SchemaError("every leaf needs real and expected fundamentals")
    importance = model.leaf_importance(tree, real_leaf)
    cols = list(range(P)) + [m]
    cands = filter_candidates(real[leaf][:, cols], expected[leaf][:, cols], importance,
                              config.t_delta, tree.leaves, config.importance_norm)

    mask = None
    if config.replace == "anomalous":
        sigma = _forecast_rows(forecasts, tree.leaves, metrics.fundamentals, "sigma")
        c = cands.positions
        dev = np.abs(real_leaf[c] - exp_leaf[c])
        mask = dev > 3.0 * np.maximum(np.nan_to_num(sigma[c]), SIGMA_FLOOR)
    ctx = FitnessContext(model, tree, real_leaf, exp_leaf, cands.positions, m, v_root, f_root,
                         config.ga.beta, mask, config.penalty, config.anchored)
    res = ga_search(config.ga, ctx.n, ctx)
    chosen = res.best
    if not chosen.any():
        raise NoCandidateError()
    leaves = [cands.keys[i] for i in np.flatnonzero(chosen)]
    nodes = backtrack(leaves, tree, config.t_gamma)
    recovered = float(ctx.counterfactual_root(chosen[None])[0, m])
    recovery = float(ctx.recovery(chosen[None])[0])

    details = []
    pos_of = {k: i for i, k in enumerate(cands.keys)}
    for node in nodes:
        lo, hi = tree.leaf_slice(node).start, tree.leaf_slice(node).stop
        s = np.zeros(ctx.n, dtype=bool)
        for k in leaves:
            if lo <= tree.index[k] - tree.leaf_start < hi:
                s[pos_of[k]] = True
        i = tree.index[node]
        dev = {name: _round(real[i, j] - expected[i, j]) for j, name in enumerate(metrics.names)}
        details.append({"key": format_key(node), "depth": int(tree.depth[i]),
                        "recovery": float(ctx.recovery(s[None])[0]),
                        "fitness_contribution": float(ctx(s[None])[0]),
                        "leaves": int(s.sum()), "deviation": dev})
    details.sort(key=lambda d: (-d["recovery"], d["key"]))
    ordered = [tuple(d["key"].split("|")) for d in details]
    return RootCauseReport(
        t=t, monitored=monitored, nodes=ordered, leaves=leaves, best_fitness=res.best_fitness,
        recovered_root=recovered, v_root=float(v_root), f_root=float(f_root),
        recovery_ratio=recovery,
        candidates=[(k, float(s)) for k, s in zip(cands.keys, cands.scores)],
        details=details, history=res.history, evaluations=res.evaluations)


def _round(x):
    return float(x) if np.isfinite(x) else None
