"""Single-layer multi-head graph attention over parent/child subtrees.

One shared layer maps the children of a node to the node's own metrics.
Each child ``j`` contributes its fundamentals plus its depth as the input
vector ``x_j``; head ``k`` projects it with ``W[k]`` and scores it against
the parent with the attention vector ``(a_src[k], a_dst[k])``::

    e_j   = leaky_relu(a_src . W x_parent + a_dst . W x_j)
    alpha = softmax_j(e)
    z     = concat_k elu(sum_j alpha_kj W[k] x_j)
    y     = V elu(U z + c) + d          # fundamentals and deriveds of the parent

Parent attention features carry only the parent depth (its fundamentals are
the prediction target, so they are held at the normalizer mean). All
gradients are written out by hand; training uses Adam.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DimensionTree, MetricPanel, MetricSchema
from .errors import DivergenceError, InsufficientHistoryError, SchemaError

logger = logging.getLogger(__name__)

FORMAT = "crossrca-gat"
FORMAT_VERSION = 1
PARAM_NAMES = ("W", "a_src", "a_dst", "U", "c", "V", "d")
NORM_NAMES = ("in_mean", "in_scale", "out_mean", "out_scale")
_MEM_BUDGET = 4_000_000  # floats per (batch x edges x heads x embed) block


@dataclass
class GatConfig:
    embed_dim: int = 8
    heads: int = 8
    epochs: int = 1000
    learning_rate: float = 5e-4
    patience: int = 50
    val_fraction: float = 0.2
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim < 1:
            raise ValueError("heads and embed_dim must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _segment_ids(starts, m):
    ids = np.zeros(m, dtype=np.int64)
    ids[starts[1:]] = 1
    return np.cumsum(ids)


class GatModel:
    def __init__(self, config: GatConfig, params: dict, norms: dict,
                 fundamentals, derived, fingerprint=""):
        self.config = config
        self.params = {k: np.asarray(params[k], dtype=float) for k in PARAM_NAMES}
        self.norms = {k: np.asarray(norms[k], dtype=float) for k in NORM_NAMES}
        self.fundamentals = tuple(fundamentals)
        self.derived = tuple(derived)
        self.fingerprint = fingerprint

    @property
    def P(self):
        return len(self.fundamentals)

    @property
    def outputs(self):
        return self.fundamentals + self.derived

    @classmethod
    def initialize(cls, config: GatConfig, metrics: MetricSchema, norms=None, rng=None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        K, E = config.heads, config.embed_dim
        F, O = metrics.P + 1, metrics.P + metrics.Q
        H = K * E
        params = {
            "W": _glorot(rng, (K, E, F), F, E),
            "a_src": _glorot(rng, (K, E), 2 * E, 1),
            "a_dst": _glorot(rng, (K, E), 2 * E, 1),
            "U": _glorot(rng, (H, H), H, H),
            "c": np.zeros(H),
            "V": np.zeros((O, H)),
            "d": np.zeros(O),
        }
        if norms is None:
            norms = {"in_mean": np.zeros(F), "in_scale": np.ones(F),
                     "out_mean": np.zeros(O), "out_scale": np.ones(O)}
        return cls(config, params, norms, metrics.fundamentals,
                   tuple(n for n, _ in metrics.derived), metrics.fingerprint())

    # -- normalization -------------------------------------------------
    def normalize_inputs(self, x):
        return (x - self.norms["in_mean"]) / self.norms["in_scale"]

    def denormalize_inputs(self, x):
        return x * self.norms["in_scale"] + self.norms["in_mean"]

    def normalize_outputs(self, y):
        return (y - self.norms["out_mean"]) / self.norms["out_scale"]

    def denormalize_outputs(self, y):
        return y * self.norms["out_scale"] + self.norms["out_mean"]

    def parent_features(self, depth):
        """Normalized attention features of a parent at ``depth``."""
        depth = np.asarray(depth, dtype=float)
        out = np.zeros(depth.shape + (self.P + 1,))
        out[..., -1] = (depth - self.norms["in_mean"][-1]) / self.norms["in_scale"][-1]
        return out

    # -- core computation ----------------------------------------------
    def _forward(self, Xc, Xp, starts, cache=False):
        """Normalized predictions for parents whose children are segments of ``Xc``.

        ``Xc``: (B, M, F) child features, ``Xp``: (B, Np, F) parent features,
        ``starts``: first edge of each parent (children contiguous).
        """
        p = self.params
        slope = self.config.leaky_slope
        seg = _segment_ids(starts, Xc.shape[1])
        Hc = np.einsum("bmf,kef->bmke", Xc, p["W"])
        Hp = np.einsum("bpf,kef->bpke", Xp, p["W"])
        Pp = np.einsum("bpke,ke->bpk", Hp, p["a_src"])
        Cc = np.einsum("bmke,ke->bmk", Hc, p["a_dst"])
        pre = Pp[:, seg] + Cc
        s = np.where(pre > 0, pre, slope * pre)
        smax = np.maximum.reduceat(s, starts, axis=1)
        ex = np.exp(s - smax[:, seg])
        den = np.add.reduceat(ex, starts, axis=1)
        alpha = ex / den[:, seg]
        h = np.add.reduceat(alpha[..., None] * Hc, starts, axis=1)
        B, Np = h.shape[:2]
        z = elu(h).reshape(B, Np, -1)
        u = z @ p["U"].T + p["c"]
        a = elu(u)
        out = a @ p["V"].T + p["d"]
        if not cache:
            return out, alpha
        return out, dict(seg=seg, Hc=Hc, Hp=Hp, pre=pre, alpha=alpha, h=h, z=z, u=u, a=a,
                         Xc=Xc, Xp=Xp, starts=starts)

    def _backward(self, dout, c):
        p = self.params
        slope = self.config.leaky_slope
        seg, starts = c["seg"], c["starts"]
        g = {}
        g["V"] = np.einsum("bpo,bph->oh", dout, c["a"])
        g["d"] = dout.sum(axis=(0, 1))
        du = (dout @ p["V"]) * elu_grad(c["u"])
        g["U"] = np.einsum("bph,bpz->hz", du, c["z"])
        g["c"] = du.sum(axis=(0, 1))
        dh = (du @ p["U"]).reshape(c["h"].shape) * elu_grad(c["h"])
        dh_e = dh[:, seg]
        alpha = c["alpha"]
        dalpha = np.einsum("bmke,bmke->bmk", dh_e, c["Hc"])
        dHc = alpha[..., None] * dh_e
        ds = alpha * (dalpha - np.add.reduceat(alpha * dalpha, starts, axis=1)[:, seg])
        dpre = ds * np.where(c["pre"] > 0, 1.0, slope)
        dPp = np.add.reduceat(dpre, starts, axis=1)
        g["a_dst"] = np.einsum("bmk,bmke->ke", dpre, c["Hc"])
        g["a_src"] = np.einsum("bpk,bpke->ke", dPp, c["Hp"])
        dHc += dpre[..., None] * p["a_dst"]
        dHp = dPp[..., None] * p["a_src"]
        g["W"] = (np.einsum("bmke,bmf->kef", dHc, c["Xc"])
                  + np.einsum("bpke,bpf->kef", dHp, c["Xp"]))
        return g

    def loss_and_grad(self, Xc, Xp, starts, Y):
        """Summed squared error (normalized units) and its parameter gradients."""
        out, cache = self._forward(Xc, Xp, starts, cache=True)
        diff = out - Y
        return float(np.sum(diff ** 2)), self._backward(2.0 * diff, cache)

    # -- public inference ----------------------------------------------
    def attention(self, parent_raw, children_raw):
        """Per-head attention of one parent over its children, shape (K, n)."""
        Xc = self.normalize_inputs(np.asarray(children_raw, dtype=float))[None]
        Xp = self.normalize_inputs(np.asarray(parent_raw, dtype=float))[None, None]
        _, alpha = self._forward(Xc, Xp, np.array([0]))
        return alpha[0].T

    def forward_subtree(self, children_raw):
        """Raw prediction (fundamentals then deriveds) for the parent of ``children_raw``.

        Each child row is ``[fundamentals..., depth]``.
        """
        children_raw = np.asarray(children_raw, dtype=float)
        Xc = self.normalize_inputs(children_raw)[None]
        Xp = self.parent_features(children_raw[0, -1] - 1.0)[None, None]
        out, _ = self._forward(Xc, Xp, np.array([0]))
        return self.denormalize_outputs(out[0, 0])

    def _level_pass(self, tree, feats_child, l):
        a, b = tree.level_bounds[l]
        c0, _ = tree.level_bounds[l + 1]
        starts = tree.first_child[a:b] - c0
        B = feats_child.shape[0]
        Xp = np.broadcast_to(self.parent_features(np.full(b - a, float(l))), (B, b - a, self.P + 1))
        return self._forward(self.normalize_inputs(feats_child), Xp, starts)

    def propagate(self, tree: DimensionTree, leaf_values, with_attention=False):
        """Bottom-up prediction of every non-leaf node from leaf fundamentals.

        ``leaf_values``: (..., n_leaves, P) raw. Returns (..., n_nodes, P+Q);
        leaf rows hold the inputs and NaN for deriveds.
        """
        leaf_values = np.asarray(leaf_values, dtype=float)
        batch = leaf_values.shape[:-2]
        lv = leaf_values.reshape((-1,) + leaf_values.shape[-2:])
        widest = max(b - a for a, b in tree.level_bounds)
        step = max(1, _MEM_BUDGET // max(1, widest * self.config.heads * self.config.embed_dim))
        outs, atts = [], []
        for s in range(0, lv.shape[0], step):
            o, att = self._propagate(tree, lv[s:s + step], with_attention)
            outs.append(o)
            atts.append(att)
        out = np.concatenate(outs).reshape(batch + (len(tree), len(self.outputs)))
        if not with_attention:
            return out
        return out, np.concatenate(atts).reshape(batch + (len(tree),))

    def _propagate(self, tree, lv, with_attention):
        B = lv.shape[0]
        n, O, P = len(tree), len(self.outputs), self.P
        out = np.full((B, n, O), np.nan)
        out[:, tree.leaf_start:, :P] = lv
        att = np.zeros((B, n)) if with_attention else None
        for l in range(tree.n_levels - 1, -1, -1):
            c0, c1 = tree.level_bounds[l + 1]
            child = np.concatenate([out[:, c0:c1, :P], np.full((B, c1 - c0, 1), float(l + 1))], axis=2)
            pred, alpha = self._level_pass(tree, child, l)
            a, b = tree.level_bounds[l]
            out[:, a:b] = self.denormalize_outputs(pred)
            if with_attention:
                att[:, c0:c1] = alpha.mean(axis=2)
        return out, att

    def predict_root(self, tree, leaf_values):
        return self.propagate(tree, leaf_values)[..., 0, :]

    def root_with_changes(self, tree: DimensionTree, base, leaf_pos, new_values):
        """Root predictions when only some leaves change.

        ``base``: (n_nodes, P+Q) from :meth:`propagate` on the unchanged
        leaves; ``leaf_pos``: positions (in ``tree.leaves``) that may change;
        ``new_values``: (B, len(leaf_pos), P). Only ancestors of those leaves
        are recomputed, so the result equals a full propagate.
        """
        new_values = np.asarray(new_values, dtype=float)
        B, P = new_values.shape[0], self.P
        dirty = tree.leaf_start + np.asarray(leaf_pos, dtype=np.int64)
        vals = new_values
        if len(dirty) == 0:
            return np.broadcast_to(base[0], (B, base.shape[1])).copy()
        for l in range(tree.n_levels - 1, -1, -1):
            parents = np.unique(tree.parent[dirty])
            counts = tree.n_children[parents]
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            kids = np.concatenate([np.arange(f, f + c) for f, c in
                                   zip(tree.first_child[parents], counts)])
            child = np.broadcast_to(base[kids, :P], (B, len(kids), P)).copy()
            child[:, np.searchsorted(kids, dirty)] = vals
            feats = np.concatenate([child, np.full((B, len(kids), 1), float(l + 1))], axis=2)
            Xp = np.broadcast_to(self.parent_features(np.full(len(parents), float(l))),
                                 (B, len(parents), P + 1))
            out, _ = self._forward(self.normalize_inputs(feats), Xp, starts)
            out = self.denormalize_outputs(out)
            dirty, vals = parents, out[..., :P]
        return out[:, 0]

    def leaf_importance(self, tree: DimensionTree, leaf_values):
        """Product of head-averaged attention along each leaf-to-root path."""
        _, att = self.propagate(tree, leaf_values, with_attention=True)
        return path_products(tree, att)

    # -- persistence ---------------------------------------------------
    def save(self, path):
        lines = [f"{FORMAT} {FORMAT_VERSION}",
                 "config " + json.dumps(asdict(self.config), sort_keys=True),
                 "fundamentals " + json.dumps(list(self.fundamentals)),
                 "derived " + json.dumps(list(self.derived)),
                 f"fingerprint {self.fingerprint}"]
        for name, arr in list(self.params.items()) + list(self.norms.items()):
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"tensor {name} {shape}")
            lines.append(" ".join("%.17g" % v for v in arr.ravel()))
        lines.append("end")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, metrics: MetricSchema = None):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        head = lines[0].split()
        if head[0] != FORMAT or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: not a {FORMAT} v{FORMAT_VERSION} file")
        meta, tensors = {}, {}
        i = 1
        while i < len(lines) and lines[i] != "end":
            tag, _, rest = lines[i].partition(" ")
            if tag == "tensor":
                name, shape = rest.split()
                shape = tuple(int(s) for s in shape.split(",") if s)
                data = np.array([float(v) for v in lines[i + 1].split()])
                tensors[name] = data.reshape(shape)
                i += 2
            else:
                meta[tag] = rest
                i += 1
        model = cls(GatConfig(**json.loads(meta["config"])),
                    {k: tensors[k] for k in PARAM_NAMES},
                    {k: tensors[k] for k in NORM_NAMES},
                    json.loads(meta["fundamentals"]), json.loads(meta["derived"]),
                    meta.get("fingerprint", ""))
        if metrics is not None and metrics.fingerprint() != model.fingerprint:
            raise SchemaError(f"{path}: model was trained for a different metric schema")
        return model


def path_products(tree: DimensionTree, edge_weight):
    """Leaf importances from per-node incoming edge weights (root entry unused)."""
    edge_weight = np.asarray(edge_weight, dtype=float)
    imp = np.empty_like(edge_weight)
    imp[..., 0] = 1.0
    for l in range(1, tree.n_levels + 1):
        a, b = tree.level_bounds[l]
        imp[..., a:b] = imp[..., tree.parent[a:b]] * edge_weight[..., a:b]
    leaves = imp[..., tree.leaf_start:]
    return leaves / leaves.sum(axis=-1, keepdims=True)


# -- training ----------------------------------------------------------

@dataclass
class TrainingLog:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    baseline_val_mse: float = float("nan")  # predicting the training mean

    @property
    def epochs(self):
        return len(self.train_mse)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for e, (tr, va) in enumerate(zip(self.train_mse, self.val_mse)):
                w.writerow([e, "%.17g" % tr, "%.17g" % va])


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _scale(std, mean):
    return np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)


def subtree_batches(tree: DimensionTree, values: np.ndarray, P: int):
    """Raw child features (T, M, P+1), parent depths and edge starts for all subtrees.

    Edges are all non-root nodes in tree order, grouped by parent.
    """
    T = values.shape[0]
    child = values[:, 1:, :P]
    depth = np.broadcast_to(tree.depth[1:].astype(float)[None, :, None], (T, len(tree) - 1, 1))
    feats = np.concatenate([child, depth], axis=2)
    starts = tree.first_child[: tree.leaf_start] - 1
    return feats, tree.depth[: tree.leaf_start].astype(float), starts


def train(config: GatConfig, tree: DimensionTree, panel: MetricPanel, metrics: MetricSchema):
    """Fit the shared attention layer on every (timestamp, non-leaf node) subtree.

    ``panel`` must hold observed values for all tree nodes and metrics.
    One Adam step per timestamp; the last ``val_fraction`` of timestamps is
    held out for early stopping. Returns ``(model, TrainingLog)``.
    """
    if panel.T < 10:
        raise InsufficientHistoryError(f"training needs at least 10 timestamps, got {panel.T}")
    full = panel.reindex(tree.nodes).select_metrics(metrics.names)
    values = full.values
    if not np.isfinite(values).all():
        raise SchemaError("training panel has missing or non-finite cells")
    P = metrics.P
    n_val = max(1, int(round(config.val_fraction * panel.T)))
    train_t = np.arange(panel.T - n_val)
    val_t = np.arange(panel.T - n_val, panel.T)

    feats, parent_depth, starts = subtree_batches(tree, values, P)
    targets = values[:, : tree.leaf_start, :]
    tr_feats = feats[train_t].reshape(-1, P + 1)
    in_mean = tr_feats.mean(axis=0)
    in_scale = _scale(tr_feats.std(axis=0), in_mean)
    tr_targets = targets[train_t].reshape(-1, targets.shape[-1])
    out_mean = tr_targets.mean(axis=0)
    out_scale = _scale(tr_targets.std(axis=0), out_mean)
    norms = dict(in_mean=in_mean, in_scale=in_scale, out_mean=out_mean, out_scale=out_scale)

    rng = np.random.default_rng(config.seed)
    model = GatModel.initialize(config, metrics, norms, rng)
    Xc = model.normalize_inputs(feats)
    Xp = np.broadcast_to(model.parent_features(parent_depth), (panel.T,) + (len(starts), P + 1))
    Y = model.normalize_outputs(targets)

    def mse(ts):
        out, _ = model._forward(Xc[ts], Xp[ts], starts)
        return float(np.mean((out - Y[ts]) ** 2))

    log = TrainingLog(baseline_val_mse=float(np.mean(Y[val_t] ** 2)))
    opt = _Adam(model.params, config.learning_rate)
    best, best_val, waited = None, np.inf, 0
    for epoch in range(config.epochs):
        # overflow shows up as a non-finite loss, reported as DivergenceError
        with np.errstate(over="ignore", invalid="ignore"):
            for t in rng.permutation(train_t):
                loss, grads = model.loss_and_grad(Xc[t:t + 1], Xp[t:t + 1], starts, Y[t:t + 1])
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, config.learning_rate)
                opt.step(model.params, grads)
            tr, va = mse(train_t), mse(val_t)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise DivergenceError(epoch, config.learning_rate)
        log.train_mse.append(tr)
        log.val_mse.append(va)
        if va < best_val:
            best_val, waited, log.best_epoch = va, 0, epoch
            best = {k: v.copy() for k, v in model.params.items()}
        else:
            waited += 1
            if waited >= config.patience:
                log.stopped_early = True
                break
    if best is not None:
        model.params = best
    logger.info("trained %d epochs, best val mse %.3g at epoch %d",
                log.epochs, best_val, log.best_epoch)
    return model, log
