import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossrca.core import AGG, DimensionSchema, MetricPanel, MetricSchema, aggregate_panel, build_tree
from crossrca.errors import DivergenceError, InsufficientHistoryError
from crossrca.gat import GatConfig, GatModel, TrainingLog, elu, path_products, train
from crossrca.oracle import ExactModel
from crossrca.synth import SynthConfig, generate_dataset

METRICS = MetricSchema(("x", "y"), (("r", "x / y"),))


def random_model(seed, heads=3, embed=4, metrics=METRICS):
    """Untrained model with every parameter (output head included) randomized."""
    rng = np.random.default_rng(seed)
    model = GatModel.initialize(GatConfig(embed_dim=embed, heads=heads, seed=seed), metrics)
    for k, v in model.params.items():
        model.params[k] = rng.normal(0, 0.7, size=v.shape)
    F, O = metrics.P + 1, metrics.P + metrics.Q
    model.norms = {"in_mean": rng.normal(5, 1, F), "in_scale": rng.uniform(0.5, 3, F),
                   "out_mean": rng.normal(0, 2, O), "out_scale": rng.uniform(0.5, 3, O)}
    return model


def reference_forward(model, parent_raw, children_raw):
    """Loop-by-loop parent prediction, written independently of the vectorized code."""
    p, cfg = model.params, model.config
    xp = model.normalize_inputs(np.asarray(parent_raw, float))
    xs = [model.normalize_inputs(np.asarray(c, float)) for c in children_raw]
    zs, alphas = [], []
    for k in range(cfg.heads):
        W = p["W"][k]
        scores = []
        for x in xs:
            e = p["a_src"][k] @ (W @ xp) + p["a_dst"][k] @ (W @ x)
            scores.append(e if e > 0 else cfg.leaky_slope * e)
        w = np.exp(np.array(scores) - max(scores))
        alpha = w / w.sum()
        alphas.append(alpha)
        h = sum(a * (W @ x) for a, x in zip(alpha, xs))
        zs.append(elu(h))
    z = np.concatenate(zs)
    a = elu(p["U"] @ z + p["c"])
    return model.denormalize_outputs(p["V"] @ a + p["d"]), np.array(alphas)


def parent_raw(model, depth):
    return np.concatenate([model.norms["in_mean"][:model.P], [depth]])


# -- attention ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_identical_children_split_evenly(seed):
    model = random_model(seed)
    child = [3.0, 4.0, 2.0]
    alpha = model.attention(parent_raw(model, 1), [child, child])
    np.testing.assert_allclose(alpha, 0.5, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_single_child_gets_everything(seed):
    model = random_model(seed)
    alpha = model.attention(parent_raw(model, 1), [[7.0, 1.0, 2.0]])
    np.testing.assert_array_equal(alpha, np.ones((3, 1)))


@pytest.mark.parametrize("seed", range(10))
def test_attention_matches_hand_softmax(seed):
    model = random_model(seed)
    rng = np.random.default_rng(100 + seed)
    children = np.column_stack([rng.normal(5, 2, (3, 2)), np.full(3, 2.0)])
    parent = parent_raw(model, 1)
    _, ref_alpha = reference_forward(model, parent, children)
    np.testing.assert_allclose(model.attention(parent, children), ref_alpha, atol=1e-10)
    np.testing.assert_allclose(model.attention(parent, children).sum(axis=1), 1.0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_forward_subtree_matches_reference(seed):
    model = random_model(seed)
    rng = np.random.default_rng(200 + seed)
    n = int(rng.integers(1, 6))
    children = np.column_stack([rng.normal(5, 2, (n, 2)), np.full(n, 2.0)])
    ref, _ = reference_forward(model, parent_raw(model, 1), children)
    np.testing.assert_allclose(model.forward_subtree(children), ref, rtol=1e-10, atol=1e-10)


def test_zero_output_head_predicts_output_mean():
    model = GatModel.initialize(GatConfig(seed=3), METRICS)
    model.norms["out_mean"] = np.array([10.0, 20.0, 0.5])
    model.norms["out_scale"] = np.array([2.0, 3.0, 0.1])
    out = model.forward_subtree([[1.0, 2.0, 1.0], [3.0, 4.0, 1.0]])
    np.testing.assert_array_equal(out, [10.0, 20.0, 0.5])


@given(st.integers(0, 10 ** 6), st.permutations(range(5)))
@settings(max_examples=40, deadline=None)
def test_forward_subtree_permutation_invariant(seed, perm):
    model = random_model(seed % 50)
    rng = np.random.default_rng(seed)
    children = np.column_stack([rng.normal(5, 2, (5, 2)), np.full(5, 2.0)])
    np.testing.assert_allclose(model.forward_subtree(children[list(perm)]),
                               model.forward_subtree(children), rtol=1e-10, atol=1e-10)


def square_tree(values=(("a", "b"), ("p", "q", "r")), reverse=False):
    vals = tuple(tuple(reversed(v)) if reverse else v for v in values)
    schema = DimensionSchema(("d1", "d2"), vals)
    return build_tree(schema, itertools.product(*values))


@pytest.mark.parametrize("seed", range(4))
def test_propagate_permutation_invariant(seed):
    model = random_model(seed)
    t1, t2 = square_tree(), square_tree(reverse=True)
    rng = np.random.default_rng(seed)
    vals = {k: rng.uniform(1, 9, 2) for k in t1.leaves}
    out1 = model.propagate(t1, np.array([vals[k] for k in t1.leaves]))
    out2 = model.propagate(t2, np.array([vals[k] for k in t2.leaves]))
    for key in t1.nodes[: t1.leaf_start]:
        np.testing.assert_allclose(out1[t1.index[key]], out2[t2.index[key]], rtol=1e-10, atol=1e-10)


def test_depth_one_propagate_is_one_subtree():
    model = random_model(7)
    schema = DimensionSchema(("d",), (("a", "b", "c", "e"),))
    tree = build_tree(schema, [(v,) for v in schema.values[0]])
    leaf = np.array([[1.0, 2.0], [3.0, 5.0], [2.0, 2.0], [9.0, 1.0]])
    out = model.propagate(tree, leaf)
    np.testing.assert_array_equal(out[0], model.forward_subtree(np.column_stack([leaf, np.ones(4)])))
    assert np.isnan(out[1:, 2]).all()


def test_propagate_batches_match_single_calls():
    model = random_model(8)
    tree = square_tree()
    rng = np.random.default_rng(0)
    batch = rng.uniform(1, 9, (4, tree.n_leaves, 2))
    together = model.propagate(tree, batch)
    for b in range(4):
        np.testing.assert_allclose(together[b], model.propagate(tree, batch[b]), rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_root_with_changes_matches_full_pass(seed):
    model = random_model(seed)
    tree = square_tree()
    rng = np.random.default_rng(seed)
    base_leaf = rng.uniform(1, 9, (tree.n_leaves, 2))
    base = model.propagate(tree, base_leaf)
    pos = np.array([1, 4, 5])
    new = rng.uniform(1, 9, (3, len(pos), 2))
    fast = model.root_with_changes(tree, base, pos, new)
    for b in range(3):
        leaf = base_leaf.copy()
        leaf[pos] = new[b]
        np.testing.assert_allclose(fast[b], model.propagate(tree, leaf)[0], rtol=1e-12, atol=1e-12)


def test_exact_model_matches_aggregation(snapshot):
    _, metrics, tree, leaf, full, _ = snapshot
    oracle = ExactModel(metrics)
    out = oracle.propagate(tree, leaf.values[0])
    np.testing.assert_array_equal(out, full.reindex(tree.nodes).values[0])
    np.testing.assert_array_equal(oracle.predict_root(tree, leaf.values[0]), full.values[0, 0])


# -- gradients ---------------------------------------------------------------

def small_instance(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed, heads=int(rng.integers(1, 4)), embed=int(rng.integers(1, 4)))
    for k in model.params:
        model.params[k] *= 0.6
    B, Np = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    counts = rng.integers(1, 4, size=Np)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    Xc = rng.normal(size=(B, counts.sum(), 3))
    Xp = rng.normal(size=(B, Np, 3))
    Y = rng.normal(size=(B, Np, 3))
    return model, Xc, Xp, starts, Y


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    model, Xc, Xp, starts, Y = small_instance(seed)
    _, grads = model.loss_and_grad(Xc, Xp, starts, Y)
    h = 1e-5
    for name, param in model.params.items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            keep = param[idx]
            param[idx] = keep + h
            up, _ = model.loss_and_grad(Xc, Xp, starts, Y)
            param[idx] = keep - h
            down, _ = model.loss_and_grad(Xc, Xp, starts, Y)
            param[idx] = keep
            numeric[idx] = (up - down) / (2 * h)
        err = np.abs(grads[name] - numeric)
        scale = np.maximum(np.abs(grads[name]), np.abs(numeric))
        assert np.all(err <= 1e-4 * scale + 1e-7), (name, float((err / (scale + 1e-12)).max()))


# -- normalization and persistence ------------------------------------------

@given(arrays(float, (6, 3), elements=st.floats(-1e6, 1e6)))
def test_normalization_round_trip(x):
    model = random_model(1)
    np.testing.assert_allclose(model.denormalize_inputs(model.normalize_inputs(x)), x,
                               rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(x).max())))
    np.testing.assert_allclose(model.denormalize_outputs(model.normalize_outputs(x)), x,
                               rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(x).max())))


def test_save_load_round_trip(tmp_path):
    model = random_model(11)
    model.save(tmp_path / "m.txt")
    back = GatModel.load(tmp_path / "m.txt", METRICS)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    for k in model.norms:
        np.testing.assert_array_equal(back.norms[k], model.norms[k])
    tree = square_tree()
    leaf = np.random.default_rng(0).uniform(1, 9, (tree.n_leaves, 2))
    np.testing.assert_array_equal(back.propagate(tree, leaf), model.propagate(tree, leaf))
    assert back.config == model.config
    assert (tmp_path / "m.txt").read_text().startswith("crossrca-gat 1\n")


def test_load_rejects_other_schema(tmp_path):
    model = random_model(2)
    model.save(tmp_path / "m.txt")
    other = MetricSchema(("x", "y"), (("r", "y / x"),))
    with pytest.raises(ValueError):
        GatModel.load(tmp_path / "m.txt", other)


# -- leaf importance ---------------------------------------------------------

def test_importance_single_edge_path():
    schema = DimensionSchema(("d",), (("a", "b", "c"),))
    tree = build_tree(schema, [("a",), ("b",), ("c",)])
    np.testing.assert_allclose(path_products(tree, [1.0, 0.5, 0.3, 0.2]), [0.5, 0.3, 0.2])


def test_importance_uniform_depth_two(snapshot):
    tree = snapshot[2]
    edge = np.ones(len(tree))
    for key in tree.nodes[1:]:
        edge[tree.index[key]] = 1.0 / len(tree.children(tree.parent_of(key)))
    np.testing.assert_allclose(path_products(tree, edge), 0.125)


@pytest.mark.parametrize("seed", range(3))
def test_importance_matches_hand_path_products(seed):
    model = random_model(seed)
    tree = square_tree()
    leaf = np.random.default_rng(seed).uniform(1, 9, (tree.n_leaves, 2))
    imp = model.leaf_importance(tree, leaf)
    out = model.propagate(tree, leaf)
    edge = {}
    for key in tree.nodes[: tree.leaf_start]:
        i = tree.index[key]
        kids = tree.children(key)
        feats = [np.concatenate([out[tree.index[k], :2], [tree.depth[i] + 1]]) for k in kids]
        alpha = model.attention(parent_raw(model, tree.depth[i]), feats).mean(axis=0)
        edge.update(zip(kids, alpha))
    raw = np.array([edge[leaf_key] * edge[tree.parent_of(leaf_key)] for leaf_key in tree.leaves])
    np.testing.assert_allclose(imp, raw / raw.sum(), atol=1e-10)
    assert imp.sum() == pytest.approx(1.0, abs=1e-12)


def test_exact_model_importance_is_value_share(snapshot):
    _, metrics, tree, leaf, full, _ = snapshot
    imp = ExactModel(metrics).leaf_importance(tree, leaf.values[0])
    assert imp.sum() == pytest.approx(1.0)
    assert tree.leaves[int(np.argmax(imp))] == ("Social Media", "Others")


# -- training ----------------------------------------------------------------

def constant_panel(tree, metrics, T=12):
    leaf = MetricPanel(tree.leaves, metrics.fundamentals,
                       np.broadcast_to([3.0, 2.0], (T, tree.n_leaves, 2)))
    return aggregate_panel(leaf, tree, metrics)


def test_constant_panel_converges():
    tree = square_tree()
    model, log = train(GatConfig(seed=1), tree, constant_panel(tree, METRICS), METRICS)
    assert log.train_mse[log.best_epoch] < 1e-8
    assert log.val_mse[log.best_epoch] < 1e-8


def test_training_is_deterministic():
    ds = generate_dataset(SynthConfig(values_per_dim=(2, 3), T=30, n_anomalies=0, seed=5))
    cfg = GatConfig(epochs=4, seed=9)
    _, log1 = train(cfg, ds.tree, ds.panel, ds.metrics)
    _, log2 = train(cfg, ds.tree, ds.panel, ds.metrics)
    assert log1.train_mse == log2.train_mse and log1.val_mse == log2.val_mse
    assert log1.epochs == 4


def test_too_few_timestamps():
    tree = square_tree()
    with pytest.raises(InsufficientHistoryError):
        train(GatConfig(epochs=1), tree, constant_panel(tree, METRICS, T=9), METRICS)


def test_divergence_reports_epoch_and_rate():
    ds = generate_dataset(SynthConfig(values_per_dim=(2, 3), T=30, n_anomalies=0, seed=5))
    with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
        train(GatConfig(epochs=3, learning_rate=1e300), ds.tree, ds.panel, ds.metrics)
    assert info.value.epoch == 0
    assert "1e+300" in str(info.value)


def test_training_log_csv(tmp_path):
    log = TrainingLog([0.5, 0.25], [0.6, 0.3], 1)
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines() == [
        "epoch,train_mse,val_mse", "0,0.5,0.59999999999999998", "1,0.25,0.29999999999999999"]


@pytest.fixture(scope="module")
def trained_ratio():
    ds = generate_dataset(SynthConfig(values_per_dim=(2, 4), T=200, f_index=0, seed=0))
    model, log = train(GatConfig(seed=0), ds.tree, ds.panel, ds.metrics)
    return ds, model, log


def test_validation_beats_mean_predictor(trained_ratio):
    ds, model, log = trained_ratio
    # independent baseline: the mean of the training targets, scored in normalized units
    n_val = int(round(0.2 * ds.config.T))
    full = ds.panel.reindex(ds.tree.nodes).values[:, : ds.tree.leaf_start]
    train_part, val_part = full[:-n_val], full[-n_val:]
    mean = train_part.reshape(-1, 4).mean(axis=0)
    std = train_part.reshape(-1, 4).std(axis=0)
    baseline = float(np.mean(((val_part - mean) / std) ** 2))
    assert log.baseline_val_mse == pytest.approx(baseline, rel=1e-9)
    assert min(log.val_mse) < baseline


def test_trained_root_prediction_on_held_out(trained_ratio):
    ds, model, _ = trained_ratio
    leaf = ds.panel.reindex(ds.tree.leaves).select_metrics(ds.metrics.fundamentals).values
    held = slice(160, 200)
    pred = model.predict_root(ds.tree, leaf[held])
    truth = ds.panel.values[held, 0]
    d = ds.metrics.index("d")
    assert np.mean(np.abs(pred[:, d] - truth[:, d]) / np.abs(truth[:, d]) <= 0.10) >= 0.9


def test_trained_subtree_sum_within_five_percent(trained_ratio):
    ds, model, _ = trained_ratio
    tree = ds.tree
    parent = tree.children(tree.root)[0]
    kids = tree.children(parent)
    t = 190
    feats = [[ds.panel.get(t, k, "b"), ds.panel.get(t, k, "c"), 2.0] for k in kids]
    pred = model.forward_subtree(feats)
    assert pred[0] == pytest.approx(ds.panel.get(t, parent, "b"), rel=0.05)
    assert pred[1] == pytest.approx(ds.panel.get(t, parent, "c"), rel=0.05)


def test_trained_attention_rows_sum_to_one(trained_ratio):
    ds, model, _ = trained_ratio
    tree = ds.tree
    out = model.propagate(tree, ds.panel.reindex(tree.leaves).values[5, :, :2])
    for key in tree.nodes[: tree.leaf_start]:
        i = tree.index[key]
        feats = [np.concatenate([out[tree.index[k], :2], [tree.depth[i] + 1]])
                 for k in tree.children(key)]
        alpha = model.attention(parent_raw(model, tree.depth[i]), feats)
        assert np.abs(alpha.sum(axis=1) - 1).max() < 1e-10
