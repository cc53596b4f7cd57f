import json

import numpy as np
import pytest

from src.core.data import SegmentSample
from src.core.hierarchy import load_split, train_bottom_up
from src.core.numerics import EmbedderModel, TrainConfig, init_embedder
from src.core.tree import (
    InferenceModel, MetricTree, TreeNode, aggregate_decisions, build_metric_tree, embed, export_tree,
    feature_importance, load_query, rollup_decisions, segment_importance, symmetrized_snr, tree_from_json,
)
from src.utils.errors import DataError, DegenerateError, UsageError


@pytest.fixture
def trained(prototype_dir, small_config):
    _, manifest, _ = prototype_dir
    return manifest, train_bottom_up(manifest, small_config)


def _query(manifest, split, row):
    return {s: d.sample(row) for s, d in load_split(manifest, split).items()}


def test_self_comparison_is_zero_everywhere(trained):
    manifest, store = trained
    q = _query(manifest, 'val', 0)
    tree = build_metric_tree(store, q, q)
    for node in tree.nodes:
        assert node.raw == 0.0 and node.normalized == 0.0 and node.decision == 1.0
        assert node.similarity == pytest.approx(1.0)
        assert node.semantic_loss == pytest.approx(0.0)
    assert tree.z == pytest.approx(2.0)


def test_tree_mirrors_the_schedule(trained):
    manifest, store = trained
    tree = build_metric_tree(store, _query(manifest, 'val', 0), _query(manifest, 'val', 1))
    assert len(tree.nodes) == len(store.schedule.nodes)
    for node, scheduled in zip(tree.nodes, store.schedule.nodes):
        assert node.children == scheduled.children and node.name == scheduled.name
    assert tree.root_id == store.schedule.root_id
    for node in tree.nodes:
        assert 0.0 <= node.normalized < 1.0
        assert 0.0 < node.decision <= 1.0
    assert tree.z == pytest.approx(sum(n.decision for n in tree.leaves))


def test_report_is_symmetric(trained):
    manifest, store = trained
    a, b = _query(manifest, 'val', 2), _query(manifest, 'val', 5)
    ab = build_metric_tree(store, a, b)
    ba = build_metric_tree(store, b, a)
    for x, y in zip(ab.nodes, ba.nodes):
        assert x.raw == pytest.approx(y.raw)


def test_missing_leaf_is_a_usage_error(trained):
    manifest, store = trained
    q = _query(manifest, 'val', 0)
    partial = {'seg0': q['seg0']}
    with pytest.raises(UsageError, match='seg1'):
        build_metric_tree(store, q, partial)


def test_embed_checks_the_segment(trained):
    manifest, store = trained
    q = _query(manifest, 'val', 0)
    leaf = InferenceModel.from_checkpoint(store.get(0))
    first = embed(leaf, q['seg0'])
    assert first.tobytes() == embed(leaf, q['seg0']).tobytes()
    assert first.shape == (store.config.embed_dim,)
    with pytest.raises(UsageError):
        embed(leaf, q['seg1'])


def _tree(decisions):
    leaves = [TreeNode(i, f"l{i}", (), 0, 0.0, 0.0 if y is None else 1.0 - y, y) for i, y in enumerate(decisions)]
    root = TreeNode(len(leaves), 'root', tuple(range(len(leaves))), 1, 0.0, 0.0, 1.0)
    return MetricTree(tuple(leaves) + (root,), len(leaves), 'a', 'b', 0.0)


def test_aggregate_decisions():
    assert aggregate_decisions(_tree([0.2, 0.3])) == pytest.approx(0.5)
    assert aggregate_decisions(_tree([1.0, 1.0, 1.0])) == pytest.approx(3.0)
    assert aggregate_decisions(_tree([0.1, 0.7])) == aggregate_decisions(_tree([0.7, 0.1]))
    with pytest.raises(UsageError):
        aggregate_decisions(_tree([0.2, None]))


def test_rollup_sums_children():
    rolled = rollup_decisions(_tree([0.2, 0.3]))
    assert rolled[2] == pytest.approx(0.5)
    assert rolled[0] == 0.2


def test_json_export_is_idempotent(trained):
    manifest, store = trained
    tree = build_metric_tree(store, _query(manifest, 'val', 0), _query(manifest, 'val', 3), ('x', 'y'))
    raw = export_tree(tree, 'json')
    parsed = json.loads(raw)
    assert set(parsed) == {'nodes', 'root', 'z', 'queries'}
    assert {'id', 'name', 'children', 'raw', 'normalized', 'decision'} <= set(parsed['nodes'][0])
    assert export_tree(tree_from_json(raw), 'json') == raw


def test_dot_export_counts(trained):
    manifest, store = trained
    tree = build_metric_tree(store, _query(manifest, 'val', 0), _query(manifest, 'val', 3))
    dot = export_tree(tree, 'dot').decode()
    assert dot.count('label=') == len(tree.nodes)
    assert dot.count('->') == sum(len(n.children) for n in tree.nodes)
    assert f"d={tree.root.normalized:.3f}" in dot


def test_unknown_export_format(trained):
    manifest, store = trained
    q = _query(manifest, 'val', 0)
    with pytest.raises(UsageError):
        export_tree(build_metric_tree(store, q, q), 'svg')


def _sample(segment_id, values):
    values = np.asarray(values, dtype=np.float64)
    return SegmentSample(segment_id, values, np.ones(values.shape, dtype=bool), 0)


def _float64_inference(seed):
    config = TrainConfig(embed_dim=4, trunk_widths=(6,), embedder_hidden=5)
    return InferenceModel(0, 'seg', 'seg', init_embedder(5, config, seed, dtype=np.float64))


def _decision(inference, a, b):
    e_a, e_b = inference.embed(a), inference.embed(b)
    return 1.0 / (1.0 + symmetrized_snr(e_a, e_b))


def test_zero_feature_column_has_zero_importance():
    inference = _float64_inference(3)
    trunk = inference.model.trunk
    first = trunk.layers[0]
    weight = first.weight.copy()
    weight[:, 2] = 0.0
    model = EmbedderModel(
        type(trunk)((type(first)(weight, first.bias, first.activation),) + trunk.layers[1:]),
        inference.model.embedder)
    inference = InferenceModel(0, 'seg', 'seg', model)
    rng = np.random.default_rng(0)
    importance = feature_importance(inference, _sample('seg', rng.normal(size=5)), _sample('seg', rng.normal(size=5)))
    assert importance[2] == 0.0
    assert importance.shape == (5,)


def test_importance_matches_finite_differences():
    h = 1e-6
    checked = 0
    for seed in range(40):
        inference = _float64_inference(seed)
        rng = np.random.default_rng(seed)
        x_a, x_b = rng.normal(size=5), rng.normal(size=5)
        try:
            analytic = feature_importance(inference, _sample('seg', x_a), _sample('seg', x_b))
        except DegenerateError:
            continue
        numeric = np.empty(5)
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            plus = _decision(inference, _sample('seg', x_a + e), _sample('seg', x_b))
            minus = _decision(inference, _sample('seg', x_a - e), _sample('seg', x_b))
            numeric[i] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)
        swapped = feature_importance(inference, _sample('seg', x_a), _sample('seg', x_b), wrt='b')
        direct = feature_importance(inference, _sample('seg', x_b), _sample('seg', x_a))
        np.testing.assert_allclose(swapped, direct)
        checked += 1
        if checked == 5:
            break
    assert checked == 5


def test_degenerate_embeddings_raise():
    inference = _float64_inference(1)
    model = inference.model
    zero = EmbedderModel(model.trunk.unflatten(np.zeros(model.trunk.size)),
                         model.embedder.unflatten(np.zeros(model.embedder.size)))
    inference = InferenceModel(0, 'seg', 'seg', zero)
    with pytest.raises(DegenerateError):
        feature_importance(inference, _sample('seg', np.ones(5)), _sample('seg', np.zeros(5)))


def test_segment_importance_sums_over_masks():
    scores = segment_importance(np.array([1.0, 2.0, -0.5, 4.0]),
                                {'a': np.array([1, 1, 0, 0], bool), 'b': np.array([0, 0, 1, 1], bool)})
    assert scores == {'a': 3.0, 'b': 3.5}


def test_load_query_lists_missing_segments(prototype_dir):
    manifest_path, manifest, _ = prototype_dir
    val_dir = manifest.base_dir / 'data' / 'val'
    query = load_query(val_dir, manifest.segments, 4, manifest.input_dim)
    assert set(query) == {'seg0', 'seg1'}
    (val_dir / 'seg1.hseg').unlink()
    with pytest.raises(DataError, match='seg1'):
        load_query(val_dir, manifest.segments, 0)


@pytest.mark.slow
def test_xor_root_separates_classes(xor_store):
    manifest, store = xor_store
    val = load_split(manifest, 'val')
    labels = val['seg0'].labels
    rng = np.random.default_rng(0)
    same, cross = [], []
    while len(same) < 20 or len(cross) < 20:
        i, j = rng.choice(len(labels), size=2, replace=False)
        bucket = same if labels[i] == labels[j] else cross
        if len(bucket) >= 20:
            continue
        tree = build_metric_tree(store, {s: d.sample(i) for s, d in val.items()},
                                 {s: d.sample(j) for s, d in val.items()})
        bucket.append(tree.root.normalized)
    assert np.mean(cross) > np.mean(same)
