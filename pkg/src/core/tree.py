"""
Metric trees: per-node comparison of two queries through a trained store.

Every schedule node embeds both queries' composed segments with its own
checkpoint and records the symmetrized SNR distance, its normalized form
and a local decision y = 1 - normalized. The global decision z is the sum
of the leaf decisions.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import graphviz
import numpy as np

from src.core.data import SegmentSample, compose_segments, read_hseg
from src.core.metric import cosine_similarity, normalize_distance, sem_guided_loss, snr_distance, snr_distance_grad
from src.core.numerics import EmbedderModel, input_gradient, mlp_forward
from src.utils.errors import DataError, DegenerateError, DomainError, FormatError, UsageError

logger = logging.getLogger(__name__)

JSON = 'json'
DOT = 'dot'
EXPORT_FORMATS = (JSON, DOT)


@dataclass(frozen=True, eq=False)
class InferenceModel:
    node_id: Union[int, str]
    name: str
    segment_id: str
    model: EmbedderModel

    @classmethod
    def from_checkpoint(cls, checkpoint) -> 'InferenceModel':
        return cls(checkpoint.node_id, checkpoint.name, checkpoint.segment_id, checkpoint.model)

    def _features(self, sample: SegmentSample) -> np.ndarray:
        if sample.segment_id != self.segment_id:
            raise UsageError(f"sample of segment {sample.segment_id!r} cannot be embedded by node "
                             f"{self.name!r} ({self.segment_id!r})")
        return np.asarray(sample.features, dtype=np.float64)[None, :]

    def embed(self, sample: SegmentSample) -> np.ndarray:
        embedding, _ = mlp_forward(self.model, self._features(sample))
        return embedding[0]


def embed(inference: InferenceModel, sample: SegmentSample) -> np.ndarray:
    return inference.embed(sample)


def symmetrized_snr(e_a: np.ndarray, e_b: np.ndarray) -> float:
    return 0.5 * (snr_distance(e_a, e_b) + snr_distance(e_b, e_a))


def local_decision(normalized: float) -> float:
    return 1.0 - normalized


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    name: str
    children: Tuple[int, ...]
    level: int
    raw: float
    normalized: float
    decision: Optional[float]
    similarity: Optional[float] = None
    semantic_loss: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def to_dict(self) -> dict:
        return {
            'id': self.node_id,
            'name': self.name,
            'children': list(self.children),
            'level': self.level,
            'raw': self.raw,
            'normalized': self.normalized,
            'decision': self.decision,
            'similarity': self.similarity,
            'semantic_loss': self.semantic_loss,
        }


@dataclass(frozen=True)
class MetricTree:
    nodes: Tuple[TreeNode, ...]
    root_id: int
    query_a: str
    query_b: str
    z: float

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    @property
    def leaves(self) -> Tuple[TreeNode, ...]:
        return tuple(n for n in self.nodes if n.is_leaf)


def _missing(store, query: Mapping[str, SegmentSample]) -> list:
    return [s for s in store.manifest.segments if s not in query]


def _compose(leaves: Sequence[str], query: Mapping[str, SegmentSample], background_value: float) -> SegmentSample:
    return compose_segments([query[leaf] for leaf in leaves], background_value)


def _similarity_terms(e_a: np.ndarray, e_b: np.ndarray, alpha: float) -> Tuple[Optional[float], Optional[float]]:
    try:
        cos = cosine_similarity(e_a, e_b)
    except DegenerateError:
        return None, None
    try:
        semantic = sem_guided_loss(e_a, e_b, alpha)
    except DomainError:
        semantic = None
    return (1.0 + cos) / 2.0, semantic


def build_metric_tree(store, query_a: Mapping[str, SegmentSample], query_b: Mapping[str, SegmentSample],
                      ids: Tuple[str, str] = ('a', 'b')) -> MetricTree:
    if not store.is_complete():
        missing_nodes = [n.node_id for n in store.schedule.nodes if n.node_id not in store.checkpoints]
        raise DataError(f"store is incomplete, missing nodes {missing_nodes}")
    for label, query in zip(ids, (query_a, query_b)):
        missing = _missing(store, query)
        if missing:
            raise UsageError(f"query {label} is missing leaf segments {missing}")

    background = store.manifest.background_value
    nodes = []
    for node in store.schedule.nodes:
        checkpoint = store.get(node.node_id)
        inference = InferenceModel.from_checkpoint(checkpoint)
        e_a = inference.embed(_compose(node.leaves, query_a, background))
        e_b = inference.embed(_compose(node.leaves, query_b, background))
        raw = symmetrized_snr(e_a, e_b)
        normalized = normalize_distance(raw)
        similarity, semantic = _similarity_terms(e_a, e_b, checkpoint.config.alpha)
        nodes.append(TreeNode(
            node_id=node.node_id,
            name=node.name,
            children=node.children,
            level=node.level,
            raw=raw,
            normalized=normalized,
            decision=local_decision(normalized),
            similarity=similarity,
            semantic_loss=semantic,
        ))
        logger.debug(f"node {node.node_id} ({node.name}): raw {raw:.6f}, normalized {normalized:.6f}")

    partial = MetricTree(tuple(nodes), store.schedule.root_id, ids[0], ids[1], 0.0)
    tree = MetricTree(partial.nodes, partial.root_id, ids[0], ids[1], aggregate_decisions(partial))
    logger.info(f"Metric tree {ids[0]} vs {ids[1]}: z={tree.z:.6f}, root normalized {tree.root.normalized:.6f}")
    return tree


def aggregate_decisions(tree: MetricTree) -> float:
    """Global decision z: the sum of the leaf decisions."""
    leaves = tree.leaves
    absent = [n.node_id for n in leaves if n.decision is None]
    if not leaves or absent:
        raise UsageError(f"incomplete tree: leaf decisions missing for {absent}")
    return float(math.fsum(n.decision for n in leaves))


def rollup_decisions(tree: MetricTree) -> Dict[int, float]:
    """Bookkeeping view: each node carries the sum of leaf decisions below it."""
    rolled: Dict[int, float] = {}
    for node in sorted(tree.nodes, key=lambda n: (n.level, n.node_id)):
        if node.is_leaf:
            if node.decision is None:
                raise UsageError(f"incomplete tree: leaf {node.node_id} has no decision")
            rolled[node.node_id] = node.decision
        else:
            rolled[node.node_id] = sum(rolled[c] for c in node.children)
    return rolled


def feature_importance(inference: InferenceModel, sample_a: SegmentSample, sample_b: SegmentSample,
                       wrt: str = 'a') -> np.ndarray:
    """Exact gradient of the node's local decision w.r.t. one query's input features."""
    if wrt not in ('a', 'b'):
        raise UsageError(f"wrt must be 'a' or 'b', got {wrt!r}")
    if wrt == 'b':
        sample_a, sample_b = sample_b, sample_a
    x_a = inference._features(sample_a)
    e_a = inference.embed(sample_a)
    e_b = inference.embed(sample_b)

    # raw = (d(a, b) + d(b, a)) / 2, y = 1 / (1 + raw)
    d_ab, grad_ab, _ = snr_distance_grad(e_a, e_b)
    d_ba, _, grad_ba = snr_distance_grad(e_b, e_a)
    raw = 0.5 * (d_ab + d_ba)
    grad_raw = 0.5 * (grad_ab + grad_ba)
    grad_embedding = -grad_raw / (1.0 + raw) ** 2
    return input_gradient(inference.model, x_a, grad_embedding[None, :])[0]


def segment_importance(importance: np.ndarray, leaf_masks: Mapping[str, np.ndarray]) -> Dict[str, float]:
    importance = np.asarray(importance, dtype=np.float64)
    scores = {}
    for name, mask in leaf_masks.items():
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != importance.shape:
            raise UsageError(f"mask of {name!r} has shape {mask.shape}, importance has {importance.shape}")
        scores[name] = float(importance[mask].sum())
    return scores


def tree_to_dict(tree: MetricTree) -> dict:
    return {
        'nodes': [n.to_dict() for n in tree.nodes],
        'root': tree.root_id,
        'z': tree.z,
        'queries': [tree.query_a, tree.query_b],
    }


def _to_dot(tree: MetricTree) -> str:
    dot = graphviz.Digraph('metric_tree', graph_attr={'rankdir': 'BT'}, node_attr={'shape': 'box'})
    for node in tree.nodes:
        dot.node(str(node.node_id), label=f"{node.name}\\nd={node.normalized:.3f}")
    for node in tree.nodes:
        for child in node.children:
            dot.edge(str(node.node_id), str(child))
    return dot.source


def export_tree(tree: MetricTree, fmt: str = JSON) -> bytes:
    if fmt == JSON:
        return json.dumps(tree_to_dict(tree), indent=2).encode() + b'\n'
    if fmt == DOT:
        return _to_dot(tree).encode()
    raise UsageError(f"unknown tree format {fmt!r} (expected one of {', '.join(EXPORT_FORMATS)})")


def tree_from_json(raw: Union[bytes, str]) -> MetricTree:
    try:
        data = json.loads(raw)
        nodes = tuple(
            TreeNode(
                node_id=n['id'],
                name=n['name'],
                children=tuple(n['children']),
                level=n['level'],
                raw=n['raw'],
                normalized=n['normalized'],
                decision=n['decision'],
                similarity=n.get('similarity'),
                semantic_loss=n.get('semantic_loss'),
            )
            for n in data['nodes']
        )
        query_a, query_b = data['queries']
        return MetricTree(nodes, data['root'], query_a, query_b, data['z'])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"invalid metric tree JSON ({e})") from e


def load_query(directory, segments: Sequence[str], row: int, input_dim: Optional[int] = None) -> Dict[str, SegmentSample]:
    """Row `row` of every `<directory>/<segment>.hseg`, keyed by segment id."""
    directory = Path(directory)
    missing = [s for s in segments if not (directory / f"{s}.hseg").is_file()]
    if missing:
        raise DataError(f"{directory}: missing query files for segments {missing}")
    query = {}
    for segment in segments:
        dataset = read_hseg(directory / f"{segment}.hseg", segment, input_dim)
        if not 0 <= row < len(dataset):
            raise UsageError(f"row {row} out of range for {segment} ({len(dataset)} samples)")
        query[segment] = dataset.sample(row)
    return query
