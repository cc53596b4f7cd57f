"""
Retrieval evaluation: Precision@K over euclidean k-NN (self excluded,
ties broken by ascending index) and per-node reports laid out like a
per-segment results table.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from src.core.metric import EUCLIDEAN, pairwise_distances
from src.core.numerics import mlp_forward
from src.utils.errors import UsageError

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 2, 8)


@dataclass(frozen=True)
class EvalReport:
    node_id: object
    name: str
    precisions: Dict[int, float]
    n_queries: int
    metric: str = EUCLIDEAN
    level: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'precisions', dict(sorted(self.precisions.items())))

    def to_dict(self) -> dict:
        return {
            'node_id': self.node_id,
            'name': self.name,
            'level': self.level,
            'n_queries': self.n_queries,
            'metric': self.metric,
            'precision': {str(k): v for k, v in self.precisions.items()},
        }


def precision_at_k(embeddings, labels, k: int) -> float:
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2:
        raise UsageError(f"Precision@K needs at least 2 samples, got {n}")
    if not 1 <= k <= n - 1:
        raise UsageError(f"k={k} out of range for {n} samples (1 <= k <= {n - 1})")
    if x.ndim == 1:
        x = x[:, None]
    dist = pairwise_distances(x, EUCLIDEAN).values
    np.fill_diagonal(dist, np.inf)
    neighbours = np.argsort(dist, axis=1, kind='stable')[:, :k]
    hits = int((labels[neighbours] == labels[:, None]).sum())
    return hits / (n * k)


def evaluate_node(checkpoint, dataset, ks: Sequence[int] = DEFAULT_KS, level: int = 0) -> EvalReport:
    if dataset.segment_id != checkpoint.segment_id:
        raise UsageError(f"dataset {dataset.segment_id!r} does not belong to node {checkpoint.name!r} "
                         f"({checkpoint.segment_id!r})")
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise UsageError("no K values requested")
    if len(dataset) < ks[-1] + 1:
        raise UsageError(f"node {checkpoint.name}: {len(dataset)} samples cannot support P@{ks[-1]}")
    embeddings, _ = mlp_forward(checkpoint.model, dataset.features)
    precisions = {k: precision_at_k(embeddings, dataset.labels, k) for k in ks}
    logger.info(f"Evaluated {checkpoint.name}: " + ", ".join(f"P@{k}={v:.3f}" for k, v in precisions.items()))
    return EvalReport(checkpoint.node_id, checkpoint.name, precisions, len(dataset), level=level)


def evaluate_store(store, datasets: Mapping[int, object], ks: Sequence[int] = DEFAULT_KS) -> List[EvalReport]:
    """Evaluate every schedule node, leaves first and the root last."""
    reports = []
    for node in store.schedule.level_order():
        reports.append(evaluate_node(store.get(node.node_id), datasets[node.node_id], ks, node.level))
    return reports


def format_report_table(reports: Iterable[EvalReport]) -> str:
    reports = list(reports)
    if not reports:
        return ''
    ks = list(reports[0].precisions)
    width = max(len('Segment'), *(len(r.name) for r in reports)) + 2
    header = 'Segment'.ljust(width) + ''.join(f"{'P@' + str(k):>8}" for k in ks)
    rule = '-' * len(header)
    lines = [header, rule]
    previous_level = reports[0].level
    for report in reports:
        if report.level != previous_level:
            lines.append(rule)
            previous_level = report.level
        cells = ''.join(f"{100.0 * report.precisions[k]:>8.1f}" for k in ks)
        lines.append(report.name.ljust(width) + cells)
    return '\n'.join(lines) + '\n'


def reports_to_json(reports: Iterable[EvalReport]) -> bytes:
    return json.dumps({'reports': [r.to_dict() for r in reports]}, indent=2).encode() + b'\n'
