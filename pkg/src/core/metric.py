"""
Distances, similarities, losses and triplet mining.

Every loss returns (loss, gradient w.r.t. the embedding batch); gradients
are exact, with subgradient 0 at non-differentiable points.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from src.core.numerics import LossName, MarginMode, MinerName, TrainConfig
from src.utils.errors import DataError, DegenerateError, DomainError, ShapeError, UsageError

logger = logging.getLogger(__name__)

EPS = 1e-12
EUCLIDEAN = 'euclidean'
SNR = 'snr'


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    metric: str


def _vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{what} must be a vector, got shape {v.shape}")
    return v


def _pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _vector(x, 'x'), _vector(y, 'y')
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def snr_distance(x, y) -> float:
    """Var(x - y) / Var(x), population variance over embedding dimensions."""
    x, y = _pair(x, y)
    if x.shape[0] < 2:
        raise ShapeError("SNR distance needs at least 2 dimensions")
    var_x = np.var(x)
    if var_x <= EPS:
        raise DegenerateError(f"anchor variance {var_x:.3e} is below {EPS}")
    return float(np.var(x - y) / var_x)


def snr_distance_grad(x, y) -> Tuple[float, np.ndarray, np.ndarray]:
    x, y = _pair(x, y)
    n_dims = x.shape[0]
    d = snr_distance(x, y)
    u = x - y
    u_c = u - u.mean()
    x_c = x - x.mean()
    var_x = np.var(x)
    var_u = np.var(u)
    grad_u = 2.0 * u_c / n_dims / var_x
    grad_x = grad_u - var_u * 2.0 * x_c / n_dims / var_x ** 2
    return d, grad_x, -grad_u


def normalize_distance(d: float) -> float:
    """Map [0, inf) onto [0, 1) with d / (1 + d)."""
    if d < 0:
        raise UsageError(f"distance must be non-negative, got {d}")
    return d / (1.0 + d)


def cosine_similarity(x, y) -> float:
    x, y = _pair(x, y)
    norm_x, norm_y = np.linalg.norm(x), np.linalg.norm(y)
    if norm_x <= EPS or norm_y <= EPS:
        raise DegenerateError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(x, y) / (norm_x * norm_y), -1.0, 1.0))


def euclidean_distance(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.linalg.norm(x - y))


def sem_guided_loss(x_i, x_j, alpha: float) -> float:
    """d(x_i, x_j) - alpha * log S(x_i, x_j)."""
    similarity = cosine_similarity(x_i, x_j)
    if similarity <= 0:
        raise DomainError(f"log of non-positive similarity {similarity:.6f}")
    return euclidean_distance(x_i, x_j) - alpha * math.log(similarity)


def _batch(embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"embeddings must be a matrix, got shape {x.shape}")
    return x


def _snr_matrix(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(D, centred differences, anchor variances) with D[i, j] = Var(x_i - x_j) / Var(x_i)."""
    var_x = x.var(axis=1)
    degenerate = np.flatnonzero(var_x <= EPS)
    if degenerate.size:
        raise DegenerateError(f"degenerate anchor rows under snr: {degenerate.tolist()}", degenerate.tolist())
    diff = x[:, None, :] - x[None, :, :]
    diff_c = diff - diff.mean(axis=2, keepdims=True)
    values = (diff_c ** 2).mean(axis=2) / var_x[:, None]
    np.fill_diagonal(values, 0.0)
    return values, diff_c, var_x


def pairwise_distances(embeddings, metric: str = EUCLIDEAN) -> DistanceMatrix:
    x = _batch(embeddings)
    if x.shape[0] < 2:
        raise UsageError(f"pairwise distances need at least 2 rows, got {x.shape[0]}")
    if metric == EUCLIDEAN:
        diff = x[:, None, :] - x[None, :, :]
        values = np.sqrt((diff ** 2).sum(axis=2))
        np.fill_diagonal(values, 0.0)
    elif metric == SNR:
        values = _snr_matrix(x)[0]
    else:
        raise UsageError(f"unknown metric {metric!r}")
    return DistanceMatrix(values, metric)


# ---------------------------------------------------------------- losses

def triplet_margin_loss(embeddings, triplets: Sequence[Triplet], m: float,
                        margin_mode: MarginMode = MarginMode.ABS) -> Tuple[float, np.ndarray]:
    x = _batch(embeddings)
    grad = np.zeros_like(x)
    idx = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if idx.shape[0] == 0:
        return 0.0, grad
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise UsageError("triplet index out of range")
    a, p, n = idx.T
    if np.any(a == p):
        raise UsageError("triplet with anchor == positive")

    vec_ap, vec_an = x[a] - x[p], x[a] - x[n]
    d_ap = np.linalg.norm(vec_ap, axis=1)
    d_an = np.linalg.norm(vec_an, axis=1)
    z = d_ap - d_an + m
    if MarginMode(margin_mode) is MarginMode.ABS:
        loss = float(np.mean(np.abs(z)))
        coef = np.sign(z)
    else:
        loss = float(np.mean(np.maximum(z, 0.0)))
        coef = (z > 0).astype(np.float64)
    coef /= idx.shape[0]

    unit_ap = np.divide(vec_ap, d_ap[:, None], out=np.zeros_like(vec_ap), where=d_ap[:, None] > EPS)
    unit_an = np.divide(vec_an, d_an[:, None], out=np.zeros_like(vec_an), where=d_an[:, None] > EPS)
    np.add.at(grad, a, coef[:, None] * (unit_ap - unit_an))
    np.add.at(grad, p, -coef[:, None] * unit_ap)
    np.add.at(grad, n, coef[:, None] * unit_an)
    return loss, grad


def contrastive_pair_loss(pos_d, neg_d, margin: float, neg_weight: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """mean(pos_d) + neg_weight * mean(max(0, margin - neg_d)), with grads w.r.t. each distance."""
    pos_d = np.asarray(pos_d, dtype=np.float64)
    neg_d = np.asarray(neg_d, dtype=np.float64)
    if pos_d.size == 0 or neg_d.size == 0:
        raise DataError("contrastive loss needs at least one positive and one negative pair")
    slack = margin - neg_d
    loss = float(pos_d.mean() + neg_weight * np.maximum(slack, 0.0).mean())
    grad_pos = np.full(pos_d.shape, 1.0 / pos_d.size)
    grad_neg = -neg_weight * (slack > 0) / neg_d.size
    return loss, grad_pos, grad_neg


def snr_contrastive_loss(embeddings, labels, margin: float, neg_weight: float = 1.0) -> Tuple[float, np.ndarray]:
    """Contrastive loss over all ordered pairs (i != j) with i as the SNR anchor."""
    x = _batch(embeddings)
    labels = np.asarray(labels)
    n, n_dims = x.shape
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same
    if not negative.any():
        raise DataError("snr contrastive loss on a single-class batch (no negative pairs)")
    if not positive.any():
        raise DataError("snr contrastive loss on a batch without positive pairs")

    dist, diff_c, var_x = _snr_matrix(x)
    loss, grad_pos, grad_neg = contrastive_pair_loss(dist[positive], dist[negative], margin, neg_weight)
    grad_d = np.zeros((n, n))
    grad_d[positive] = grad_pos
    grad_d[negative] = grad_neg

    # D[i, j] = A[i, j] / B[i]; A = Var(x_i - x_j), B = Var(x_i)
    term = grad_d[:, :, None] * (2.0 * diff_c / n_dims) / var_x[:, None, None]
    grad = term.sum(axis=1) - term.sum(axis=0)
    x_c = x - x.mean(axis=1, keepdims=True)
    weight = (grad_d * dist).sum(axis=1) / var_x
    grad -= weight[:, None] * 2.0 * x_c / n_dims
    return loss, grad


def ntxent_loss(embeddings, labels, temperature: float) -> Tuple[float, np.ndarray]:
    """Mean over anchor-positive pairs of -log softmax_{k != a}(s_ak / t)[p], s = cosine."""
    if temperature <= 0:
        raise UsageError(f"temperature must be > 0, got {temperature}")
    x = _batch(embeddings)
    labels = np.asarray(labels)
    n = x.shape[0]
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms <= EPS)
    if zero.size:
        raise DegenerateError(f"zero-norm embeddings at rows {zero.tolist()}", zero.tolist())
    unit = x / norms[:, None]
    logits = (unit @ unit.T) / temperature
    off_diag = ~np.eye(n, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & off_diag
    counts = positive.sum(axis=1)
    skipped = np.flatnonzero(counts == 0)
    if skipped.size:
        logger.warning(f"NTXent: skipping {skipped.size} anchor(s) without a positive",
                       extra={'skipped_anchors': skipped.tolist()})
    total = counts.sum()
    if total == 0:
        raise DataError("NTXent: no anchor has a positive")

    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    log_denominator = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    softmax = np.exp(masked - log_denominator[:, None])
    loss = float(((log_denominator[:, None] - logits) * positive).sum() / total)

    grad_logits = (counts[:, None] * softmax - positive) / total
    grad_sim = np.where(off_diag, grad_logits, 0.0) / temperature
    grad_unit = (grad_sim + grad_sim.T) @ unit
    grad = (grad_unit - (grad_unit * unit).sum(axis=1, keepdims=True) * unit) / norms[:, None]
    return loss, grad


# ---------------------------------------------------------------- mining

def mine_triplets(dmat: Union[DistanceMatrix, np.ndarray], labels, strategy: MinerName = MinerName.SEMIHARD,
                  m: float = 0.1) -> List[Triplet]:
    dist = dmat.values if isinstance(dmat, DistanceMatrix) else np.asarray(dmat, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if dist.shape != (n, n):
        raise ShapeError(f"distance matrix {dist.shape} does not match {n} labels")
    if np.unique(labels).size < 2:
        logger.warning("Triplet mining on a single-class batch returns no triplets")
        return []

    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same

    if MinerName(strategy) is MinerName.ALL:
        found = np.argwhere(positive[:, :, None] & negative[:, None, :])
        return [Triplet(int(a), int(p), int(q)) for a, p, q in found]

    pairs = np.argwhere(positive)
    if pairs.size == 0:
        return []
    rows = dist[pairs[:, 0]]
    d_ap = dist[pairs[:, 0], pairs[:, 1]][:, None]
    neg_rows = negative[pairs[:, 0]]
    window = neg_rows & (rows > d_ap) & (rows < d_ap + m)
    semi_hard = np.argmin(np.where(window, rows, np.inf), axis=1)
    hardest = np.argmin(np.where(neg_rows, rows, np.inf), axis=1)
    chosen = np.where(window.any(axis=1), semi_hard, hardest)
    return [Triplet(int(a), int(p), int(q)) for (a, p), q in zip(pairs, chosen)]


# ---------------------------------------------------------------- loss registry

Objective = Callable[[np.ndarray, np.ndarray, TrainConfig], Tuple[float, np.ndarray]]


def _triplet_objective(embeddings, labels, config: TrainConfig):
    dmat = pairwise_distances(embeddings, EUCLIDEAN)
    triplets = mine_triplets(dmat, labels, config.miner, config.margin)
    return triplet_margin_loss(embeddings, triplets, config.margin, config.margin_mode)


def _snr_objective(embeddings, labels, config: TrainConfig):
    return snr_contrastive_loss(embeddings, labels, config.margin, config.neg_weight)


def _ntxent_objective(embeddings, labels, config: TrainConfig):
    return ntxent_loss(embeddings, labels, config.temperature)


LOSS_REGISTRY: Dict[LossName, Objective] = {
    LossName.TRIPLET: _triplet_objective,
    LossName.SNR: _snr_objective,
    LossName.NTXENT: _ntxent_objective,
}


def batch_loss(embeddings, labels, config: TrainConfig) -> Tuple[float, np.ndarray]:
    objective = LOSS_REGISTRY.get(config.loss)
    if objective is None:
        raise UsageError(f"loss {config.loss.value!r} is not implemented")
    return objective(embeddings, labels, config)
