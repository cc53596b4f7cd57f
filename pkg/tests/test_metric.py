import logging
import math

import numpy as np
import pytest

from src.core.metric import (
    EUCLIDEAN, SNR, Triplet, batch_loss, contrastive_pair_loss, cosine_similarity, mine_triplets,
    normalize_distance, ntxent_loss, pairwise_distances, sem_guided_loss, snr_contrastive_loss, snr_distance,
    snr_distance_grad, triplet_margin_loss,
)
from src.core.numerics import MarginMode, MinerName, TrainConfig
from src.utils.errors import DataError, DegenerateError, DomainError, UsageError


def test_snr_distance_hand_cases():
    assert snr_distance([0.0, 2.0], [0.0, 0.0]) == pytest.approx(1.0)
    assert snr_distance([1.0, 3.0], [3.0, 1.0]) == pytest.approx(4.0)
    x = np.array([0.3, -1.2, 2.0, 0.5])
    assert snr_distance(x, x) == 0.0


def test_snr_distance_degenerate_anchor():
    with pytest.raises(DegenerateError):
        snr_distance([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])


def test_snr_distance_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        x, y = rng.normal(size=5), rng.normal(size=5)
        d, gx, gy = snr_distance_grad(x, y)
        assert d == pytest.approx(snr_distance(x, y))
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            assert gx[i] == pytest.approx((snr_distance(x + e, y) - snr_distance(x - e, y)) / (2 * h), rel=1e-4, abs=1e-6)
            assert gy[i] == pytest.approx((snr_distance(x, y + e) - snr_distance(x, y - e)) / (2 * h), rel=1e-4, abs=1e-6)


def test_normalize_distance():
    assert normalize_distance(0.0) == 0.0
    assert normalize_distance(4.0) == pytest.approx(0.8)
    values = np.sort(np.random.default_rng(1).uniform(0, 50, size=20))
    mapped = [normalize_distance(v) for v in values]
    assert all(a < b for a, b in zip(mapped, mapped[1:]))
    assert all(0.0 <= m < 1.0 for m in mapped)
    with pytest.raises(UsageError):
        normalize_distance(-0.1)


def test_cosine_similarity():
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)
    with pytest.raises(DegenerateError):
        cosine_similarity([0, 0], [1, 0])


def test_sem_guided_loss():
    x = np.array([0.4, -0.2, 1.0])
    assert sem_guided_loss(x, x, 2.0) == pytest.approx(0.0)
    y = np.array([1.0, 0.5, 0.2])
    assert sem_guided_loss(x, y, 0.0) == pytest.approx(np.linalg.norm(x - y))
    assert sem_guided_loss([1, 0], [1, 1], 1.0) == pytest.approx(1.0 - math.log(1 / math.sqrt(2)), abs=1e-4)
    assert sem_guided_loss([1, 0], [1, 1], 1.0) == pytest.approx(1.3466, abs=1e-4)
    with pytest.raises(DomainError):
        sem_guided_loss([1, 0], [-1, 0], 1.0)


def test_pairwise_euclidean_matches_loop():
    x = np.random.default_rng(2).normal(size=(7, 3))
    dmat = pairwise_distances(x, EUCLIDEAN).values
    for i in range(7):
        for j in range(7):
            assert dmat[i, j] == pytest.approx(np.linalg.norm(x[i] - x[j]))
    assert np.all(np.diag(dmat) == 0)
    np.testing.assert_allclose(dmat, dmat.T)
    for i, j, k in [(0, 1, 2), (3, 4, 5), (6, 2, 0)]:
        assert dmat[i, k] <= dmat[i, j] + dmat[j, k] + 1e-12


def test_pairwise_euclidean_is_a_metric_on_sampled_triples():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(60, 5))
    dmat = pairwise_distances(x, EUCLIDEAN).values
    assert np.array_equal(dmat, dmat.T)
    assert np.all(np.diag(dmat) == 0)
    assert np.all(dmat >= 0)
    triples = rng.integers(0, 60, size=(1000, 3))
    i, j, k = triples.T
    assert np.all(dmat[i, k] <= dmat[i, j] + dmat[j, k] + 1e-12)


def test_normalized_snr_distances_lie_in_unit_interval():
    x = np.random.default_rng(13).normal(size=(40, 6))
    dmat = pairwise_distances(x, SNR).values
    mapped = np.array([normalize_distance(d) for d in dmat.ravel()])
    assert np.all(mapped >= 0.0) and np.all(mapped < 1.0)


def test_pairwise_identical_rows():
    dmat = pairwise_distances([[1.0, 2.0], [1.0, 2.0]], EUCLIDEAN).values
    assert np.all(dmat == 0)


def test_pairwise_snr_is_asymmetric_with_zero_diagonal():
    x = np.random.default_rng(3).normal(size=(5, 4))
    dmat = pairwise_distances(x, SNR).values
    assert np.all(np.diag(dmat) == 0)
    assert not np.allclose(dmat, dmat.T)
    assert dmat[1, 3] == pytest.approx(snr_distance(x[1], x[3]))


def test_pairwise_snr_lists_degenerate_rows():
    x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [0.0, 1.0, 0.0], [2.0, 2.0, 2.0]])
    with pytest.raises(DegenerateError) as err:
        pairwise_distances(x, SNR)
    assert err.value.indices == [1, 3]


def test_triplet_loss_hand_cases():
    emb = np.array([[0.0], [0.5], [0.3]])
    loss, _ = triplet_margin_loss(emb, [Triplet(0, 1, 2)], 0.1, MarginMode.ABS)
    assert loss == pytest.approx(0.3)

    emb = np.array([[0.0], [0.2], [0.9]])
    hinge, grad = triplet_margin_loss(emb, [Triplet(0, 1, 2)], 0.1, MarginMode.HINGE)
    assert hinge == 0.0
    assert np.all(grad == 0)
    absolute, _ = triplet_margin_loss(emb, [Triplet(0, 1, 2)], 0.1, MarginMode.ABS)
    assert absolute == pytest.approx(0.6)


def test_triplet_loss_empty_is_zero():
    loss, grad = triplet_margin_loss(np.ones((3, 2)), [], 0.1)
    assert loss == 0.0
    assert grad.shape == (3, 2) and np.all(grad == 0)


def test_contrastive_pair_hand_case():
    loss, grad_pos, grad_neg = contrastive_pair_loss([0.2], [0.1], margin=1.0)
    assert loss == pytest.approx(1.1)
    assert grad_pos.tolist() == [1.0]
    assert grad_neg.tolist() == [-1.0]
    weighted, _, _ = contrastive_pair_loss([0.2], [0.1], margin=1.0, neg_weight=0.5)
    assert weighted == pytest.approx(0.2 + 0.45)


def test_snr_contrastive_zero_when_satisfied():
    emb = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [3.0, 2.0, 1.0]])
    # cross-class snr distance is 4 > margin
    loss, grad = snr_contrastive_loss(emb, [0, 0, 1, 1], margin=1.0)
    assert loss == 0.0
    assert np.allclose(grad, 0.0)


def test_snr_contrastive_single_class_batch():
    with pytest.raises(DataError):
        snr_contrastive_loss(np.random.default_rng(0).normal(size=(3, 4)), [1, 1, 1], margin=1.0)


def test_ntxent_three_sample_oracle():
    emb = np.array([[1.0, 0.2], [0.8, 0.6], [-0.3, 1.0]])
    labels = [0, 0, 1]
    t = 0.5
    loss, _ = ntxent_loss(emb, labels, t)

    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    terms = []
    for a, p in [(0, 1), (1, 0)]:
        denominator = sum(math.exp(cos(emb[a], emb[k]) / t) for k in range(3) if k != a)
        terms.append(-math.log(math.exp(cos(emb[a], emb[p]) / t) / denominator))
    assert loss == pytest.approx(sum(terms) / len(terms))
    assert loss > 0


def test_ntxent_skips_anchor_without_positive(caplog):
    emb = np.random.default_rng(4).normal(size=(3, 3))
    with caplog.at_level(logging.WARNING):
        ntxent_loss(emb, [0, 0, 1], 0.1)
    assert any('skipping 1 anchor' in r.getMessage() for r in caplog.records)
    with pytest.raises(DataError):
        ntxent_loss(emb, [0, 1, 2], 0.1)


def _numeric_grad(fn, emb, h=1e-6):
    grad = np.zeros_like(emb)
    for idx in np.ndindex(*emb.shape):
        step = np.zeros_like(emb)
        step[idx] = h
        grad[idx] = (fn(emb + step) - fn(emb - step)) / (2 * h)
    return grad


LABELS = np.array([0, 0, 0, 1, 1, 1])


def _kink_free(emb, triplets, m):
    d = pairwise_distances(emb, EUCLIDEAN).values
    return all(abs(d[a, p] - d[a, n] + m) > 1e-2 for a, p, n in triplets)


def test_triplet_loss_gradient_matches_finite_differences():
    triplets = mine_triplets(pairwise_distances(np.eye(6), EUCLIDEAN), LABELS, MinerName.ALL)
    checked = 0
    for seed in range(50):
        emb = np.random.default_rng(seed).normal(size=(6, 4))
        if not _kink_free(emb, triplets, 0.1):
            continue
        for mode in (MarginMode.ABS, MarginMode.HINGE):
            _, grad = triplet_margin_loss(emb, triplets, 0.1, mode)
            numeric = _numeric_grad(lambda e: triplet_margin_loss(e, triplets, 0.1, mode)[0], emb)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)
        checked += 1
        if checked == 5:
            break
    assert checked == 5


def test_snr_contrastive_gradient_matches_finite_differences():
    checked = 0
    for seed in range(50):
        emb = np.random.default_rng(seed).normal(size=(6, 4))
        dist = pairwise_distances(emb, SNR).values
        negatives = LABELS[:, None] != LABELS[None, :]
        if np.min(np.abs(1.5 - dist[negatives])) < 1e-2:
            continue
        _, grad = snr_contrastive_loss(emb, LABELS, margin=1.5, neg_weight=0.7)
        numeric = _numeric_grad(lambda e: snr_contrastive_loss(e, LABELS, 1.5, 0.7)[0], emb)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)
        checked += 1
        if checked == 5:
            break
    assert checked == 5


def test_ntxent_gradient_matches_finite_differences():
    for seed in range(5):
        emb = np.random.default_rng(seed).normal(size=(6, 4))
        _, grad = ntxent_loss(emb, LABELS, 0.3)
        numeric = _numeric_grad(lambda e: ntxent_loss(e, LABELS, 0.3)[0], emb)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_losses_are_permutation_invariant():
    rng = np.random.default_rng(8)
    emb = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a, _ = snr_contrastive_loss(emb, LABELS, 1.0)
    b, _ = snr_contrastive_loss(emb[perm], LABELS[perm], 1.0)
    assert a == pytest.approx(b)
    a, _ = ntxent_loss(emb, LABELS, 0.2)
    b, _ = ntxent_loss(emb[perm], LABELS[perm], 0.2)
    assert a == pytest.approx(b)
    config = TrainConfig(miner='all', margin_mode='hinge', margin=0.5)
    a, _ = batch_loss(emb, LABELS, config)
    b, _ = batch_loss(emb[perm], LABELS[perm], config)
    assert a == pytest.approx(b)


def test_all_triplets_enumeration():
    found = mine_triplets(np.zeros((3, 3)), [0, 0, 1], MinerName.ALL)
    assert set(found) == {Triplet(0, 1, 2), Triplet(1, 0, 2)}


def test_all_triplets_count():
    labels = np.array([0, 0, 0, 1, 1, 2])
    found = mine_triplets(np.zeros((6, 6)), labels, MinerName.ALL)
    n = len(labels)
    expected = sum(c * (c - 1) * (n - c) for c in np.bincount(labels))
    assert len(found) == expected == 26
    for a, p, q in found:
        assert labels[a] == labels[p] and labels[a] != labels[q] and a != p


def test_single_class_mining_is_empty(caplog):
    with caplog.at_level(logging.WARNING):
        assert mine_triplets(np.zeros((3, 3)), [2, 2, 2], MinerName.SEMIHARD) == []
    assert caplog.records


def test_semihard_window_and_fallback():
    emb = np.array([[0.0], [1.0], [1.05], [1.5], [3.0]])
    labels = [0, 0, 1, 1, 1]
    found = mine_triplets(pairwise_distances(emb, EUCLIDEAN), labels, MinerName.SEMIHARD, m=0.1)
    by_pair = {(t.anchor, t.positive): t.negative for t in found}
    # d_ap = 1, window (1, 1.1) holds index 2
    assert by_pair[(0, 1)] == 2
    # no negative in the window: hardest negative
    assert by_pair[(1, 0)] == 2


def test_semihard_is_subset_of_all():
    rng = np.random.default_rng(6)
    for _ in range(5):
        emb = rng.normal(size=(8, 3))
        labels = rng.integers(0, 3, size=8)
        dmat = pairwise_distances(emb, EUCLIDEAN)
        all_triplets = set(mine_triplets(dmat, labels, MinerName.ALL))
        assert set(mine_triplets(dmat, labels, MinerName.SEMIHARD, 0.2)) <= all_triplets


def _class_sizes(n, largest=None):
    """Every multiset of class sizes summing to n, largest part first."""
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    for size in range(min(n, largest), 0, -1):
        for rest in _class_sizes(n - size, size):
            yield (size,) + rest


def _label_multisets(max_n=8, seed=14):
    rng = np.random.default_rng(seed)
    for n in range(1, max_n + 1):
        for sizes in _class_sizes(n):
            labels = np.repeat(np.arange(len(sizes)), sizes)
            yield labels[rng.permutation(n)]


def _enumerate_triplets(labels):
    n = len(labels)
    return {Triplet(a, p, q) for a in range(n) for p in range(n) for q in range(n)
            if a != p and labels[a] == labels[p] and labels[q] != labels[a]}


def _scan_semihard(dist, labels, m):
    n = len(labels)
    chosen = []
    for a in range(n):
        for p in range(n):
            if a == p or labels[a] != labels[p]:
                continue
            d_ap = dist[a, p]
            in_window, hardest = None, None
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                d_an = dist[a, q]
                if hardest is None or d_an < dist[a, hardest]:
                    hardest = q
                if d_ap < d_an < d_ap + m and (in_window is None or d_an < dist[a, in_window]):
                    in_window = q
            if hardest is not None:
                chosen.append(Triplet(a, p, in_window if in_window is not None else hardest))
    return chosen


def test_all_triplets_match_enumeration_for_every_label_multiset():
    for labels in _label_multisets():
        n = len(labels)
        found = mine_triplets(np.zeros((n, n)), labels, MinerName.ALL)
        assert len(found) == len(set(found))
        assert set(found) == _enumerate_triplets(labels.tolist())


@pytest.mark.parametrize('m', [0.05, 0.3, 2.0])
def test_semihard_matches_window_scan_for_every_label_multiset(m):
    rng = np.random.default_rng(15)
    fallbacks = 0
    for labels in _label_multisets():
        n = len(labels)
        # coarse grid so that equal distances occur
        emb = np.round(rng.normal(size=(n, 2)), 1)
        dist = pairwise_distances(emb, EUCLIDEAN).values if n > 1 else np.zeros((1, 1))
        found = mine_triplets(dist, labels, MinerName.SEMIHARD, m)
        expected = _scan_semihard(dist, labels.tolist(), m)
        if np.unique(labels).size < 2:
            expected = []
        assert found == expected
        assert set(found) <= _enumerate_triplets(labels.tolist())
        fallbacks += sum(not (dist[a, p] < dist[a, q] < dist[a, p] + m) for a, p, q in found)
    if m < 1.0:
        assert fallbacks > 0


def test_unimplemented_loss_is_rejected():
    config = TrainConfig(loss='angular')
    with pytest.raises(UsageError, match='not implemented'):
        batch_loss(np.eye(4), [0, 0, 1, 1], config)


def test_triplet_sgd_on_separable_points_reduces_loss():
    rng = np.random.default_rng(10)
    points = rng.normal(size=(8, 2))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    triplets = mine_triplets(pairwise_distances(points, EUCLIDEAN), labels, MinerName.ALL)
    initial, _ = triplet_margin_loss(points, triplets, 1.0, MarginMode.HINGE)
    assert initial > 0
    for _ in range(200):
        loss, grad = triplet_margin_loss(points, triplets, 1.0, MarginMode.HINGE)
        points = points - 0.3 * grad
    final, _ = triplet_margin_loss(points, triplets, 1.0, MarginMode.HINGE)
    assert final < 0.1 * initial
