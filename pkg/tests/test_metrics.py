import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from mmfedsim.metrics import accuracy, binary_auc, f1, macro_auc, midranks, retrieval_top1


def pair_count_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def test_midranks_with_ties():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_auc_hand_examples():
    assert binary_auc(np.array([0.1, 0.9]), np.array([0, 1])) == 1.0
    assert binary_auc(np.array([0.9, 0.1]), np.array([0, 1])) == 0.0
    assert binary_auc(np.array([0.5, 0.5]), np.array([0, 1])) == 0.5


@pytest.mark.parametrize("seed", range(10))
def test_macro_auc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    S = rng.integers(0, 6, (50, 5)).astype(float)  # coarse scores force ties
    Y = rng.integers(0, 2, (50, 5))
    expected = np.mean([pair_count_auc(S[:, c], Y[:, c]) for c in range(5)])
    assert abs(macro_auc(S, Y).value - expected) <= 1e-12


def test_macro_auc_excludes_single_polarity_classes():
    S = np.random.default_rng(0).random((6, 3))
    Y = np.array([[1, 0, 1], [0, 0, 1], [1, 0, 1], [0, 0, 1], [1, 0, 1], [0, 0, 1]])
    res = macro_auc(S, Y)
    assert res.excluded == [1, 2] and list(res.per_class) == [0]
    with pytest.raises(ValueError):
        macro_auc(S, np.ones((6, 3)))


def test_macro_auc_from_class_ids():
    S = np.eye(3)[[0, 1, 2, 0]] + 0.1
    assert macro_auc(S, np.array([0, 1, 2, 0])).value == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_macro_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((30, 3))
    Y = rng.integers(0, 2, (30, 3))
    Y[0], Y[1] = 1, 0
    a = macro_auc(S, Y).value
    assert macro_auc(np.exp(3 * S) + 7, Y).value == a
    assert macro_auc(S ** 3, Y).value == a


def test_accuracy():
    assert accuracy([1, 2, 3, 4], [1, 2, 0, 4]).value == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])


def confusion_f1(p, y, c):
    tp = sum(1 for a, b in zip(p, y) if a == c and b == c)
    fp = sum(1 for a, b in zip(p, y) if a == c and b != c)
    fn = sum(1 for a, b in zip(p, y) if a != c and b == c)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


@pytest.mark.parametrize("seed", range(5))
def test_macro_f1_matches_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, 80)
    p = np.where(rng.random(80) < 0.6, y, rng.integers(0, 4, 80))
    classes = sorted(set(y.tolist()) | set(p.tolist()))
    expected = np.mean([confusion_f1(p, y, c) for c in classes])
    assert f1(p, y, "macro").value == pytest.approx(expected, abs=1e-12)
    assert f1(p == 1, y == 1).value == pytest.approx(confusion_f1(p == 1, y == 1, True), abs=1e-12)


def test_f1_zero_division_flag():
    res = f1([0, 0, 0], [0, 0, 0])
    assert res.value == 0.0 and "zero_division" in res.flags
    res = f1([1, 0, 0], [0, 1, 0])  # both precision and recall defined, just zero
    assert res.value == 0.0 and res.flags == []


def test_multilabel_macro_f1_per_column():
    Y = np.array([[1, 0], [0, 1], [1, 1]])
    P = np.array([[1, 0], [0, 0], [1, 1]])
    assert f1(P, Y, "macro").value == pytest.approx((1.0 + 2 / 3) / 2)


def test_retrieval_perfect_and_tie_break():
    Z = np.eye(4)
    assert retrieval_top1(Z, Z).value == 1.0
    # all candidates equal: every query picks index 0
    res = retrieval_top1(np.ones((3, 2)), np.ones((3, 2)))
    assert res.value == pytest.approx(1 / 3)


def test_retrieval_custom_pairing():
    Z = np.eye(3)
    assert retrieval_top1(Z, Z[[2, 0, 1]], pairing=[1, 2, 0]).value == 1.0
    with pytest.raises(ValueError):
        retrieval_top1(Z, Z, pairing=[0, 0, 1])


def test_retrieval_chance_level():
    rng = np.random.default_rng(0)
    n, trials = 1000, 50
    hits = [retrieval_top1(rng.standard_normal((n, 8)), rng.standard_normal((n, 8))).value * n for _ in range(trials)]
    mean = np.mean(hits) / n
    sigma = np.sqrt((1 / n) * (1 - 1 / n) / (n * trials))
    assert abs(mean - 1 / n) < 3 * sigma


def test_retrieval_rotation_invariance():
    rng = np.random.default_rng(1)
    Q, C = rng.standard_normal((40, 6)), rng.standard_normal((40, 6))
    R = ortho_group.rvs(6, random_state=2)
    assert abs(retrieval_top1(Q, C).value - retrieval_top1(Q @ R, C @ R).value) <= 1e-12
