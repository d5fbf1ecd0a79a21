"""Evaluation metrics: macro AUC, accuracy, F1, top-1 cross-modal retrieval."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass
class EvalResult:
    name: str
    value: float
    n_evaluated: int
    per_class: Dict[int, float] = field(default_factory=dict)
    excluded: List[int] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.r_[0, np.flatnonzero(np.diff(xs) != 0) + 1]
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(xs.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney form: (sum of positive midranks - n+(n+ + 1)/2) / (n+ n-)."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    r = midranks(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Mean per-class AUC over classes that have both polarities.

    ``labels`` is a binary (n, C) matrix, or a vector of class ids that is
    one-hot encoded against the columns of ``scores``.
    """
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if Y.ndim == 1:
        Y = (Y[:, None] == np.arange(S.shape[1])[None, :])
    if S.shape != Y.shape:
        raise ValueError(f"scores {S.shape} and labels {Y.shape} differ")
    Y = Y.astype(bool)
    per_class, excluded = {}, []
    for c in range(S.shape[1]):
        pos = int(Y[:, c].sum())
        if pos == 0 or pos == Y.shape[0]:
            excluded.append(c)
            continue
        per_class[c] = binary_auc(S[:, c], Y[:, c])
    if not per_class:
        raise ValueError("no class has both positive and negative samples")
    value = float(np.mean(list(per_class.values())))
    return EvalResult("macro_auc", value, S.shape[0], per_class, excluded)


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> EvalResult:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if p.size == 0:
        raise ValueError("nothing to evaluate")
    return EvalResult("accuracy", float(np.mean(p == y)), int(p.size))


def _f1_from_counts(tp: int, fp: int, fn: int):
    # precision or recall undefined when nothing is predicted or nothing is true
    undefined = tp + fp == 0 or tp + fn == 0
    denom = 2 * tp + fp + fn
    return (2.0 * tp / denom if tp else 0.0), undefined


def f1(predictions: Sequence, labels: Sequence, averaging: str = "binary") -> EvalResult:
    """Binary F1 of the positive class (1), or macro F1 over the union of classes.

    Undefined precision or recall yields 0 and sets the ``zero_division`` flag.
    For 2-D 0/1 inputs, ``macro`` averages per-column binary F1.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in shape")
    if averaging not in ("binary", "macro"):
        raise ValueError("averaging must be 'binary' or 'macro'")
    flags: List[str] = []
    if averaging == "binary":
        p, y = p.astype(bool).ravel(), y.astype(bool).ravel()
        tp, fp, fn = int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & y))
        value, zero = _f1_from_counts(tp, fp, fn)
        if zero:
            flags.append("zero_division")
        return EvalResult("f1", value, int(y.size), flags=flags)
    per_class = {}
    if y.ndim == 2:
        columns = [(c, p[:, c].astype(bool), y[:, c].astype(bool)) for c in range(y.shape[1])]
    else:
        columns = [(int(c), p == c, y == c) for c in np.union1d(np.unique(p), np.unique(y))]
    for c, pc, yc in columns:
        tp, fp, fn = int(np.sum(pc & yc)), int(np.sum(pc & ~yc)), int(np.sum(~pc & yc))
        per_class[c], zero = _f1_from_counts(tp, fp, fn)
        if zero and "zero_division" not in flags:
            flags.append("zero_division")
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult("f1", value, int(y.shape[0]), per_class=per_class, flags=flags)


def retrieval_top1(
    query_reps: np.ndarray, candidate_reps: np.ndarray, pairing: Optional[Sequence[int]] = None
) -> EvalResult:
    """Fraction of queries whose most cosine-similar candidate is their partner.

    ``pairing[i]`` is the candidate index matching query i (identity if None).
    Ties go to the lowest candidate index.
    """
    Q = np.asarray(query_reps, dtype=np.float64)
    C = np.asarray(candidate_reps, dtype=np.float64)
    if Q.shape[0] == 0 or C.shape[0] == 0:
        raise ValueError("empty query or candidate set")
    if Q.shape[0] != C.shape[0]:
        raise ValueError("query and candidate counts differ")
    n = Q.shape[0]
    pairing = np.arange(n) if pairing is None else np.asarray(pairing, dtype=np.int64)
    if np.unique(pairing).size != n or pairing.min() < 0 or pairing.max() >= n:
        raise ValueError("pairing must be a bijection")
    qn = np.linalg.norm(Q, axis=1, keepdims=True)
    cn = np.linalg.norm(C, axis=1, keepdims=True)
    sims = (Q / np.where(qn == 0, 1, qn)) @ (C / np.where(cn == 0, 1, cn)).T
    hits = sims.argmax(axis=1) == pairing  # argmax returns the first maximum
    return EvalResult("retrieval_top1", float(hits.mean()), n)
