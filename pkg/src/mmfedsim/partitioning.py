"""Turn a pooled index set into per-client shards.

All Dirichlet-style partitioners (label, multi-label, metadata) draw from the
same seeded stream so that a multi-label matrix with one positive per row
yields exactly the plan of the single-label partitioner.
"""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

STRATEGIES = ("natural", "iid", "dirichlet", "multilabel_dirichlet", "metadata_dirichlet")
DEFAULT_MIN_CLIENT_SIZE = 10
DEFAULT_MAX_RETRIES = 100
NO_FINDING = -1  # reserved pseudo-label for all-zero multi-label rows

_STREAM_TAGS = {"dirichlet": 11, "iid": 12, "kmeans": 13}


class PartitionError(RuntimeError):
    pass


def _rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_TAGS[kind]]))


@dataclass
class PartitionPlan:
    assignments: np.ndarray  # client id for each position 0..n-1
    n_clients: int
    strategy: str
    alpha: Optional[float]
    seed: int
    sample_ids: Optional[np.ndarray] = None  # original sample index of each position
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.assignments.size)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return int(self.assignments.size)

    def client_positions(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.assignments == c) for c in range(self.n_clients)]

    def client_indices(self) -> List[np.ndarray]:
        """Original sample ids held by each client, ascending."""
        return [np.sort(self.sample_ids[pos]) for pos in self.client_positions()]

    def client_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clients)

    def with_sample_ids(self, sample_ids: Sequence[int]) -> "PartitionPlan":
        ids = np.asarray(sample_ids, dtype=np.int64)
        if ids.shape != self.assignments.shape:
            raise ValueError("sample id count differs from plan size")
        return PartitionPlan(self.assignments, self.n_clients, self.strategy, self.alpha, self.seed, ids, dict(self.provenance))

    def to_text(self) -> str:
        alpha = "none" if self.alpha is None else repr(float(self.alpha))
        buf = io.StringIO()
        buf.write(f"# strategy={self.strategy} alpha={alpha} seed={self.seed} clients={self.n_clients}\n")
        order = np.argsort(self.sample_ids, kind="stable")
        for i in order:
            buf.write(f"{self.sample_ids[i]},{self.assignments[i]}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "PartitionPlan":
        lines = text.strip().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing plan header")
        header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        rows = np.array([[int(v) for v in line.split(",")] for line in lines[1:]], dtype=np.int64).reshape(-1, 2)
        alpha = None if header["alpha"] == "none" else float(header["alpha"])
        return cls(rows[:, 1], int(header["clients"]), header["strategy"], alpha, int(header["seed"]), rows[:, 0])

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _check_common(n: int, n_clients: int, alpha: Optional[float]) -> None:
    if n == 0:
        raise ValueError("nothing to partition")
    if n_clients < 1:
        raise ValueError("need at least one client")
    if alpha is not None and alpha <= 0:
        raise ValueError("alpha must be positive")


def _split_by_proportions(idx: np.ndarray, props: np.ndarray) -> List[np.ndarray]:
    cuts = (np.cumsum(props) * idx.size).astype(np.int64)[:-1]
    return np.split(idx, cuts)


def _dirichlet_allocate(
    groups: Sequence[np.ndarray],
    n: int,
    n_clients: int,
    alpha: float,
    seed: int,
    min_client_size: int,
    max_retries: int,
) -> np.ndarray:
    """Allocate each group (in order) by its own Dirichlet draw; later groups overwrite earlier ones."""
    if n_clients == 1:
        return np.zeros(n, dtype=np.int64)
    rng = _rng("dirichlet", seed)
    for _ in range(max_retries):
        assign = np.full(n, -1, dtype=np.int64)
        for idx in groups:
            props = rng.dirichlet(np.full(n_clients, alpha))
            idx = rng.permutation(idx)
            for client, part in enumerate(_split_by_proportions(idx, props)):
                assign[part] = client
        if np.bincount(assign, minlength=n_clients).min() >= min_client_size:
            return assign
    raise PartitionError(
        f"no draw gave every client >= {min_client_size} samples after {max_retries} tries; "
        "dataset too small for this skew"
    )


def dirichlet_partition(
    labels: Sequence[int],
    n_clients: int,
    alpha: float,
    seed: int,
    min_client_size: int = DEFAULT_MIN_CLIENT_SIZE,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> PartitionPlan:
    """Label skew: class k's samples are split across clients by p_k ~ Dir(alpha)."""
    labels = np.asarray(labels)
    _check_common(labels.size, n_clients, alpha)
    classes = np.unique(labels)
    groups = [np.flatnonzero(labels == k) for k in classes]
    assign = _dirichlet_allocate(groups, labels.size, n_clients, alpha, seed, min_client_size, max_retries)
    return PartitionPlan(assign, n_clients, "dirichlet", alpha, seed, provenance={"class_order": classes.tolist()})


def multilabel_dirichlet_partition(
    label_matrix: np.ndarray,
    n_clients: int,
    alpha: float,
    seed: int,
    min_client_size: int = DEFAULT_MIN_CLIENT_SIZE,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> PartitionPlan:
    """Each label column is allocated independently in ascending order; the last
    (highest-index) positive label of a sample decides its client. Rows without
    any positive are handled first under a reserved pseudo-label."""
    Y = np.asarray(label_matrix).astype(bool)
    if Y.ndim != 2:
        raise ValueError("label_matrix must be 2-D")
    _check_common(Y.shape[0], n_clients, alpha)
    groups = []
    order: List[int] = []
    empty = np.flatnonzero(~Y.any(axis=1))
    if empty.size:
        groups.append(empty)
        order.append(NO_FINDING)
    for k in range(Y.shape[1]):
        idx = np.flatnonzero(Y[:, k])
        if idx.size:
            groups.append(idx)
            order.append(k)
    assign = _dirichlet_allocate(groups, Y.shape[0], n_clients, alpha, seed, min_client_size, max_retries)
    return PartitionPlan(assign, n_clients, "multilabel_dirichlet", alpha, seed, provenance={"class_order": order})


def metadata_dirichlet_partition(
    metadata: Sequence,
    n_clients: int,
    alpha: float,
    seed: int,
    min_client_size: int = DEFAULT_MIN_CLIENT_SIZE,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> PartitionPlan:
    """Per metadata category, draw client shares from a symmetric Dirichlet whose
    total concentration is alpha * n_clients and allocate that category by them.

    The empirical category frequencies are recorded in the plan provenance.
    """
    meta = np.asarray(metadata)
    _check_common(meta.size, n_clients, alpha)
    cats, counts = np.unique(meta, return_counts=True)
    groups = [np.flatnonzero(meta == c) for c in cats]
    # total concentration alpha * n_clients spread evenly is alpha per client, so
    # with metadata equal to class labels this is exactly dirichlet_partition
    assign = _dirichlet_allocate(groups, meta.size, n_clients, alpha, seed, min_client_size, max_retries)
    prov = {
        "categories": [c.item() if hasattr(c, "item") else c for c in cats],
        "frequencies": (counts / meta.size).tolist(),
    }
    return PartitionPlan(assign, n_clients, "metadata_dirichlet", alpha, seed, provenance=prov)


def natural_partition(metadata: Sequence) -> PartitionPlan:
    """One client per distinct metadata value (sorted), e.g. one per contributing site."""
    meta = np.asarray(metadata)
    _check_common(meta.size, 1, None)
    cats, inverse = np.unique(meta, return_inverse=True)
    return PartitionPlan(inverse, len(cats), "natural", None, 0, provenance={"categories": cats.tolist()})


def iid_partition(labels: Sequence[int], n_clients: int, seed: int) -> PartitionPlan:
    """Stratified round-robin: each class is shuffled and dealt to clients in turn.

    The dealing position carries over between classes, so client sizes differ
    by at most one and each client holds floor or ceil of n_c / n_clients of
    every class c.
    """
    labels = np.asarray(labels)
    _check_common(labels.size, n_clients, None)
    rng = _rng("iid", seed)
    assign = np.zeros(labels.size, dtype=np.int64)
    offset = 0
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        assign[idx] = (offset + np.arange(idx.size)) % n_clients
        offset = (offset + idx.size) % n_clients
    return PartitionPlan(assign, n_clients, "iid", None, seed)


# -- pseudo-classes ---------------------------------------------------------

@dataclass
class PseudoClassLabels:
    labels: np.ndarray
    k: int
    source: str
    centers: np.ndarray
    sse: float


def kmeans_sse(X: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(labels):
        pts = X[labels == c]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def pseudo_classes_from_vectors(
    vectors: np.ndarray,
    k: int = 10,
    seed: int = 0,
    source: str = "embeddings",
    max_iter: int = 100,
    tol: float = 1e-6,
) -> PseudoClassLabels:
    """k-means with k-means++ seeding; clusters become pseudo-classes.

    ``source`` is ``"proportion_vectors"`` for normalised per-class counts or
    ``"embeddings"`` for feature embeddings; it only tags the result.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("vectors must be 2-D")
    if k < 2:
        raise ValueError("k must be at least 2")
    if np.unique(X, axis=0).shape[0] < k:
        raise ValueError(f"fewer than {k} distinct vectors")
    rng = _rng("kmeans", seed)
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        centers.append(X[rng.choice(n, p=d2 / d2.sum())])
        d2 = np.minimum(d2, _sq_dists(X, centers[-1][None, :])[:, 0])
    C = np.array(centers)
    for _ in range(max_iter):
        dist = _sq_dists(X, C)
        labels = dist.argmin(axis=1)
        new_C = C.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_C[c] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served by its center
                far = int(dist[np.arange(n), labels].argmax())
                new_C[c] = X[far]
                labels[far] = c
        shift = float(np.max(np.linalg.norm(new_C - C, axis=1)))
        C = new_C
        if shift <= tol:
            break
    labels = _sq_dists(X, C).argmin(axis=1)
    # final assignment can still strand a center on a duplicate; keep every pseudo-class non-empty
    for c in range(k):
        if not np.any(labels == c):
            dist = _sq_dists(X, C)
            counts = np.bincount(labels, minlength=k)
            candidates = np.flatnonzero(counts[labels] > 1)
            far = candidates[dist[candidates, labels[candidates]].argmax()]
            labels[far] = c
    return PseudoClassLabels(labels.astype(np.int64), k, source, C, kmeans_sse(X, labels))


# -- diagnostics --------------------------------------------------------------

@dataclass
class HeterogeneityReport:
    histograms: np.ndarray  # (n_clients, n_classes) counts
    mean_pairwise_tv: float
    client_sizes: np.ndarray
    classes: np.ndarray


def heterogeneity_stats(plan: PartitionPlan, labels: Sequence[int]) -> HeterogeneityReport:
    labels = np.asarray(labels)
    if labels.shape != plan.assignments.shape:
        raise ValueError("labels and plan cover different index sets")
    classes, y = np.unique(labels, return_inverse=True)
    hist = np.zeros((plan.n_clients, classes.size), dtype=np.int64)
    np.add.at(hist, (plan.assignments, y), 1)
    sizes = hist.sum(axis=1)
    dist = hist / np.maximum(sizes, 1)[:, None]
    tvs = [0.5 * np.abs(dist[a] - dist[b]).sum() for a, b in itertools.combinations(range(plan.n_clients), 2)]
    mean_tv = float(np.mean(tvs)) if tvs else 0.0
    return HeterogeneityReport(hist, mean_tv, sizes, classes)
