"""Synthetic multimodal datasets with class, multi-label, retrieval and metadata structure.

Samples share a latent vector: the sum of the prototypes of their active
classes plus within-class noise. Modality m sees ``latent @ A_m`` plus
observation noise. Prototypes and mixing matrices come from a "structure"
stream that depends only on the seed, so a public set drawn later from the
same config shares the distribution but none of the samples.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .models import Batch

_STRUCTURE, _SAMPLES, _PUBLIC, _SPLIT = 21, 22, 23, 24


@dataclass
class SyntheticConfig:
    n_samples: int = 3000
    n_modalities: int = 3
    modality_dims: Tuple[int, ...] = (20, 16, 12)
    latent_dim: int = 8
    task: str = "multiclass"
    n_classes: int = 6  # K for multiclass, L for multilabel, hidden clusters for retrieval
    label_rates: Optional[Tuple[float, ...]] = None  # multilabel base rates, default 0.2 each
    within_class_noise: float = 0.25
    observation_noise: float = 0.25
    metadata_categories: Optional[int] = 4
    metadata_correlation: float = 0.8
    shared_mixing: bool = False
    seed: int = 0

    def __post_init__(self):
        self.modality_dims = tuple(int(d) for d in self.modality_dims)
        if self.label_rates is not None:
            self.label_rates = tuple(float(r) for r in self.label_rates)
        self.validate()

    def validate(self) -> None:
        if self.task not in ("multiclass", "multilabel", "retrieval"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 2 <= self.n_modalities <= 4:
            raise ValueError("n_modalities must be in [2, 4]")
        if len(self.modality_dims) != self.n_modalities or min(self.modality_dims) <= 0:
            raise ValueError("need one positive dimension per modality")
        if self.n_samples < 1 or self.latent_dim < 1:
            raise ValueError("n_samples and latent_dim must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes/labels")
        if self.within_class_noise < 0 or self.observation_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.label_rates is not None and len(self.label_rates) != self.n_classes:
            raise ValueError("one base rate per label")
        if not 0.0 <= self.metadata_correlation <= 1.0:
            raise ValueError("metadata_correlation must lie in [0, 1]")


@dataclass
class DatasetBundle:
    config: SyntheticConfig
    modalities: List[np.ndarray]
    labels: Optional[np.ndarray]  # (n,) int, (n, L) 0/1, or None for retrieval
    metadata: Optional[np.ndarray]
    latent: np.ndarray
    groups: np.ndarray  # the class that drove each sample's latent (first active for multilabel)
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_samples(self) -> int:
        return self.modalities[0].shape[0]

    def batch(self, idx: np.ndarray) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch([x[idx] for x in self.modalities], None if self.labels is None else self.labels[idx])

    def stratify_key(self) -> Optional[np.ndarray]:
        if self.config.task == "multiclass":
            return self.labels
        return None


def _structure(config: SyntheticConfig):
    rng = np.random.default_rng([config.seed, _STRUCTURE])
    protos = rng.standard_normal((config.n_classes, config.latent_dim))
    if config.shared_mixing:
        if len(set(config.modality_dims)) != 1:
            raise ValueError("shared mixing needs equal modality dims")
        A = rng.standard_normal((config.latent_dim, config.modality_dims[0])) / np.sqrt(config.latent_dim)
        mixing = [A] * config.n_modalities
    else:
        mixing = [rng.standard_normal((config.latent_dim, d)) / np.sqrt(config.latent_dim) for d in config.modality_dims]
    return protos, mixing


def _draw(config: SyntheticConfig, n: int, stream: int) -> DatasetBundle:
    protos, mixing = _structure(config)
    rng = np.random.default_rng([config.seed, stream])
    K = config.n_classes
    if config.task == "multilabel":
        rates = np.asarray(config.label_rates if config.label_rates is not None else [0.2] * K)
        labels = (rng.random((n, K)) < rates).astype(np.int64)
        latent = labels @ protos
        groups = np.where(labels.any(axis=1), labels.argmax(axis=1), K)
    else:
        groups = rng.integers(0, K, size=n)
        latent = protos[groups]
        labels = groups.copy() if config.task == "multiclass" else None
    latent = latent + config.within_class_noise * rng.standard_normal((n, config.latent_dim))
    modalities = [latent @ A + config.observation_noise * rng.standard_normal((n, A.shape[1])) for A in mixing]
    metadata = None
    if config.metadata_categories:
        G = config.metadata_categories
        tied = rng.random(n) < config.metadata_correlation
        metadata = np.where(tied, groups % G, rng.integers(0, G, size=n)).astype(np.int64)
    return DatasetBundle(config, modalities, labels, metadata, latent, groups.astype(np.int64))


def generate(config: SyntheticConfig) -> DatasetBundle:
    """Draw ``config.n_samples`` samples; deterministic in the config."""
    config.validate()
    return _draw(config, config.n_samples, _SAMPLES)


def generate_public(config: SyntheticConfig, n: int = 200) -> DatasetBundle:
    """Fresh samples from the same class prototypes and mixing matrices."""
    return _draw(config, n, _PUBLIC)


def _apportion(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder integer allocation of ``total`` proportional to ``counts``."""
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - base.sum()
    order = np.lexsort((np.arange(counts.size), -(exact - base)))
    base[order[:short]] += 1
    return base


def split(bundle: DatasetBundle, val_frac: float = 0.1, test_frac: float = 0.1, seed: int = 0) -> DatasetBundle:
    """Carve out validation and test sets; stratified by class for multiclass data."""
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise ValueError("fractions must lie in (0, 1) and sum to less than 1")
    n = bundle.n_samples
    n_val, n_test = int(round(val_frac * n)), int(round(test_frac * n))
    if n_val == 0 or n_test == 0 or n_val + n_test >= n:
        raise ValueError("degenerate split for this dataset size")
    rng = np.random.default_rng([seed, _SPLIT])
    key = bundle.stratify_key()
    if key is None:
        perm = rng.permutation(n)
        val, test, train = perm[:n_val], perm[n_val:n_val + n_test], perm[n_val + n_test:]
    else:
        classes, counts = np.unique(key, return_counts=True)
        val_counts = _apportion(counts, n_val)
        test_counts = _apportion(counts, n_test)
        val, test, train = [], [], []
        for k, nv, nt in zip(classes, val_counts, test_counts):
            idx = rng.permutation(np.flatnonzero(key == k))
            val.append(idx[:nv])
            test.append(idx[nv:nv + nt])
            train.append(idx[nv + nt:])
        val, test, train = (np.concatenate(x) for x in (val, test, train))
    bundle.val_idx = np.sort(val).astype(np.int64)
    bundle.test_idx = np.sort(test).astype(np.int64)
    bundle.train_idx = np.sort(train).astype(np.int64)
    return bundle


# -- on-disk layout -----------------------------------------------------------
#   provenance.json   generator config + split sizes
#   modality_<m>.csv  one row per sample, comma separated, %.17g
#   labels.csv        class id, or 0/1 row for multilabel (absent for retrieval)
#   metadata.csv      one category per line (absent when disabled)
#   splits.csv        "index,split" with split in {train,val,test}

def save_bundle(bundle: DatasetBundle, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    prov = {
        "config": asdict(bundle.config),
        "n_samples": bundle.n_samples,
        "splits": {"train": int(bundle.train_idx.size), "val": int(bundle.val_idx.size), "test": int(bundle.test_idx.size)},
    }
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for m, x in enumerate(bundle.modalities):
        np.savetxt(out / f"modality_{m}.csv", x, fmt="%.17g", delimiter=",")
    if bundle.labels is not None:
        np.savetxt(out / "labels.csv", np.atleast_2d(bundle.labels.T).T, fmt="%d", delimiter=",")
    if bundle.metadata is not None:
        np.savetxt(out / "metadata.csv", bundle.metadata, fmt="%d")
    rows = [(int(i), name) for name, idx in (("train", bundle.train_idx), ("val", bundle.val_idx), ("test", bundle.test_idx)) for i in idx]
    rows.sort()
    (out / "splits.csv").write_text("".join(f"{i},{s}\n" for i, s in rows), encoding="utf-8")
    return out


def load_bundle(directory) -> DatasetBundle:
    src = Path(directory)
    prov = json.loads((src / "provenance.json").read_text(encoding="utf-8"))
    config = SyntheticConfig(**prov["config"])
    modalities = [np.atleast_2d(np.loadtxt(src / f"modality_{m}.csv", delimiter=",")) for m in range(config.n_modalities)]
    labels = None
    if (src / "labels.csv").exists():
        labels = np.loadtxt(src / "labels.csv", delimiter=",", dtype=np.int64)
    metadata = np.loadtxt(src / "metadata.csv", dtype=np.int64) if (src / "metadata.csv").exists() else None
    # latent/groups are not persisted; regenerate them from the config
    ref = generate(config)
    bundle = DatasetBundle(config, modalities, labels, metadata, ref.latent, ref.groups)
    splits: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
    text = (src / "splits.csv").read_text(encoding="utf-8").strip()
    for line in text.splitlines() if text else []:
        i, s = line.split(",")
        splits[s].append(int(i))
    bundle.train_idx, bundle.val_idx, bundle.test_idx = (np.array(splits[s], dtype=np.int64) for s in ("train", "val", "test"))
    return bundle
