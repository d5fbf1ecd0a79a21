"""Experiment orchestration: data, partition, rounds, evaluation and reporting."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import fl_core, metrics, partitioning
from .models import Batch, MultimodalModelSpec, build_model_spec, forward
from .synthgen import DatasetBundle, SyntheticConfig, generate, generate_public, split
from .tensor_ops import NumericError

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MMFEDSIM_OUTPUT_ROOT"
RUN_ALGORITHMS = fl_core.ALGORITHMS + ("centralized",)
PARTITIONS = ("iid", "dirichlet", "multilabel_dirichlet", "metadata_dirichlet", "natural")
CSV_HEADER = ["seed", "round", "split", "metric", "value", "wall_ms"]
PRIMARY_METRIC = {"multiclass": "accuracy", "multilabel": "macro_auc", "retrieval": "accuracy"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "fedavg"
    n_clients: int = 3
    rounds: int = 30
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    sgd_learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    mu_fedprox: float = 0.1
    mu_moon: float = 0.1
    tau_moon: float = 0.5
    gamma_creamfl: float = 0.002
    alpha_creamfl: float = 0.03
    grad_scale: float = 1.0
    distill_epochs: int = 3
    inter_denominator: str = "as_printed"
    alignment_temperature: float = 0.07
    partition: str = "iid"
    alpha: Optional[float] = None
    min_client_size: int = 10
    pseudo_classes: int = 10
    dataset: SyntheticConfig = field(default_factory=SyntheticConfig)
    val_frac: float = 0.1
    test_frac: float = 0.1
    public_size: int = 200
    hidden: int = 32
    projection_dim: int = 16
    head_hidden: int = 32
    activation: str = "relu"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: Optional[str] = None
    threads: int = 1
    record_wall_time: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in RUN_ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {RUN_ALGORITHMS}")
        if self.rounds < 1 or self.local_epochs < 1 or self.n_clients < 1:
            raise ConfigError("rounds, local_epochs and n_clients must be >= 1")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition must be one of {PARTITIONS}")
        if self.algorithm != "centralized" and self.partition not in ("iid", "natural"):
            if self.alpha is None or self.alpha <= 0:
                raise ConfigError(f"partition {self.partition} needs a positive alpha")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.fl_config()
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def fl_config(self) -> fl_core.FLConfig:
        names = {f.name for f in dataclasses.fields(fl_core.FLConfig)}
        return fl_core.FLConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["modality_dims"] = list(self.dataset.modality_dims)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        ds = raw.pop("dataset", {})
        if isinstance(ds, dict):
            ds_known = {f.name for f in dataclasses.fields(SyntheticConfig)}
            bad = set(ds) - ds_known
            if bad:
                raise ConfigError(f"unknown dataset keys: {sorted(bad)}")
            try:
                ds = SyntheticConfig(**ds)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        try:
            cfg = cls(dataset=ds, **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


@dataclass
class RoundReport:
    seed: int
    round: int
    val: Dict[str, float]
    test: Dict[str, float]
    wall_ms: float
    client_losses: Dict[int, float]
    final: bool = False


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: List[RoundReport]
    summary: dict
    out_dir: Optional[Path] = None


# -- data preparation -----------------------------------------------------------

@dataclass
class PreparedData:
    bundle: DatasetBundle
    spec: MultimodalModelSpec
    client_data: List[Batch]
    plan: Optional[partitioning.PartitionPlan]
    public: Optional[Batch]


def make_spec(cfg: ExperimentConfig) -> MultimodalModelSpec:
    ds = cfg.dataset
    return build_model_spec(
        ds.modality_dims, ds.task, ds.n_classes, hidden=cfg.hidden, projection_dim=cfg.projection_dim,
        head_hidden=cfg.head_hidden, activation=cfg.activation,
    )


def _partition_key(cfg: ExperimentConfig, bundle: DatasetBundle, idx: np.ndarray, seed: int) -> np.ndarray:
    """Per-sample stratum used by label-skew partitioners."""
    task = cfg.dataset.task
    if task == "multiclass":
        return bundle.labels[idx]
    if task == "multilabel":
        Y = bundle.labels[idx]
        # highest-index positive label, matching the last-class-wins rule; -1 if none
        return np.where(Y.any(axis=1), Y.shape[1] - 1 - np.argmax(Y[:, ::-1], axis=1), -1)
    feats = np.concatenate([x[idx] for x in bundle.modalities], axis=1)
    k = min(cfg.pseudo_classes, idx.size)
    return partitioning.pseudo_classes_from_vectors(feats, k, seed).labels


def partition_rem(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int) -> partitioning.PartitionPlan:
    idx = bundle.train_idx
    n, a, mcs = cfg.n_clients, cfg.alpha, cfg.min_client_size
    if cfg.partition == "natural":
        if bundle.metadata is None:
            raise ConfigError("natural partition needs a metadata column")
        plan = partitioning.natural_partition(bundle.metadata[idx])
    elif cfg.partition == "metadata_dirichlet":
        if bundle.metadata is None:
            raise ConfigError("metadata partition needs a metadata column")
        plan = partitioning.metadata_dirichlet_partition(bundle.metadata[idx], n, a, seed, mcs)
    elif cfg.partition == "multilabel_dirichlet":
        if cfg.dataset.task != "multilabel":
            raise ConfigError("multilabel_dirichlet needs multilabel data")
        plan = partitioning.multilabel_dirichlet_partition(bundle.labels[idx], n, a, seed, mcs)
    elif cfg.partition == "dirichlet":
        plan = partitioning.dirichlet_partition(_partition_key(cfg, bundle, idx, seed), n, a, seed, mcs)
    else:
        plan = partitioning.iid_partition(_partition_key(cfg, bundle, idx, seed), n, seed)
    return plan.with_sample_ids(idx)


def prepare(cfg: ExperimentConfig, seed: int, pooled: bool = False) -> PreparedData:
    ds = dataclasses.replace(cfg.dataset, seed=cfg.dataset.seed + seed)
    bundle = split(generate(ds), cfg.val_frac, cfg.test_frac, seed)
    spec = make_spec(cfg)
    if pooled:
        return PreparedData(bundle, spec, [bundle.batch(bundle.train_idx)], None, None)
    plan = partition_rem(cfg, bundle, seed)
    client_data = [bundle.batch(ids) for ids in plan.client_indices()]
    public = None
    if cfg.algorithm == "creammfl":
        pub = generate_public(ds, cfg.public_size)
        public = pub.batch(np.arange(pub.n_samples))
    return PreparedData(bundle, spec, client_data, plan, public)


# -- evaluation ---------------------------------------------------------------------

def evaluate(spec: MultimodalModelSpec, params: np.ndarray, batch: Batch) -> Dict[str, float]:
    """Task metrics in [0, 1]."""
    fwd = forward(spec, params, batch.inputs, with_head=spec.task != "retrieval")
    if spec.task == "retrieval":
        query = np.sum(fwd.z[1:], axis=0)
        return {"accuracy": metrics.retrieval_top1(query, fwd.z[0]).value}
    if spec.task == "multiclass":
        logits = fwd.logits
        pred = logits.argmax(axis=1)
        out = {
            "accuracy": metrics.accuracy(pred, batch.labels).value,
            "f1": metrics.f1(pred, batch.labels, "macro").value,
        }
        try:
            out["macro_auc"] = metrics.macro_auc(logits, batch.labels).value
        except ValueError:
            pass
        return out
    pred = (fwd.logits > 0).astype(np.int64)
    out = {"f1": metrics.f1(pred, batch.labels, "macro").value}
    try:
        out["macro_auc"] = metrics.macro_auc(fwd.logits, batch.labels).value
    except ValueError:
        pass
    return out


def majority_baseline(bundle: DatasetBundle) -> float:
    """Test accuracy of always predicting the most frequent training class."""
    train = bundle.labels[bundle.train_idx]
    top = np.bincount(train).argmax()
    return float(np.mean(bundle.labels[bundle.test_idx] == top))


# -- running ----------------------------------------------------------------------

def _run_seed(cfg: ExperimentConfig, seed: int) -> List[RoundReport]:
    centralized = cfg.algorithm == "centralized"
    data = prepare(cfg, seed, pooled=centralized)
    spec, bundle = data.spec, data.bundle
    val, test = bundle.batch(bundle.val_idx), bundle.batch(bundle.test_idx)
    reports: List[RoundReport] = []
    clock = [time.perf_counter()]

    def record(r: int, params: np.ndarray, losses: Dict[int, float]):
        final = r == cfg.rounds
        now = time.perf_counter()
        wall = (now - clock[0]) * 1000.0 if cfg.record_wall_time else 0.0
        clock[0] = now
        reports.append(RoundReport(seed, r, evaluate(spec, params, val), evaluate(spec, params, test) if final else {}, wall, losses, final))

    if centralized:
        fl_core.centralized_train(
            spec, cfg.fl_config(), data.client_data[0], seed, cfg.rounds,
            on_block=lambda b, p: record(b + 1, p, {}),
        )
        return reports
    fed = fl_core.create_federation(cfg.algorithm, spec, cfg.fl_config(), data.client_data, seed, data.public)
    for r in range(1, cfg.rounds + 1):
        try:
            _, logs = fl_core.run_round(fed, cfg.threads)
        except NumericError as exc:
            raise NumericError(f"seed {seed}: {exc}") from exc
        record(r, fed.server.params, {l.client_id: l.mean_loss for l in logs})
    return reports


def summarize(cfg: ExperimentConfig, reports: Sequence[RoundReport]) -> dict:
    finals = [r for r in reports if r.final]
    names = sorted({k for r in finals for k in r.test})
    table = {}
    for name in names:
        vals = [100.0 * r.test[name] for r in finals if name in r.test]
        table[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
    return {
        "algorithm": cfg.algorithm,
        "task": cfg.dataset.task,
        "partition": "pooled" if cfg.algorithm == "centralized" else cfg.partition,
        "alpha": None if cfg.algorithm == "centralized" or cfg.partition == "iid" else cfg.alpha,
        "n_clients": 1 if cfg.algorithm == "centralized" else cfg.n_clients,
        "seeds": list(cfg.seeds),
        "primary_metric": PRIMARY_METRIC[cfg.dataset.task],
        "metrics": table,
    }


def _fmt(v: float) -> str:
    return format(v, ".6f")


def metrics_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        for split_name, vals in (("val", r.val), ("test", r.test)):
            for name in sorted(vals):
                w.writerow([r.seed, r.round, split_name, name, _fmt(100.0 * vals[name]), _fmt(r.wall_ms)])
    return buf.getvalue()


def client_log_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "round", "client", "mean_loss"])
    for r in reports:
        for cid in sorted(r.client_losses):
            w.writerow([r.seed, r.round, cid, format(r.client_losses[cid], ".10g")])
    return buf.getvalue()


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.reports), encoding="utf-8")
    (out / "client_log.csv").write_text(client_log_csv(result.reports), encoding="utf-8")
    (out / "provenance.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result.out_dir = out
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run every seed of ``cfg`` sequentially; writes outputs when a directory is given."""
    cfg.validate()
    reports: List[RoundReport] = []
    for seed in cfg.seeds:
        log.info("%s seed %d", cfg.algorithm, seed)
        reports.extend(_run_seed(cfg, seed))
    result = ExperimentResult(cfg, reports, summarize(cfg, reports))
    target = out_dir or cfg.out_dir
    if target is not None:
        write_outputs(result, target)
    return result


def run_centralized(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    return run_experiment(dataclasses.replace(cfg, algorithm="centralized"), out_dir)


# -- reporting ---------------------------------------------------------------------

def _setting_key(s: dict) -> Tuple:
    return (s["task"], s["partition"], "" if s["alpha"] is None else s["alpha"], s["n_clients"])


def report(run_dirs: Sequence, out_dir=None) -> Tuple[str, dict]:
    """Summary table over finished runs; best per (setting, metric) gets '*', runner-up '^'."""
    runs, missing = [], []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if p.exists():
            runs.append(json.loads(p.read_text(encoding="utf-8")))
        else:
            missing.append(str(d))
    settings: Dict[Tuple, List[dict]] = {}
    for s in runs:
        settings.setdefault(_setting_key(s), []).append(s)
    rows, marks = [], {}
    for key in sorted(settings, key=lambda k: tuple(str(x) for x in k)):
        group = sorted(settings[key], key=lambda s: s["algorithm"])
        metric_names = sorted({m for s in group for m in s["metrics"]})
        for m in metric_names:
            ranked = sorted(
                (s["metrics"][m]["mean"], s["algorithm"]) for s in group if m in s["metrics"]
            )
            ranked.reverse()
            if ranked:
                marks[(key, m, ranked[0][1])] = "*"
            if len(ranked) > 1 and ranked[1][0] < ranked[0][0]:
                marks[(key, m, ranked[1][1])] = "^"
        for s in group:
            cells = []
            for m in metric_names:
                if m in s["metrics"]:
                    c = s["metrics"][m]
                    cells.append(f"{m}={c['mean']:.2f}±{c['std']:.2f}{marks.get((key, m, s['algorithm']), '')}")
            rows.append([key[0], key[1], str(key[2]), str(key[3]), s["algorithm"], "  ".join(cells)])
    header = ["task", "partition", "alpha", "clients", "algorithm", "test metrics (mean±std, x100)"]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    if missing:
        lines.append("")
        lines.append("missing or incomplete runs: " + ", ".join(missing))
    text = "\n".join(lines) + "\n"
    machine = {
        "rows": [
            {"setting": list(k), "algorithm": s["algorithm"], "metrics": s["metrics"],
             "marks": {m: marks.get((k, m, s["algorithm"]), "") for m in s["metrics"]}}
            for k, g in sorted(settings.items(), key=lambda kv: tuple(str(x) for x in kv[0])) for s in g
        ],
        "missing": missing,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(machine, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_plot_data(run_dirs, out / "plot_data.csv")
    return text, machine


def _write_plot_data(run_dirs: Sequence, path: Path) -> None:
    """Per-round validation curves (mean over seeds) for every run and metric."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["run", "round", "metric", "mean_value"])
    for d in run_dirs:
        p = Path(d) / "metrics.csv"
        if not p.exists():
            continue
        acc: Dict[Tuple[int, str], List[float]] = {}
        with p.open(encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["split"] == "val":
                    acc.setdefault((int(row["round"]), row["metric"]), []).append(float(row["value"]))
        for (r, m) in sorted(acc):
            w.writerow([Path(d).name, r, m, _fmt(float(np.mean(acc[(r, m)])))])
    path.write_text(out.getvalue(), encoding="utf-8")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
