"""Command-line entry point: ``mmfedsim <generate|partition|run|baseline|report|selftest>``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import runner
from .partitioning import PartitionError
from .runner import ConfigError, ExperimentConfig
from .synthgen import generate, save_bundle, split
from .tensor_ops import NumericError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--algorithm", choices=runner.RUN_ALGORITHMS)
    p.add_argument("--partition", choices=runner.PARTITIONS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--clients", type=int, dest="n_clients")
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int, dest="local_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--task", choices=("multiclass", "multilabel", "retrieval"))
    p.add_argument("--seed-list", type=_seed_list, dest="seeds")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", type=Path, dest="out_dir")


def _resolve_config(args: argparse.Namespace, algorithm: Optional[str] = None) -> ExperimentConfig:
    raw = {}
    if args.config is not None:
        raw = ExperimentConfig.load(args.config).to_dict()
    for key in ("algorithm", "partition", "alpha", "n_clients", "rounds", "local_epochs", "batch_size", "seeds", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    if args.out_dir is not None:
        raw["out_dir"] = str(args.out_dir)
    if getattr(args, "task", None):
        raw.setdefault("dataset", {})["task"] = args.task
    if algorithm is not None:
        raw["algorithm"] = algorithm
    return ExperimentConfig.from_dict(raw)


def _default_out(cfg: ExperimentConfig) -> Path:
    alpha = "iid" if cfg.partition == "iid" or cfg.alpha is None else f"a{cfg.alpha:g}"
    return runner.default_output_root() / f"{cfg.algorithm}_{cfg.dataset.task}_{cfg.partition}_{alpha}_c{cfg.n_clients}"


def cmd_run(args, algorithm: Optional[str] = None) -> int:
    cfg = _resolve_config(args, algorithm)
    out = Path(cfg.out_dir) if cfg.out_dir else _default_out(cfg)
    result = runner.run_experiment(cfg, out)
    for name, cell in sorted(result.summary["metrics"].items()):
        print(f"{cfg.algorithm} {name}: {cell['mean']:.3f} ± {cell['std']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    ds = dataclasses.replace(cfg.dataset, seed=cfg.dataset.seed + cfg.seeds[0])
    bundle = split(generate(ds), cfg.val_frac, cfg.test_frac, cfg.seeds[0])
    out = save_bundle(bundle, args.out_dir or runner.default_output_root() / "data")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _resolve_config(args)
    seed = cfg.seeds[0]
    data = runner.prepare(cfg, seed)
    target = args.out_dir or runner.default_output_root() / "partition.txt"
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    data.plan.save(target)
    sizes = data.plan.client_sizes().tolist()
    print(f"{cfg.partition} plan over {data.plan.n_samples} samples, client sizes {sizes}; wrote {target}")
    return EXIT_OK


def cmd_report(args) -> int:
    text, _ = runner.report(args.runs, args.out_dir)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = run_all(print)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfedsim", description="Multimodal federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a synthetic dataset bundle"),
        ("partition", "write the client partition of the training pool"),
        ("run", "run a federated experiment"),
        ("baseline", "run the centralised baseline"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p)
    p = sub.add_parser("report", help="summarise finished runs")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, dest="out_dir")
    sub.add_parser("selftest", help="run the built-in gradient and reduction oracles")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {
        "generate": cmd_generate,
        "partition": cmd_partition,
        "run": cmd_run,
        "baseline": lambda a: cmd_run(a, "centralized"),
        "report": cmd_report,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
