"""Command line: ``kprnn {plan,train,eval,bench,analyze}``."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import warnings
from pathlib import Path

from .analysis import analyze_operator
from .archive import ArchiveError, load_archive, save_archive
from .baselines import PruneSchedule
from .cells import OPERATOR_KINDS, CellSpec
from .datasets import DatasetParseError, load_dataset
from .kron import plan_factor_shapes
from .operators import StackedOperator
from .train import TrainConfig, TrainingDiverged, evaluate, train_model

log = logging.getLogger("kprnn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def experiment_config(config: dict) -> dict:
    """The part of a resolved config that determines results (everything but the output dir)."""
    return {k: v for k, v in config.items() if k != "output_dir"}


def config_hash(config: dict) -> str:
    canonical = json.dumps(experiment_config(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_experiment_config(path, seed=None, operator=None, out=None) -> dict:
    """Read a JSON experiment config and apply command-line overrides.

    Relative dataset paths resolve against the config file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    try:
        cfg = json.loads(path.read_text())
    except ValueError as exc:
        raise CliError(f"invalid JSON in {path}: {exc}", EXIT_USAGE) from None
    cfg = copy.deepcopy(cfg)
    for key in ("cell", "dataset"):
        if key not in cfg:
            raise CliError(f"config is missing the {key!r} section", EXIT_USAGE)
    cfg.setdefault("train", {})
    if seed is not None:
        cfg["seed"] = seed
    cfg["seed"] = int(cfg.get("seed", cfg["train"].get("seed", 0)))
    cfg["train"]["seed"] = cfg["seed"]
    if operator is not None:
        cfg["cell"]["operator"] = operator
    if out is not None:
        cfg["output_dir"] = str(out)
    cfg.setdefault("output_dir", "run")
    ds = cfg["dataset"]
    for key in ("path", "labels_path"):
        if ds.get(key) is not None:
            p = Path(ds[key])
            if not p.is_absolute():
                p = path.parent / p
            if not p.exists():
                raise CliError(f"dataset file not found: {p}", EXIT_USAGE)
            ds[key] = str(p)
    if ds.get("path") is None:
        raise CliError("dataset section needs a path", EXIT_USAGE)
    return cfg


def _train_config(section: dict) -> TrainConfig:
    section = dict(section)
    sched = section.pop("prune_schedule", None)
    if sched is not None:
        section["prune_schedule"] = PruneSchedule(**sched)
    try:
        return TrainConfig(**section)
    except TypeError as exc:
        raise CliError(f"bad train section: {exc}", EXIT_USAGE) from None


def _load_data(ds: dict):
    kwargs = {k: v for k, v in ds.items() if k not in ("path", "format", "labels_path")}
    try:
        return load_dataset(ds["path"], ds.get("format", "csv"), ds.get("labels_path"), **kwargs)
    except FileNotFoundError as exc:
        raise CliError(f"dataset file not found: {exc.filename}", EXIT_USAGE) from None
    except (DatasetParseError, ValueError, TypeError) as exc:
        raise CliError(f"cannot load dataset: {exc}") from None


def cmd_plan(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plan = plan_factor_shapes(args.m, args.n, args.strategy)
    if args.json:
        print(json.dumps(plan.as_dict(), sort_keys=True))
    else:
        print(f"{plan.target_rows} x {plan.target_cols} -> {plan.shape1} (x) {plan.shape2}: "
              f"{plan.cost} parameters, compression {float(plan.compression):.2f}x "
              f"(exact {plan.compression})")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config, args.seed, args.operator, args.out)
    digest = config_hash(cfg)
    try:
        spec = CellSpec(**cfg["cell"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad cell section: {exc}", EXIT_USAGE) from None
    tc = _train_config(cfg["train"])
    data = _load_data(cfg["dataset"])
    if len(data) == 0:
        raise CliError("training dataset is empty")
    if data.n_features != spec.input_size:
        raise CliError(f"dataset has {data.n_features} features per step but the cell expects "
                       f"{spec.input_size}")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = train_model(spec, data, tc, cfg.get("n_classes"))
    except TrainingDiverged as exc:
        if exc.model is not None:
            save_archive(out / "last_good.kpa", exc.model, exc.history,
                         {"config_hash": digest, "seed": cfg["seed"], "diverged": True})
        raise CliError(f"training diverged: {exc}") from None
    meta = {"config_hash": digest, "seed": cfg["seed"], "config": experiment_config(cfg)}
    save_archive(out / "model.kpa", model, history, meta)
    lines = [f"# config_hash={digest}", f"# seed={cfg['seed']}", "epoch,loss,accuracy"]
    lines += [f"{r['epoch']},{r['loss']!r},{r['accuracy']!r}" for r in history]
    _atomic_write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    _atomic_write_text(out / "config.json",
                       json.dumps(dict(cfg, config_hash=digest), sort_keys=True, indent=2) + "\n")
    final = history[-1]
    print(f"epoch {final['epoch']}: loss {final['loss']:.6f} accuracy {final['accuracy']:.2f}")
    print(f"wrote {out / 'model.kpa'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _open_archive(path):
    if not Path(path).is_file():
        raise CliError(f"archive not found: {path}", EXIT_USAGE)
    try:
        return load_archive(path)
    except (ArchiveError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read archive {path}: {exc}") from None


def cmd_eval(args) -> int:
    model, manifest = _open_archive(args.archive)
    ds = {"path": args.data, "format": args.format, "labels_path": args.labels}
    if not Path(args.data).exists():
        raise CliError(f"dataset file not found: {args.data}", EXIT_USAGE)
    data = _load_data(ds)
    if len(data) == 0:
        raise CliError("evaluation dataset is empty")
    if data.n_features != model.spec.input_size:
        raise CliError(f"dataset has {data.n_features} features, model expects {model.spec.input_size}")
    loss, acc = evaluate(model, data)
    if args.json:
        print(json.dumps({"accuracy": acc, "loss": loss,
                          "config_hash": manifest["metadata"].get("config_hash"),
                          "seed": manifest["metadata"].get("seed")}, sort_keys=True))
    else:
        print(f"accuracy: {acc:.2f}")
    return EXIT_OK


def analyze_records(model, manifest) -> list[dict]:
    meta = manifest.get("metadata", {})
    records = []
    for prefix, cell in zip(("fwd", "bwd"), model.cells):
        ops = cell.op.blocks if isinstance(cell.op, StackedOperator) else [cell.op]
        for i, op in enumerate(ops):
            label = f"{prefix}.op" if len(ops) == 1 else f"{prefix}.op.{i}"
            rec = analyze_operator(op, label).as_dict()
            rec.update(operator=op.kind, config_hash=meta.get("config_hash"), seed=meta.get("seed"))
            records.append(rec)
    return records


def cmd_analyze(args) -> int:
    model, manifest = _open_archive(args.archive)
    lines = [json.dumps(r, sort_keys=True) for r in analyze_records(model, manifest)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_sizes(text):
    sizes = []
    for item in text.split(","):
        try:
            m, n = item.lower().split("x")
            sizes.append((int(m), int(n)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {item!r}; expected MxN") from None
    return sizes


def cmd_bench(args) -> int:
    from . import bench
    import numpy as np

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"seed": args.seed, "config_hash": config_hash(vars_for_hash(args))}
    results = []
    if args.aa:
        report = bench.aa_test(reps=args.reps, seed=args.seed)
        report.update(extra)
        print(json.dumps(report, sort_keys=True))
        _atomic_write_text(out / "aa.json", json.dumps(report, sort_keys=True) + "\n")
        return EXIT_OK
    suites = {args.suite} if args.suite != "all" else {"matvec", "chain", "cells"}
    if args.factors is not None:
        suites = {"chain"}
    dtype = np.float32 if args.dtype == "float32" else np.float64
    if "matvec" in suites:
        results += bench.matvec_suite(args.sizes, reps=args.reps, seed=args.seed, dtype=dtype)
    if "chain" in suites:
        counts = [args.factors] if args.factors is not None else range(4, 9)
        results += bench.chain_suite(factor_counts=counts, reps=max(args.reps, 30), seed=args.seed)
    if "cells" in suites:
        results += bench.cell_step_suite(bench.BENCHMARK_PRESETS, reps=args.reps, seed=args.seed)
    table = bench.format_table(results)
    bench.write_jsonl(results, out / "results.jsonl", extra)
    _atomic_write_text(out / "table.txt",
                       f"# config_hash={extra['config_hash']}\n# seed={args.seed}\n{table}\n")
    print(table)
    return EXIT_OK


def vars_for_hash(args) -> dict:
    return {k: (str(v) if not isinstance(v, (int, float, str, type(None))) else v)
            for k, v in sorted(vars(args).items()) if k not in ("func", "out", "verbose")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kprnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="choose Kronecker factor shapes for an m x n matrix")
    sp.add_argument("m", type=int)
    sp.add_argument("n", type=int)
    sp.add_argument("--strategy", choices=("exhaustive", "greedy"), default="exhaustive")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", help="train a sequence classifier from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--operator", choices=OPERATOR_KINDS)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of an archived model on a dataset")
    sp.add_argument("archive")
    sp.add_argument("--data", required=True)
    sp.add_argument("--format", choices=("csv", "idx"), default="csv")
    sp.add_argument("--labels", help="IDX label file")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="relative runtime of matvec kernels and cell steps")
    sp.add_argument("--suite", choices=("all", "matvec", "chain", "cells"), default="all")
    sp.add_argument("--sizes", type=_parse_sizes, default=[(256, 256), (512, 512), (1024, 512), (1024, 1024)])
    sp.add_argument("--factors", type=int, help="run only the chain suite with this many factors")
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    sp.add_argument("--aa", action="store_true", help="A/A stability check of the harness")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="bench-out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("analyze", help="spectral report of every weight operator in an archive")
    sp.add_argument("archive")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"kprnn {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"kprnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
