"""``autoft`` command-line entry point.

Every command takes an optional ``--config FILE`` (see :mod:`autoft.config`)
and repeated ``--set section.key=value`` overrides. Dedicated flags such as
``--seed`` win over both. Failures print one line to stderr::

    error: <category>: <message>

with exit code 2 for configuration problems, 3 for data problems and 4 for a
vocabulary mismatch between a checkpoint and the data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from . import synth
from .dcn import DcnParams
from .errors import AutoFTError, ConfigError, DataError
from .evaluation import absent_runs, results_table, routing_fractions, table_csv, table_text
from .features import Schema, Vocabulary
from .pipeline import Datasets, encode_rows, load_rows, vocab_from_rows
from .policy import AutoftModel, write_route_dump
from .training import (POLICIES_BY_STAGE, RunConfig, RunResult, Stage, evaluate_model, method_name,
                       run_autoft, run_finetune, run_pretrain)


RUN_FILES = ("config.ini", "run.json", "metrics.jsonl", "checkpoint.bin", "routes.csv", "vocab.json")
AUTOFT_STAGES = [s.value for s in POLICIES_BY_STAGE]


# -- config resolution ---------------------------------------------------------------

def _resolve(args, **train_flags) -> cfgmod.CliConfig:
    overrides = cfgmod.parse_overrides(args.set or [])
    data = overrides.setdefault("data", {})
    for key in ("data_dir", "schema", "vocab"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    train = overrides.setdefault("train", {})
    if getattr(args, "seed", None) is not None:
        train["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = str(args.epochs)
    for key, value in train_flags.items():
        if value is not None:
            train[key] = str(value)
    return cfgmod.load_file(args.config, overrides)


def _load_data(cfg: cfgmod.CliConfig) -> tuple[Datasets, Schema]:
    if not cfg.data.data_dir:
        raise ConfigError("no data directory given (use --data-dir or data.data_dir)")
    data_dir = Path(cfg.data.data_dir)
    schema_path = Path(cfg.data.schema) if cfg.data.schema else data_dir / "schema.ini"
    if not schema_path.exists():
        raise ConfigError(f"schema file {schema_path} not found")
    cfg.data.schema = str(schema_path)
    schema = Schema.load(schema_path)
    rows = load_rows(data_dir)
    vocab = Vocabulary.load(cfg.data.vocab) if cfg.data.vocab else vocab_from_rows(rows, schema, cfg.data.min_count)
    if len(vocab.maps) != len(schema.fields):
        raise ConfigError(f"vocabulary has {len(vocab.maps)} fields, schema has {len(schema.fields)}")
    return encode_rows(rows, schema, vocab), schema


def _adopt_architecture(run: RunConfig, pretrained: DcnParams, meta: dict) -> RunConfig:
    """Architecture and pretraining origin come from the checkpoint, not the config."""
    a = pretrained.arch
    origin = meta.get("run", {}).get("pretrain_data", run.pretrain_data)
    return dataclasses.replace(run, k=a.k, cross_layers=a.cross_layers, deep_layers=a.deep_layers,
                               backbone=a.backbone, pretrain_data=origin)


# -- run directories -------------------------------------------------------------------

def _claim_run_dir(path: Path, overwrite: bool) -> bool:
    """Prepare ``path``; returns True if this call created it."""
    if path.exists():
        if not path.is_dir():
            raise ConfigError(f"run directory {path} exists and is not a directory")
        if any(path.iterdir()):
            if not overwrite:
                raise ConfigError(f"run directory {path} is not empty (pass --overwrite to replace it)")
            for name in RUN_FILES:
                (path / name).unlink(missing_ok=True)
        return False
    path.mkdir(parents=True)
    return True


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def _execute_stage(args, cfg: cfgmod.CliConfig, ds: Datasets, train_fn) -> int:
    run = cfg.train
    run_dir = Path(args.run_dir)
    created = _claim_run_dir(run_dir, args.overwrite)
    try:
        (run_dir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        ds.vocab.save(run_dir / "vocab.json")
        result: RunResult = train_fn()
        test = ds[("target", "test")]
        metrics, routes = evaluate_model(result.model, test)
        records = result.history + [{"epoch": result.best_epoch, "split": "test", "auc": metrics["auc"],
                                     "logloss": metrics["logloss"], "n": metrics["n"], "tau": None}]
        _write_jsonl(run_dir / "metrics.jsonl", records)
        extra = {"run": run.to_dict(), "best_epoch": result.best_epoch}
        result.model.save(run_dir / "checkpoint.bin", ds.vocab.digest(), extra)
        if isinstance(result.model, AutoftModel):
            write_route_dump(run_dir / "routes.csv", routes)
        info = {"method": method_name(run), "seed": run.seed, "stage": run.stage.value,
                "vocab_digest": ds.vocab.digest(), "best_epoch": result.best_epoch}
        (run_dir / "run.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except BaseException:
        if created:
            shutil.rmtree(run_dir, ignore_errors=True)
        raise
    print(f"{info['method']} seed {run.seed}: test auc {metrics['auc']:.4f} logloss {metrics['logloss']:.4f} "
          f"(best epoch {result.best_epoch}) -> {run_dir}")
    return 0


# -- commands -------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    overrides = cfgmod.parse_overrides(args.set or [])
    if args.seed is not None:
        overrides.setdefault("synth", {})["seed"] = str(args.seed)
    spec = cfgmod.load_file(args.config, overrides).synth
    written = synth.write(synth.generate(spec), args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    cfg = _resolve(args)
    if args.min_count is not None:
        cfg.data.min_count = args.min_count
    if not cfg.data.data_dir:
        raise ConfigError("no data directory given (use --data-dir or data.data_dir)")
    schema_path = Path(cfg.data.schema) if cfg.data.schema else Path(cfg.data.data_dir) / "schema.ini"
    schema = Schema.load(schema_path)
    vocab = vocab_from_rows(load_rows(cfg.data.data_dir), schema, cfg.data.min_count)
    try:
        vocab.save(args.out)
    except OSError as exc:
        raise DataError(f"cannot write vocabulary {args.out}: {exc}") from None
    sizes = ", ".join(f"{f.name}={n}" for f, n in zip(schema.fields, vocab.sizes))
    print(f"vocabulary {vocab.digest()[:12]} ({sizes}) -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args, pretrain_data=args.pretrain_data, stage=Stage.PRETRAIN.value)
    ds, _ = _load_data(cfg)
    run = cfg.train
    if run.pretrain_data == "all":
        train, valid = ds.all("train"), ds.all("valid")
    else:
        train, valid = ds[("source", "train")], ds[("source", "valid")]
    return _execute_stage(args, cfg, ds, lambda: run_pretrain(train, valid, ds.vocab.sizes, run))


def cmd_target_only(args) -> int:
    cfg = _resolve(args, stage=Stage.TARGET_ONLY.value)
    ds, _ = _load_data(cfg)
    run = cfg.train
    return _execute_stage(args, cfg, ds, lambda: run_pretrain(ds[("target", "train")], ds[("target", "valid")],
                                                              ds.vocab.sizes, run))


def _from_checkpoint(args, stage: str):
    cfg = _resolve(args, stage=stage)
    pretrained, meta = DcnParams.load(args.checkpoint)
    ds, _ = _load_data(cfg)
    cfg.train = _adopt_architecture(cfg.train, pretrained, meta)
    return cfg, ds, pretrained, meta.get("vocab_digest") or None


def cmd_finetune(args) -> int:
    cfg, ds, pretrained, digest = _from_checkpoint(args, Stage.FINETUNE.value)
    return _execute_stage(args, cfg, ds, lambda: run_finetune(pretrained, ds[("target", "train")],
                                                              ds[("target", "valid")], cfg.train, digest))


def cmd_autoft(args) -> int:
    cfg, ds, pretrained, digest = _from_checkpoint(args, args.stage)
    return _execute_stage(args, cfg, ds, lambda: run_autoft(pretrained, ds[("target", "train")],
                                                            ds[("target", "valid")], cfg.train, digest))


def _run_dirs(paths: Sequence[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "run.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(c for c in p.iterdir() if (c / "run.json").exists()))
        else:
            print(f"note: {p} is not a run directory, skipped", file=sys.stderr)
    return out


def cmd_evaluate(args) -> int:
    dirs = _run_dirs(args.runs)
    rows = results_table(dirs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results_table.csv").write_text(table_csv(rows), encoding="utf-8")
    text = table_text(rows, absent_runs(dirs))
    (out / "results_table.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_report_policy(args) -> int:
    src = Path(args.routes)
    if src.is_dir():
        src = src / "routes.csv"
    if not src.exists():
        raise DataError(f"route dump {src} not found")
    report = routing_fractions(src)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing_fractions.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.summary())
    for comp in ("cross", "deep"):
        series = report.finetune_by_depth(comp)
        if series:
            print(f"fine-tune fraction by {comp} depth: " + ", ".join(f"{v:.3f}" for v in series))
    return 0


# -- parser --------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file ([data], [train], [synth] sections)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", dest="data_dir", help="directory with {source,target}_{train,valid,test}.csv")
    p.add_argument("--schema", help="schema INI (default: DATA_DIR/schema.ini)")
    p.add_argument("--vocab", help="vocabulary JSON (default: built from the training CSVs)")


def _run_flags(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    _common(p)
    _data_flags(p)
    p.add_argument("--run-dir", required=True, help="output run directory (must be new or empty)")
    p.add_argument("--overwrite", action="store_true", help="replace the outputs of an existing run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="pretrained DCN checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoft", description="DCN pretraining, fine-tuning and AutoFT routing.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the synthetic two-domain benchmark")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="generator seed (default 42)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-vocab", help="build a vocabulary from source and target training rows")
    _common(p)
    _data_flags(p)
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="train a fresh DCN on all or source-domain data")
    _run_flags(p)
    p.add_argument("--pretrain-data", choices=["all", "source"], dest="pretrain_data")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("target-only", help="train a fresh DCN on target-domain data")
    _run_flags(p)
    p.set_defaults(func=cmd_target_only)

    p = sub.add_parser("finetune", help="fine-tune every parameter of a pretrained DCN on the target domain")
    _run_flags(p, checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("autoft", help="train AutoFT routing (or an ablation) on the target domain")
    _run_flags(p, checkpoint=True)
    p.add_argument("--stage", choices=AUTOFT_STAGES, default=Stage.AUTOFT.value)
    p.set_defaults(func=cmd_autoft)

    p = sub.add_parser("evaluate", help="aggregate test metrics of run directories into a results table")
    p.add_argument("runs", nargs="+", help="run directories or parents of run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report-policy", help="per-unit routing fractions from a route dump")
    p.add_argument("routes", help="routes.csv or an AutoFT run directory")
    p.add_argument("--out", help="output directory (default: next to the route dump)")
    p.set_defaults(func=cmd_report_policy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AutoFTError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
