"""Command-line entry point: ``mtparser train|parse|evaluate|diagnose``.

Run configs are INI files::

    [run]
    strategy = MONO_HETERO
    seed = 1
    output = runs/mh

    [model]
    token_dim = 100

    [train]
    max_epochs = 30

    [task.0]
    train = data/src.conllu
    role = source
    weight = 0.9

    [task.1]
    train = data/tgt.conllu
    dev = data/tgt-dev.conllu
    role = primary
    weight = 0.1

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import random
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional

from . import multitask as mt
from .autodiff import ShapeError, load_archive, save_archive
from .diagnostics import grad_check, oracle_check
from .evaluation import POLICIES, AlignmentError, parse_treebank, score
from .model import ConsistencyError, ModelConfig, ParserModel
from .synthetic import projective_treebank, random_treebank
from .training import TrainConfig, build_model, train
from .treebank_io import (CONLLU, CONLLX, FORMATS, TaskSpec, TreebankError, check_tasks, map_to_universal_pos,
                          primary_task, read_conll_file, read_pos_mapping, write_conll, write_conll_file)

log = logging.getLogger("mtparser")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
LOG_ENV = "MTPARSER_LOG"


class ConfigError(ValueError):
    pass


@dataclass
class TaskEntry:
    task_id: int
    train: Path
    dev: Optional[Path] = None
    test: Optional[Path] = None
    fmt: Optional[str] = None
    role: str = "source"
    language: str = ""
    scheme: str = ""
    pos_map: Optional[Path] = None
    weight: Optional[float] = None


@dataclass
class RunConfig:
    tasks: List[TaskEntry]
    strategy: mt.SharingStrategy
    model: ModelConfig
    train: TrainConfig
    output: Path
    seed: int = 0
    custom: Optional[Dict[str, str]] = None
    task_embedding: Optional[bool] = None
    path: Optional[Path] = None


def _typed(cls, section: configparser.SectionProxy, skip=()) -> dict:
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in kinds:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        kind = str(kinds[key])
        try:
            if "int" in kind:
                out[key] = int(raw)
            elif "float" in kind:
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"[{section.name}] {key}: cannot parse {raw!r}") from None
    return out


def load_run_config(path, seed: Optional[int] = None) -> RunConfig:
    """Parse and fully validate a run config; touches nothing on disk."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    base = path.parent
    if "run" not in parser:
        raise ConfigError(f"{path}: missing [run] section")
    run = parser["run"]
    known_run = {"strategy", "seed", "output", "task_embedding", "weights"}
    unknown = set(run) - known_run
    if unknown:
        raise ConfigError(f"[run] unknown keys {sorted(unknown)}")
    try:
        strategy = mt.SharingStrategy.parse(run.get("strategy", "SUP"))
    except mt.ConfigurationError as err:
        raise ConfigError(str(err)) from None
    run_seed = seed if seed is not None else run.getint("seed", 0)
    output = base / run.get("output", "run")
    task_embedding = run.getboolean("task_embedding") if "task_embedding" in run else None

    def resolve(value: Optional[str]) -> Optional[Path]:
        if value is None or not value.strip():
            return None
        p = base / value.strip()
        if not p.exists():
            raise ConfigError(f"referenced path {p} does not exist")
        return p

    tasks: List[TaskEntry] = []
    for name in parser.sections():
        if not name.startswith("task."):
            continue
        sec = parser[name]
        try:
            task_id = int(name.split(".", 1)[1])
        except ValueError:
            raise ConfigError(f"[{name}]: task sections are named task.<integer id>") from None
        extra = set(sec) - {"train", "dev", "test", "format", "role", "language", "scheme", "pos_map", "weight"}
        if extra:
            raise ConfigError(f"[{name}] unknown keys {sorted(extra)}")
        if "train" not in sec:
            raise ConfigError(f"[{name}] needs a train path")
        fmt = sec.get("format")
        if fmt is not None and fmt not in FORMATS:
            raise ConfigError(f"[{name}] format must be one of {FORMATS}")
        role = sec.get("role", "source")
        if role not in ("primary", "source"):
            raise ConfigError(f"[{name}] role must be primary or source")
        try:
            weight = sec.getfloat("weight") if "weight" in sec else None
        except ValueError:
            raise ConfigError(f"[{name}] weight is not a number") from None
        tasks.append(TaskEntry(task_id, resolve(sec["train"]), resolve(sec.get("dev")), resolve(sec.get("test")),
                               fmt, role, sec.get("language", ""), sec.get("scheme", ""),
                               resolve(sec.get("pos_map")), weight))
    if not tasks:
        raise ConfigError(f"{path}: no [task.<id>] sections")
    tasks.sort(key=lambda t: t.task_id)
    if sum(t.role == "primary" for t in tasks) != 1:
        raise ConfigError("exactly one task must have role = primary")

    preset = run.get("weights", "").strip().lower()
    if preset == "low_resource":
        if len(tasks) != 2:
            raise ConfigError("weights = low_resource needs exactly two tasks")
        src = next(t for t in tasks if t.role == "source")
        prim = next(t for t in tasks if t.role == "primary")
        src.weight, prim.weight = 0.9, 0.1
    elif preset not in ("", "uniform", "explicit"):
        raise ConfigError(f"[run] weights must be uniform, low_resource or explicit, got {preset!r}")
    given = [t.weight is not None for t in tasks]
    if preset == "uniform" or not any(given):
        for t in tasks:
            t.weight = 1.0 / len(tasks)
    elif not all(given):
        raise ConfigError("either every task or no task sets a sampling weight")
    total = sum(t.weight for t in tasks)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"task sampling weights sum to {total}, not 1")

    try:
        model = ModelConfig(**_typed(ModelConfig, parser["model"])) if "model" in parser else ModelConfig()
        train_kw = _typed(TrainConfig, parser["train"], skip={"weights", "seed"}) if "train" in parser else {}
        train_cfg = TrainConfig(seed=run_seed, weights={t.task_id: t.weight for t in tasks}, **train_kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None

    custom = dict(parser["sharing"]) if "sharing" in parser else None
    if strategy == mt.SharingStrategy.CUSTOM and custom is None:
        raise ConfigError("strategy CUSTOM needs a [sharing] section (group = shared | task)")
    if custom is not None:
        # configparser lowercases keys; map back to group names
        by_lower = {g.lower(): g for g in mt.GROUPS}
        try:
            custom = {by_lower[k]: v for k, v in custom.items()}
        except KeyError as err:
            raise ConfigError(f"[sharing] unknown parameter group {err.args[0]!r}") from None
    try:
        mt.build_partition(strategy, [t.task_id for t in tasks], custom, task_embedding)
    except mt.ConfigurationError as err:
        raise ConfigError(str(err)) from None
    return RunConfig(tasks, strategy, model, train_cfg, output, run_seed, custom, task_embedding, path)


def _read(path: Path, fmt: Optional[str], pos_map: Optional[Path]):
    tb = read_conll_file(path, fmt)
    if pos_map is not None:
        tb, missing = map_to_universal_pos(tb, read_pos_mapping(pos_map.read_text(encoding="utf-8")))
        if missing:
            log.warning("%s: %d tokens had unmapped tags", path, missing)
    return tb


def load_tasks(cfg: RunConfig) -> List[TaskSpec]:
    specs = []
    for t in cfg.tasks:
        fmt = t.fmt
        specs.append(TaskSpec(t.task_id, _read(t.train, fmt, t.pos_map),
                              _read(t.dev, fmt, t.pos_map) if t.dev else None,
                              _read(t.test, fmt, t.pos_map) if t.test else None,
                              t.role, t.language, t.scheme, t.weight, fmt or CONLLU))
    check_tasks(specs)
    return specs


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    tasks = load_tasks(cfg)
    model = build_model(tasks, cfg.strategy, cfg.model, cfg.seed, cfg.custom, cfg.task_embedding)
    result = train(tasks, cfg.strategy, cfg.model, cfg.train, model=model)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(model.manifest(), primary_task=primary_task(tasks).task_id)
    best_manifest = dict(manifest, step=result.report.best_step)
    save_archive(out / "best.archive", model.store, best_manifest)
    model.store.restore(result.final)
    save_archive(out / "final.archive", model.store, manifest)
    model.store.restore(result.best)
    result.report.write(out / "report.jsonl")
    with open(out / "partition.json", "w", encoding="utf-8") as f:
        json.dump(model.partition.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    (out / "partition.txt").write_text(mt.format_table({model.partition.strategy: model.partition}), encoding="utf-8")
    print(f"best step {result.report.best_step}"
          + (f", dev UAS {result.report.best_uas:.2f}" if result.report.best_uas is not None else ""))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_parse(args) -> int:
    store, manifest = load_archive(args.archive)
    model = ParserModel.from_manifest(store, manifest)
    task = args.task if args.task is not None else manifest.get("primary_task", model.partition.task_ids[0])
    if task not in model.partition.task_ids:
        raise ConfigError(f"archive has tasks {list(model.partition.task_ids)}, not {task}")
    tb = read_conll_file(args.input, args.format)
    fmt = args.format or (CONLLX if str(args.input).endswith((".conll", ".conllx")) else CONLLU)
    parsed = parse_treebank(model, tb, task)
    if args.output == "-":
        write_conll(parsed, sys.stdout, fmt)
    else:
        write_conll_file(parsed, args.output, fmt)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gold = read_conll_file(args.gold, args.format)
    pred = read_conll_file(args.predicted, args.format)
    report = score(gold, pred, args.policy, list_errors=args.errors)
    print(report.format(show_errors=args.errors))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.check == "oracle-check":
        if args.treebank:
            sentences = list(read_conll_file(args.treebank, args.format))
        else:
            rng = random.Random(seed)
            if args.projective:
                sentences = list(projective_treebank(args.count, rng, args.max_len))
            else:
                sentences = list(random_treebank(args.count, rng, args.max_len, nonprojective_share=0.3))
        stats = oracle_check(sentences)
        print(stats.format())
        return EXIT_OK if stats.reproduced == stats.sentences else EXIT_INTERNAL
    if args.check == "grad-check":
        report = grad_check(seed, args.instances)
        print(report.format())
        return EXIT_OK if not report.failures() else EXIT_INTERNAL
    strategies = args.strategy or ["MULTI_UNIV", "MONO_HETERO"]
    partitions = {}
    for name in strategies:
        strategy = mt.SharingStrategy.parse(name)
        n_tasks = 1 if strategy in (mt.SharingStrategy.SUP, mt.SharingStrategy.CAS) else 2
        partitions[strategy.value] = mt.build_partition(strategy, list(range(n_tasks)))
    print(mt.format_table(partitions), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    p = argparse.ArgumentParser(prog="mtparser", description="Multi-task transition-based dependency parser")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train from a run config")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("parse", parents=[common], help="parse a treebank with a trained model")
    q.add_argument("archive")
    q.add_argument("input")
    q.add_argument("--task", type=int, default=None, help="task id (default: the archive's primary task)")
    q.add_argument("--output", "-o", default="-")
    q.add_argument("--format", choices=FORMATS, default=None)
    q.set_defaults(func=cmd_parse)

    e = sub.add_parser("evaluate", parents=[common], help="score predictions against gold")
    e.add_argument("gold")
    e.add_argument("predicted")
    e.add_argument("--policy", choices=POLICIES, default="all")
    e.add_argument("--errors", action="store_true", help="list every wrong token")
    e.add_argument("--format", choices=FORMATS, default=None)
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("diagnose", parents=[common], help="self-checks")
    d.add_argument("check", choices=("oracle-check", "grad-check", "partition-dump"))
    d.add_argument("--treebank", help="oracle-check: treebank file (default: random trees)")
    d.add_argument("--format", choices=FORMATS, default=None)
    d.add_argument("--count", type=int, default=10000)
    d.add_argument("--max-len", type=int, default=10)
    d.add_argument("--projective", action="store_true", help="oracle-check: projective random trees only")
    d.add_argument("--instances", type=int, default=20, help="grad-check: random cases per primitive")
    d.add_argument("--strategy", action="append", help="partition-dump: strategy (repeatable)")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, mt.ConfigurationError) as err:
        print(f"mtparser: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConsistencyError, ShapeError, AssertionError) as err:
        print(f"mtparser: internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except (TreebankError, AlignmentError, OSError, ValueError) as err:
        print(f"mtparser: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"mtparser: internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
