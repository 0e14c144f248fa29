"""Stochastic multi-task training: sample a task, take its next sentence,
back-propagate the summed transition cross-entropy, update the parameters
that task owns, and early-stop on the primary task's dev UAS."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import multitask as mt
from .autodiff import NamedParameter, Tape
from .evaluation import evaluate
from .model import ModelConfig, ParserModel
from .transition import Action, static_oracle
from .treebank_io import (TaskSpec, TreebankError, Vocabulary, build_vocabularies, check_tasks,
                          primary_task)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
LOW_RESOURCE_SOURCE_WEIGHT = 0.9


@dataclass
class TrainConfig:
    max_epochs: int = 30
    learning_rate: float = 0.1
    lr_decay: float = 0.9
    optimizer: str = "sgd"
    seed: int = 0
    weights: Optional[Dict[int, float]] = None
    patience: int = 5
    eval_interval: Optional[int] = None
    clip: float = 5.0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.weights is not None:
            self.weights = {int(k): float(v) for k, v in self.weights.items()}
            if abs(sum(self.weights.values()) - 1.0) > 1e-9:
                raise ValueError(f"task weights {self.weights} do not sum to 1")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass
class TrainReport:
    records: List[dict] = field(default_factory=list)
    best_step: Optional[int] = None
    best_uas: Optional[float] = None
    stopped_early: bool = False
    skipped: int = 0

    def log(self, **record) -> None:
        self.records.append(record)
        logger.info("%s", json.dumps(record))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


def sample_task(weights: Sequence[float] | Dict[int, float], rng: np.random.Generator) -> int:
    """Draw a task with probability proportional to its weight.

    A sequence yields an index; a mapping yields one of its keys.
    """
    if isinstance(weights, dict):
        keys = list(weights)
        return keys[sample_task([weights[k] for k in keys], rng)]
    cumulative = np.cumsum(weights)
    u = rng.random() * cumulative[-1]
    return min(int(np.searchsorted(cumulative, u, side="right")), len(cumulative) - 1)


def low_resource_weights(tasks: Sequence[TaskSpec]) -> Dict[int, float]:
    """0.9 on the (single) source task, 0.1 on the primary task."""
    sources = [t for t in tasks if t.role == "source"]
    if len(sources) != 1 or len(tasks) != 2:
        raise ValueError("the low-resource preset needs exactly one source and one primary task")
    return {sources[0].task_id: LOW_RESOURCE_SOURCE_WEIGHT, primary_task(tasks).task_id: 1 - LOW_RESOURCE_SOURCE_WEIGHT}


# -- optimization -----------------------------------------------------------

class Optimizer:
    """SGD (default) or Adam over named parameters, with global-norm clipping."""

    def __init__(self, kind: str = "sgd", clip: Optional[float] = 5.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.clip = clip
        self.betas = betas
        self.eps = eps
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

    def update(self, params: Iterable[NamedParameter], lr: float) -> float:
        """Apply one step and zero the gradients. Returns the pre-clipping norm."""
        params = list(params)
        norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        for p in params:
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.kind == "sgd":
                p.value -= lr * g
            else:
                m, v, t = self.state.get(p.name, (np.zeros_like(p.value), np.zeros_like(p.value), 0))
                t += 1
                m = self.betas[0] * m + (1 - self.betas[0]) * g
                v = self.betas[1] * v + (1 - self.betas[1]) * g * g
                m_hat = m / (1 - self.betas[0] ** t)
                v_hat = v / (1 - self.betas[1] ** t)
                p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
                self.state[p.name] = (m, v, t)
            p.zero_grad()
        return norm


def update(params: Iterable[NamedParameter], lr: float, clip: Optional[float] = 5.0) -> float:
    """One plain SGD step with gradient-norm clipping; gradients are zeroed."""
    return Optimizer("sgd", clip).update(params, lr)


# -- data -------------------------------------------------------------------

class TaskCursor:
    """Walks a task's training instances, reshuffling at every pass."""

    def __init__(self, instances: List[tuple], rng: np.random.Generator):
        if not instances:
            raise ValueError("task has no usable training sentences")
        self.instances = instances
        self.rng = rng
        self.order: List[int] = []
        self.passes = 0

    def next(self) -> tuple:
        if not self.order:
            self.order = list(self.rng.permutation(len(self.instances)))[::-1]
            self.passes += 1
        return self.instances[self.order.pop()]


def oracle_instances(task: TaskSpec) -> Tuple[List[tuple], int]:
    """(sentence, gold actions) pairs; sentences whose oracle fails are skipped."""
    instances, skipped = [], 0
    for k, sentence in enumerate(task.train):
        try:
            instances.append((sentence, static_oracle(sentence)))
        except TreebankError as err:
            skipped += 1
            logger.warning("task %d sentence %d skipped: %s", task.task_id, k + 1, err)
    return instances, skipped


class Trainer:
    """Owns the optimization state for one model."""

    def __init__(self, model: ParserModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = Optimizer(config.optimizer, config.clip)
        self._owned = {t: [model.store[n] for n in model.owned_names(t)] for t in model.partition.task_ids}

    def step(self, task_id: int, sentence, gold: Sequence[Action], lr: float) -> float:
        tape = Tape()
        loss = self.model.sentence_loss(tape, sentence, task_id, gold, train=True)
        tape.backward(loss)
        self.optimizer.update(self._owned[task_id], lr)
        self.model.store.step += 1
        return float(loss.value)


@dataclass
class TrainResult:
    model: ParserModel
    report: TrainReport
    best: Dict[str, np.ndarray]
    final: Dict[str, np.ndarray]


def build_model(tasks: Sequence[TaskSpec], strategy, model_config: ModelConfig, seed: int = 0,
                custom: Optional[dict] = None, task_embedding: Optional[bool] = None) -> ParserModel:
    partition = mt.build_partition(strategy, tasks, custom, task_embedding)
    vocabs = build_vocabularies(tasks, partition)
    return ParserModel(model_config, partition, vocabs, seed=seed)


def train(tasks: Sequence[TaskSpec], strategy, model_config: ModelConfig, train_config: TrainConfig,
          model: Optional[ParserModel] = None,
          on_step: Optional[Callable[[int, int, float], None]] = None) -> TrainResult:
    """Train a parser on ``tasks`` and return it with its best parameters loaded.

    ``model`` may be given pre-built (for example initialized from another
    run); ``on_step(step, task_id, loss)`` is called after every update.
    """
    check_tasks(tasks)
    cfg = train_config
    if model is None:
        model = build_model(tasks, strategy, model_config, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trainer = Trainer(model, cfg)
    primary = primary_task(tasks)
    weights = cfg.weights or {t.task_id: t.weight for t in tasks}
    report = TrainReport()

    cursors = {}
    for task in sorted(tasks, key=lambda t: t.task_id):
        instances, skipped = oracle_instances(task)
        report.skipped += skipped
        cursors[task.task_id] = TaskCursor(instances, rng)
    epoch_steps = sum(len(c.instances) for c in cursors.values())
    interval = cfg.eval_interval or epoch_steps
    total_steps = cfg.max_epochs * epoch_steps
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    best = model.store.snapshot()
    best_uas = -1.0
    bad_evals = 0
    losses: List[float] = []
    mix: Counter = Counter()
    for step in range(1, total_steps + 1):
        epoch = (step - 1) // epoch_steps
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        task_id = sample_task(weights, rng)
        sentence, gold = cursors[task_id].next()
        loss = trainer.step(task_id, sentence, gold, lr)
        losses.append(loss)
        mix[task_id] += 1
        if on_step is not None:
            on_step(step, task_id, loss)
        if step % interval == 0 or step == total_steps:
            record = {"step": step, "epoch": epoch + 1, "lr": lr, "task_mix": {str(k): v for k, v in sorted(mix.items())},
                      "train_loss": float(np.mean(losses))}
            if primary.dev is not None and len(primary.dev):
                dev = evaluate(model, primary.dev, primary.task_id)
                record.update(dev_uas=dev.uas, dev_las=dev.las)
                if dev.uas > best_uas:
                    best_uas, bad_evals = dev.uas, 0
                    best = model.store.snapshot()
                    report.best_step = step
                else:
                    bad_evals += 1
            report.log(**record)
            losses, mix = [], Counter()
            if bad_evals >= cfg.patience:
                report.stopped_early = True
                break
    final = model.store.snapshot()
    if report.best_step is None:
        best = final
        report.best_step = model.store.step
    else:
        report.best_uas = best_uas
        model.store.restore(best)
    return TrainResult(model, report, best, final)


# -- cascaded training ------------------------------------------------------

@dataclass
class TransferReport:
    copied: List[str] = field(default_factory=list)
    partial: Dict[str, int] = field(default_factory=dict)
    fresh: List[str] = field(default_factory=list)


def _row_keys(model: ParserModel, family: str, task_id: int) -> List[str]:
    if family == "act_out":
        return [str(a) for a in model.inventories[task_id].actions]
    return model.vocabs.get(family, task_id).symbols


def transfer_parameters(source: ParserModel, source_task: int, target: ParserModel, target_task: int) -> TransferReport:
    """Initialize ``target`` from ``source`` by logical parameter name.

    Shape-compatible tensors are copied whole; tables indexed by a vocabulary
    (or by the action inventory) are copied row by row for symbols known to
    both models, leaving the target's fresh rows for the rest.
    """
    src_specs = {s.logical: s for s in source.specs[source_task]}
    report = TransferReport()
    for spec in target.specs[target_task]:
        name = target.resolve(spec, target_task)
        dst = target.store[name].value
        other = src_specs.get(spec.logical)
        if other is None:
            report.fresh.append(name)
            continue
        src = source.store[source.resolve(other, source_task)].value
        if spec.family is None:
            if src.shape == dst.shape:
                dst[...] = src
                report.copied.append(name)
            else:
                report.fresh.append(name)
            continue
        if src.shape[1:] != dst.shape[1:]:
            report.fresh.append(name)
            continue
        src_rows = {sym: k for k, sym in enumerate(_row_keys(source, spec.family, source_task))}
        n = 0
        for k, sym in enumerate(_row_keys(target, spec.family, target_task)):
            j = src_rows.get(sym)
            if j is not None:
                dst[k] = src[j]
                n += 1
        if n == dst.shape[0] and src.shape == dst.shape:
            report.copied.append(name)
        else:
            report.partial[name] = n
    return report


def pretrain_finetune(source: TaskSpec, target: TaskSpec, model_config: ModelConfig,
                      source_config: TrainConfig, target_config: TrainConfig,
                      ) -> Tuple[TrainResult, TrainResult, TransferReport]:
    """Train on ``source`` alone, initialize a ``target`` model from it, then
    train on ``target`` alone."""
    from dataclasses import replace

    src = replace(source, role="primary", weight=1.0)
    tgt = replace(target, role="primary", weight=1.0)
    stage1 = train([src], mt.SharingStrategy.CAS, model_config, source_config)
    model2 = build_model([tgt], mt.SharingStrategy.CAS, model_config, target_config.seed)
    transfer = transfer_parameters(stage1.model, src.task_id, model2, tgt.task_id)
    stage2 = train([tgt], mt.SharingStrategy.CAS, model_config, target_config, model=model2)
    return stage1, stage2, transfer
