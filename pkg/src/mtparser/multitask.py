"""Parameter sharing across tasks: which parameter groups are shared and
which are owned by each task, plus resolution of logical parameter names to
concrete ones (``shared/<name>`` or ``task<k>/<name>``)."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

SHARED = "shared"
TASK = "task"

LSTM_S = "LSTM(S)"
LSTM_B = "LSTM(B)"
LSTM_A = "LSTM(A)"
BILSTM_CHARS = "BiLSTM(chars)"
RECNN = "RecNN"
W_A = "W_A"
W_S = "W_S"
W_B = "W_B"
E_POS = "E_pos"
E_REL = "E_rel"
E_ACT = "E_act"
E_CHAR = "E_char"
G = "g"
TASK_EMB = "e^t"

GROUPS = (LSTM_S, LSTM_B, LSTM_A, BILSTM_CHARS, RECNN, W_A, W_S, W_B, E_POS, E_REL, E_ACT, E_CHAR, G, TASK_EMB)

# embedding family -> group owning its table
FAMILY_GROUP = {"char": E_CHAR, "pos": E_POS, "rel": E_REL, "act": E_ACT}

# display order and row merging used by the sharing-table dump
_TABLE_ITEMS = [
    (LSTM_S,), (LSTM_B,), (LSTM_A,), (BILSTM_CHARS,), (RECNN,), (W_A, W_S, W_B), (G,),
    (E_POS, E_REL, E_ACT, E_CHAR, TASK_EMB),
]


class ConfigurationError(ValueError):
    """A sharing strategy or partition table is inconsistent."""


class SharingStrategy(str, enum.Enum):
    SUP = "SUP"
    CAS = "CAS"
    SMTL = "SMTL"
    MULTI_UNIV = "MULTI_UNIV"
    MONO_HETERO = "MONO_HETERO"
    CUSTOM = "CUSTOM"

    @classmethod
    def parse(cls, name: str) -> "SharingStrategy":
        key = name.strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown sharing strategy {name!r}") from None


_MULTI_UNIV_SHARED = {LSTM_S, LSTM_B, RECNN, W_A, W_S, W_B, E_POS, E_REL, E_ACT}
_MONO_HETERO_SHARED = {LSTM_S, LSTM_B, BILSTM_CHARS, RECNN, W_A, W_S, W_B, E_POS, E_CHAR}


@dataclass(frozen=True)
class ParameterPartition:
    """Ownership (``shared`` or ``task``) of every parameter group."""

    ownership: Mapping[str, str]
    task_embedding: bool
    task_ids: tuple
    strategy: str = SharingStrategy.CUSTOM.value

    def owner(self, group: str) -> str:
        return self.ownership[group]

    def is_shared(self, group: str) -> bool:
        return self.ownership[group] == SHARED

    def vocab_sharing(self) -> Dict[str, bool]:
        return {fam: self.is_shared(group) for fam, group in FAMILY_GROUP.items()}

    def resolve(self, logical: str, group: str, task_id: int) -> str:
        """Concrete name of ``logical`` (a parameter of ``group``) for a task."""
        if group not in self.ownership:
            raise ConfigurationError(f"unknown parameter group {group!r}")
        if group == TASK_EMB and not self.task_embedding:
            raise ConfigurationError("task embeddings are inactive in this partition")
        if task_id not in self.task_ids:
            raise ConfigurationError(f"unknown task {task_id}")
        if self.ownership[group] == SHARED:
            return f"shared/{logical}"
        return f"task{task_id}/{logical}"

    def owner_tag(self, group: str, task_id: int) -> str:
        return SHARED if self.is_shared(group) else f"task{task_id}"

    def table(self) -> Dict[str, List[str]]:
        """Shared / task-specific listing in the layout of the sharing table."""
        rows: Dict[str, List[str]] = {"Shared": [], "Task-specific": []}
        for item in _TABLE_ITEMS:
            for group in item:
                if group == TASK_EMB and not self.task_embedding:
                    continue
                rows["Shared" if self.is_shared(group) else "Task-specific"].append(group)
        return rows

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "task_embedding": self.task_embedding,
                "task_ids": list(self.task_ids), "ownership": dict(self.ownership)}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterPartition":
        return cls(dict(data["ownership"]), bool(data["task_embedding"]), tuple(data["task_ids"]),
                   data.get("strategy", SharingStrategy.CUSTOM.value))


def _validate(partition: ParameterPartition) -> None:
    missing = [g for g in GROUPS if g not in partition.ownership]
    if missing:
        raise ConfigurationError(f"partition does not assign groups: {', '.join(missing)}")
    bad = {g: o for g, o in partition.ownership.items() if o not in (SHARED, TASK) or g not in GROUPS}
    if bad:
        raise ConfigurationError(f"invalid ownership entries: {bad}")
    if partition.ownership[G] != TASK:
        raise ConfigurationError("the output layer g must be task-specific")
    if partition.task_embedding and partition.ownership[TASK_EMB] != TASK:
        raise ConfigurationError("active task embeddings must be task-specific")
    if partition.ownership[E_ACT] == SHARED and partition.ownership[E_REL] != SHARED:
        raise ConfigurationError("a shared action table requires a shared relation table")
    if not partition.task_ids:
        raise ConfigurationError("partition has no tasks")


def _relation_sets(tasks) -> List[set]:
    sets = []
    for task in tasks:
        if hasattr(task, "train"):
            sets.append({tok.deprel for s in task.train for tok in s})
    return sets


def build_partition(strategy: SharingStrategy | str, tasks: Sequence,
                    custom: Optional[Mapping[str, str]] = None,
                    task_embedding: Optional[bool] = None) -> ParameterPartition:
    """Ownership table for ``strategy`` over ``tasks`` (TaskSpecs or task ids).

    ``custom`` (group -> "shared"/"task") and ``task_embedding`` are only
    used by the CUSTOM strategy.
    """
    strategy = SharingStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    task_ids = tuple(sorted(getattr(t, "task_id", t) for t in tasks))
    if len(set(task_ids)) != len(task_ids):
        raise ConfigurationError(f"duplicate task ids {task_ids}")

    if strategy in (SharingStrategy.SUP, SharingStrategy.CAS):
        if len(task_ids) != 1:
            raise ConfigurationError(f"{strategy.value} trains a single task, got {len(task_ids)}")
        ownership = {g: TASK for g in GROUPS}
        active = False
    elif strategy == SharingStrategy.SMTL:
        ownership = {g: SHARED for g in GROUPS}
        ownership[E_CHAR] = TASK
        ownership[G] = TASK
        ownership[TASK_EMB] = TASK
        active = False
    elif strategy == SharingStrategy.MULTI_UNIV:
        ownership = {g: SHARED if g in _MULTI_UNIV_SHARED else TASK for g in GROUPS}
        active = True
        rel_sets = _relation_sets(tasks)
        if rel_sets and any(r != rel_sets[0] for r in rel_sets):
            raise ConfigurationError(
                "MULTI_UNIV shares the action table, so all tasks need the same relation inventory; "
                "use MONO_HETERO or a CUSTOM table for heterogeneous label sets")
    elif strategy == SharingStrategy.MONO_HETERO:
        ownership = {g: SHARED if g in _MONO_HETERO_SHARED else TASK for g in GROUPS}
        active = True
    else:
        if custom is None:
            raise ConfigurationError("CUSTOM strategy needs an ownership table")
        ownership = {g: TASK for g in (G, TASK_EMB)}
        for group, owner in custom.items():
            ownership[group] = owner.strip().lower() if isinstance(owner, str) else owner
        active = True if task_embedding is None else task_embedding
    partition = ParameterPartition(ownership, active, task_ids, strategy.value)
    _validate(partition)
    return partition


def format_table(partitions: Mapping[str, ParameterPartition]) -> str:
    """Render one or more partitions side by side, one column per strategy."""
    names = list(partitions)
    rows = {n: partitions[n].table() for n in names}
    width = max([len(n) for n in names] + [len(g) for n in names for r in rows[n].values() for g in r]) + 2
    lines = [" " * 15 + "".join(n.ljust(width) for n in names)]
    for section in ("Shared", "Task-specific"):
        depth = max(len(rows[n][section]) for n in names)
        for k in range(depth):
            label = section if k == 0 else ""
            cells = [rows[n][section][k] if k < len(rows[n][section]) else "" for n in names]
            lines.append(label.ljust(15) + "".join(c.ljust(width) for c in cells))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def task_embedding_table(store, partition: ParameterPartition):
    """Stack the per-task embedding rows into one matrix (row order = task ids)."""
    rows = [store[partition.resolve("task_embedding", TASK_EMB, t)].value for t in partition.task_ids]
    return np.vstack(rows)
