"""Swap-based non-projective transition system with a static oracle.

Arcs are built between the two topmost stack nodes. ``LEFT_ARC`` makes the
second-top node a dependent of the top, ``RIGHT_ARC`` the reverse, and
``SWAP`` moves the second-top node back to the front of the buffer so that
words can be reordered into projective order before being attached.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .treebank_io import Sentence, TreeStructureError, check_tree

SHIFT = "SHIFT"
SWAP = "SWAP"
LEFT_ARC = "LEFT_ARC"
RIGHT_ARC = "RIGHT_ARC"
KINDS = (SHIFT, SWAP, LEFT_ARC, RIGHT_ARC)
ARC_KINDS = (LEFT_ARC, RIGHT_ARC)


class TransitionError(Exception):
    """An action was applied in a configuration where it is not legal."""


class Action(NamedTuple):
    kind: str
    relation: Optional[str] = None

    def __str__(self) -> str:
        return self.kind if self.relation is None else f"{self.kind}:{self.relation}"

    @classmethod
    def parse(cls, name: str) -> "Action":
        kind, _, rel = name.partition(":")
        if kind not in KINDS:
            raise ValueError(f"unknown action {name!r}")
        if (kind in ARC_KINDS) != bool(rel):
            raise ValueError(f"arc actions need exactly one relation: {name!r}")
        return cls(kind, rel or None)


class ActionInventory:
    """All instantiated actions of a task, in a fixed order.

    SHIFT and SWAP come first, then LEFT_ARC(r), RIGHT_ARC(r) for each
    relation in vocabulary order.
    """

    def __init__(self, relations: Iterable[str]):
        self.relations = list(relations)
        self.actions: List[Action] = [Action(SHIFT), Action(SWAP)]
        for r in self.relations:
            self.actions += [Action(LEFT_ARC, r), Action(RIGHT_ARC, r)]
        self._index = {a: i for i, a in enumerate(self.actions)}

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ActionInventory":
        rels = [Action.parse(n).relation for n in names if n.startswith(LEFT_ARC)]
        inv = cls(rels)
        if [str(a) for a in inv.actions] != list(names):
            raise ValueError("action names are not in inventory order")
        return inv

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Action:
        return self.actions[i]

    def __contains__(self, action: Action) -> bool:
        return action in self._index

    def index(self, action: Action) -> int:
        try:
            return self._index[action]
        except KeyError:
            raise KeyError(f"action {action} not in inventory") from None

    def mask(self, kinds: FrozenSet[str]) -> List[bool]:
        return [a.kind in kinds for a in self.actions]


@dataclass(frozen=True)
class Configuration:
    stack: Tuple[int, ...]
    buffer: Tuple[int, ...]
    arcs: FrozenSet[Tuple[int, int, str]]
    n: int

    def __str__(self) -> str:
        return f"stack={list(self.stack)} buffer={list(self.buffer)}"


def initial_config(sentence: Sentence | int) -> Configuration:
    n = sentence if isinstance(sentence, int) else len(sentence)
    return Configuration((0,), tuple(range(1, n + 1)), frozenset(), n)


def is_terminal(config: Configuration) -> bool:
    return not config.buffer and config.stack == (0,)


def valid_actions(config: Configuration) -> FrozenSet[str]:
    """Legal action kinds; every relation of a legal arc kind is legal.

    The root may only take its dependent once the buffer is empty, which keeps
    every terminal configuration single-rooted.
    """
    kinds = set()
    stack = config.stack
    if config.buffer:
        kinds.add(SHIFT)
    if len(stack) >= 2:
        i, j = stack[-2], stack[-1]
        if i != 0:
            kinds.add(LEFT_ARC)
            kinds.add(RIGHT_ARC)
            if i < j:
                kinds.add(SWAP)
        elif not config.buffer:
            kinds.add(RIGHT_ARC)
    return frozenset(kinds)


def apply(config: Configuration, action: Action) -> Configuration:
    if action.kind not in valid_actions(config):
        raise TransitionError(f"{action} is not legal in {config}")
    stack, buffer = config.stack, config.buffer
    if action.kind == SHIFT:
        return Configuration(stack + buffer[:1], buffer[1:], config.arcs, config.n)
    i, j = stack[-2], stack[-1]
    if action.kind == SWAP:
        return Configuration(stack[:-2] + (j,), (i,) + buffer, config.arcs, config.n)
    if action.relation is None:
        raise TransitionError(f"{action.kind} needs a relation")
    if action.kind == LEFT_ARC:
        return Configuration(stack[:-2] + (j,), buffer, config.arcs | {(j, i, action.relation)}, config.n)
    return Configuration(stack[:-1], buffer, config.arcs | {(i, j, action.relation)}, config.n)


def step_ceiling(n: int) -> int:
    """Upper bound on transitions: n shifts and n arcs, plus at most one
    swap and one re-shift per word pair."""
    return n * n + n


def _check(sentence: Sentence) -> None:
    problem = check_tree([t.head for t in sentence])
    if problem is not None:
        raise TreeStructureError(problem)


def projective_order(sentence: Sentence) -> List[int]:
    """Words in the order of an inorder traversal of the tree from the root.

    Each head is placed between its left and right dependents, and the
    dependents keep their surface order. Projective trees give 1..n.
    """
    _check(sentence)
    n = len(sentence)
    children: List[List[int]] = [[] for _ in range(n + 1)]
    for t in sentence:
        children[t.head].append(t.index)
    order: List[int] = []
    work = [(0, False)]
    while work:
        node, expanded = work.pop()
        if expanded:
            if node:
                order.append(node)
            continue
        kids = children[node]
        work.extend((c, False) for c in reversed(kids) if c > node)
        work.append((node, True))
        work.extend((c, False) for c in reversed(kids) if c < node)
    return order


def is_projective(sentence: Sentence) -> bool:
    """True iff no two arcs cross when drawn above the sentence."""
    spans = [(min(t.head, t.index), max(t.head, t.index)) for t in sentence]
    for a, (l1, r1) in enumerate(spans):
        for l2, r2 in spans[a + 1:]:
            if l1 < l2 < r1 < r2 or l2 < l1 < r2 < r1:
                return False
    return True


def static_oracle(sentence: Sentence) -> List[Action]:
    """Gold action sequence rebuilding the sentence's labeled tree.

    With top ``j`` and second-top ``i``: attach ``i`` to ``j`` once ``i`` has
    all its dependents, else attach ``j`` to ``i`` likewise, else swap when
    ``j`` precedes ``i`` in projective order, else shift.
    """
    order = projective_order(sentence)
    rank = [0] * (len(sentence) + 1)
    for pos, node in enumerate(order, start=1):
        rank[node] = pos
    heads = sentence.heads
    rels = sentence.deprels
    missing = [0] * (len(sentence) + 1)
    for t in sentence:
        missing[t.head] += 1

    config = initial_config(sentence)
    actions: List[Action] = []
    ceiling = step_ceiling(len(sentence))
    while not is_terminal(config):
        stack = config.stack
        action = Action(SHIFT)
        if len(stack) >= 2:
            i, j = stack[-2], stack[-1]
            if i != 0 and heads[i] == j and missing[i] == 0:
                action = Action(LEFT_ARC, rels[i])
                missing[j] -= 1
            elif heads[j] == i and missing[j] == 0 and (i != 0 or not config.buffer):
                action = Action(RIGHT_ARC, rels[j])
                missing[i] -= 1
            elif i != 0 and rank[j] < rank[i]:
                action = Action(SWAP)
        config = apply(config, action)
        actions.append(action)
        if len(actions) > ceiling:
            raise TreeStructureError("oracle exceeded the transition ceiling")
    return actions


def run(sentence: Sentence | int, actions: Iterable[Action]) -> Configuration:
    """Apply ``actions`` from the initial configuration."""
    config = initial_config(sentence)
    for a in actions:
        config = apply(config, a)
    return config


def arcs_to_heads(config: Configuration) -> Tuple[List[int], List[str]]:
    """Heads and relations for tokens 1..n from a terminal configuration."""
    heads = [0] * config.n
    rels = [""] * config.n
    for h, d, r in config.arcs:
        heads[d - 1] = h
        rels[d - 1] = r
    return heads, rels
