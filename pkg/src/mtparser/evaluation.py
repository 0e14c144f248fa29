"""Greedy decoding and attachment scores."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .treebank_io import Sentence, Treebank

ALL_TOKENS = "all"
NO_PUNCT = "no-punct"
POLICIES = (ALL_TOKENS, NO_PUNCT)
PUNCT_TAGS = frozenset({"PUNCT", "."})


class AlignmentError(ValueError):
    """Gold and predicted treebanks do not line up."""


@dataclass
class ParseResult:
    heads: List[int]
    relations: List[str]
    transitions: int
    log_prob: float

    def apply_to(self, sentence: Sentence) -> Sentence:
        return sentence.with_parse(self.heads, self.relations)


@dataclass
class ScoreReport:
    uas: float
    las: float
    tokens: int
    correct_heads: int
    correct_labeled: int
    policy: str = ALL_TOKENS
    errors: List[str] = field(default_factory=list)

    def format(self, show_errors: bool = False) -> str:
        lines = [
            f"{'UAS':<8}{self.uas:>8.2f}",
            f"{'LAS':<8}{self.las:>8.2f}",
            f"{'tokens':<8}{self.tokens:>8d}",
            f"{'policy':<8}{self.policy:>8}",
        ]
        if show_errors and self.errors:
            lines.append("")
            lines.extend(self.errors)
        return "\n".join(lines)


def parse_greedy(model, sentence: Sentence, task_id: int) -> ParseResult:
    out = model.parse(sentence, task_id)
    return ParseResult(out.heads, out.relations, len(out.actions), out.log_prob)


def parse_treebank(model, treebank: Treebank, task_id: int) -> Treebank:
    parsed = [parse_greedy(model, s, task_id).apply_to(s) for s in treebank]
    return Treebank(parsed, treebank.name)


def _counted(tok, policy: str) -> bool:
    return policy == ALL_TOKENS or tok.upos not in PUNCT_TAGS


def score(gold: Treebank | Sequence[Sentence], predicted: Treebank | Sequence[Sentence],
          policy: str = ALL_TOKENS, list_errors: bool = False) -> ScoreReport:
    """Percentage of counted tokens with the correct head (UAS) and with the
    correct head and relation (LAS)."""
    if policy not in POLICIES:
        raise ValueError(f"unknown punctuation policy {policy!r}")
    gold, predicted = list(gold), list(predicted)
    if len(gold) != len(predicted):
        raise AlignmentError(f"{len(gold)} gold sentences but {len(predicted)} predicted")
    total = heads_ok = labeled_ok = 0
    errors = []
    for k, (g, p) in enumerate(zip(gold, predicted), start=1):
        if len(g) != len(p):
            raise AlignmentError(f"sentence {k}: {len(g)} gold tokens but {len(p)} predicted")
        for gt, pt in zip(g, p):
            if not _counted(gt, policy):
                continue
            total += 1
            if gt.head == pt.head:
                heads_ok += 1
                if gt.deprel == pt.deprel:
                    labeled_ok += 1
                    continue
            if list_errors:
                errors.append(f"sent {k} tok {gt.index} {gt.form}: gold {gt.head}/{gt.deprel} "
                              f"predicted {pt.head}/{pt.deprel}")
    uas = 100.0 * heads_ok / total if total else 0.0
    las = 100.0 * labeled_ok / total if total else 0.0
    return ScoreReport(uas, las, total, heads_ok, labeled_ok, policy, errors)


def evaluate(model, treebank: Treebank, task_id: int, policy: str = ALL_TOKENS) -> ScoreReport:
    return score(treebank, parse_treebank(model, treebank, task_id), policy)
