"""Read, validate and write CoNLL-X / CoNLL-U treebanks; build vocabularies."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import IO, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

CONLLX = "conllx"
CONLLU = "conllu"
FORMATS = (CONLLX, CONLLU)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

UNIVERSAL_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "PRON", "DET", "ADP", "NUM", "CONJ", "PRT", ".", "X")


class TreebankError(Exception):
    """Base class for malformed treebank data."""


class ConllParseError(TreebankError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TreeStructureError(TreebankError):
    def __init__(self, message: str, sentence: Optional[int] = None):
        self.sentence = sentence
        prefix = f"sentence {sentence}: " if sentence is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Token:
    index: int
    form: str
    upos: str
    head: int
    deprel: str
    xpos: Optional[str] = None

    @property
    def characters(self) -> Tuple[str, ...]:
        return tuple(self.form)


@dataclass(frozen=True)
class Sentence:
    tokens: Tuple[Token, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[Token]:
        return iter(self.tokens)

    def __getitem__(self, i: int) -> Token:
        return self.tokens[i]

    @property
    def heads(self) -> List[int]:
        """Heads indexed by node id; position 0 (the root) holds -1."""
        return [-1] + [t.head for t in self.tokens]

    @property
    def deprels(self) -> List[str]:
        return [""] + [t.deprel for t in self.tokens]

    def arcs(self) -> set:
        return {(t.head, t.index, t.deprel) for t in self.tokens}

    def with_parse(self, heads: Sequence[int], deprels: Sequence[str]) -> "Sentence":
        """Copy of the sentence with heads/relations replaced (both indexed from token 1)."""
        tokens = tuple(replace(t, head=h, deprel=r) for t, h, r in zip(self.tokens, heads, deprels))
        return Sentence(tokens)


@dataclass
class Treebank:
    sentences: List[Sentence] = field(default_factory=list)
    name: str = ""

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def check_tree(heads: Sequence[int]) -> Optional[str]:
    """Return a description of why ``heads`` is not a single-rooted tree, or None.

    ``heads[i]`` is the head of node ``i + 1``. Connectivity is checked by
    traversal from the root; acyclicity follows from every node being reached
    exactly once.
    """
    n = len(heads)
    children: List[List[int]] = [[] for _ in range(n + 1)]
    for dep, head in enumerate(heads, start=1):
        if not 0 <= head <= n:
            return f"head {head} of token {dep} out of range"
        if head == dep:
            return f"token {dep} is its own head"
        children[head].append(dep)
    if n and len(children[0]) != 1:
        return f"{len(children[0])} tokens attached to the root"
    seen = {0}
    todo = [0]
    while todo:
        node = todo.pop()
        for child in children[node]:
            if child in seen:
                return f"cycle through token {child}"
            seen.add(child)
            todo.append(child)
    if len(seen) != n + 1:
        missing = sorted(set(range(1, n + 1)) - seen)
        return f"tokens {missing} not reachable from the root (cycle)"
    return None


def validate_sentence(sentence: Sentence, number: Optional[int] = None, where: str = "") -> None:
    """Raise TreeStructureError unless the sentence is a well-formed tree."""
    problem = None
    for i, tok in enumerate(sentence.tokens, start=1):
        if tok.index != i:
            problem = f"token indices not contiguous at position {i}"
        elif not tok.deprel:
            problem = f"token {i} has an empty relation"
        if problem:
            break
    if problem is None:
        problem = check_tree([t.head for t in sentence.tokens])
    if problem is not None:
        raise TreeStructureError(problem + where, number)


def _blocks(stream: IO[str]) -> Iterator[Tuple[int, List[Tuple[int, str]]]]:
    block: List[Tuple[int, str]] = []
    start = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            if block:
                yield start, block
                block = []
            continue
        if not block:
            start = lineno
        block.append((lineno, line))
    if block:
        yield start, block


def _parse_block(lines: List[Tuple[int, str]], fmt: str) -> List[Token]:
    tokens = []
    for lineno, line in lines:
        if fmt == CONLLU and line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConllParseError(f"expected 10 tab-separated columns, found {len(cols)}", lineno)
        ident = cols[0]
        if fmt == CONLLU and ("-" in ident or "." in ident):
            continue
        try:
            index = int(ident)
        except ValueError:
            raise ConllParseError(f"non-integer ID {ident!r}", lineno) from None
        try:
            head = int(cols[6])
        except ValueError:
            raise ConllParseError(f"non-integer HEAD {cols[6]!r}", lineno) from None
        xpos = cols[4] if cols[4] != "_" else None
        tokens.append(Token(index=index, form=cols[1], upos=cols[3], head=head, deprel=cols[7], xpos=xpos))
    return tokens


def read_conll(stream: IO[str] | str, fmt: str = CONLLU, name: str = "") -> Treebank:
    """Parse a CoNLL-X or CoNLL-U stream (or a string holding its contents).

    For CoNLL-U, comment lines, multiword ranges (``i-j``) and empty nodes
    (``i.j``) are skipped. Every sentence is checked to be a single-rooted tree.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    sentences = []
    for start, block in _blocks(stream):
        tokens = _parse_block(block, fmt)
        if not tokens:
            continue
        sentence = Sentence(tuple(tokens))
        validate_sentence(sentence, len(sentences) + 1, f" (block starting at line {start})")
        sentences.append(sentence)
    return Treebank(sentences, name)


def read_conll_file(path, fmt: Optional[str] = None, name: Optional[str] = None) -> Treebank:
    path = str(path)
    if fmt is None:
        fmt = CONLLX if path.endswith((".conll", ".conllx")) else CONLLU
    with open(path, encoding="utf-8") as f:
        return read_conll(f, fmt, name if name is not None else path)


def write_conll(treebank: Treebank, stream: IO[str], fmt: str = CONLLU) -> None:
    """Write the retained columns; all others are emitted as ``_``."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    for sentence in treebank:
        for t in sentence:
            cols = [str(t.index), t.form, "_", t.upos, t.xpos or "_", "_", str(t.head), t.deprel, "_", "_"]
            stream.write("\t".join(cols) + "\n")
        stream.write("\n")


def write_conll_file(treebank: Treebank, path, fmt: str = CONLLU) -> None:
    with open(path, "w", encoding="utf-8") as f:
        write_conll(treebank, f, fmt)


# -- universal POS ---------------------------------------------------------

def read_pos_mapping(stream: IO[str] | str) -> Dict[str, str]:
    """Read ``<fine-tag>\\t<universal-tag>`` lines."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    mapping = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConllParseError("POS mapping lines need exactly two tab-separated fields", lineno)
        mapping[parts[0]] = parts[1]
    return mapping


def map_to_universal_pos(treebank: Treebank, mapping: Dict[str, str], fallback: str = "X") -> Tuple[Treebank, int]:
    """Set each token's upos to ``mapping[xpos]``.

    Tokens without an xpos keep their xpos slot empty and are mapped through
    their current upos. Returns the new treebank and the number of tokens that
    received the fallback tag.
    """
    fallbacks = 0
    sentences = []
    for sentence in treebank:
        tokens = []
        for t in sentence:
            fine = t.xpos if t.xpos is not None else t.upos
            upos = mapping.get(fine)
            if upos is None:
                upos = fallback
                fallbacks += 1
            tokens.append(replace(t, upos=upos))
        sentences.append(Sentence(tuple(tokens)))
    if fallbacks:
        logger.info("%s: %d tokens fell back to %r", treebank.name or "treebank", fallbacks, fallback)
    return Treebank(sentences, treebank.name), fallbacks


# -- vocabularies -----------------------------------------------------------

class Vocabulary:
    """Dense symbol <-> id map with reserved padding (0) and unknown (1) ids."""

    def __init__(self, symbols: Iterable[str] = ()):
        self.symbols: List[str] = [PAD, UNK]
        self.index: Dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for s in symbols:
            self.add(s)

    def add(self, symbol: str) -> int:
        idx = self.index.get(symbol)
        if idx is None:
            idx = self.index[symbol] = len(self.symbols)
            self.symbols.append(symbol)
        return idx

    def lookup(self, symbol: str) -> int:
        return self.index.get(symbol, UNK_ID)

    def __getitem__(self, idx: int) -> str:
        return self.symbols[idx]

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} symbols)"

    @property
    def labels(self) -> List[str]:
        """Registered symbols without the reserved entries."""
        return self.symbols[2:]


FAMILIES = ("char", "pos", "rel", "act")


def _symbols(treebank: Treebank, family: str) -> Iterator[str]:
    for sentence in treebank:
        for t in sentence:
            if family == "char":
                yield from t.characters
            elif family == "pos":
                yield t.upos
            elif family == "rel":
                yield t.deprel


@dataclass
class VocabRegistry:
    """Vocabularies per embedding family, either one shared or one per task."""

    shared: Dict[str, bool]
    vocabs: Dict[str, Dict[Optional[int], Vocabulary]]
    report: List[str] = field(default_factory=list)

    def get(self, family: str, task_id: int) -> Vocabulary:
        table = self.vocabs[family]
        return table[None] if self.shared[family] else table[task_id]

    def owners(self, family: str) -> List[Optional[int]]:
        return list(self.vocabs[family])

    def to_dict(self) -> dict:
        return {
            "shared": dict(self.shared),
            "vocabs": {fam: {("shared" if k is None else str(k)): v.symbols for k, v in table.items()}
                       for fam, table in self.vocabs.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VocabRegistry":
        vocabs = {}
        for fam, table in data["vocabs"].items():
            vocabs[fam] = {}
            for key, symbols in table.items():
                v = Vocabulary()
                for s in symbols[2:]:
                    v.add(s)
                vocabs[fam][None if key == "shared" else int(key)] = v
        return cls(dict(data["shared"]), vocabs)


def action_symbols(relations: Iterable[str]) -> List[str]:
    """Action names in inventory order: SHIFT, SWAP, then LEFT/RIGHT per relation."""
    names = ["SHIFT", "SWAP"]
    for r in relations:
        names += [f"LEFT_ARC:{r}", f"RIGHT_ARC:{r}"]
    return names


def build_vocabularies(tasks: Sequence, partition) -> VocabRegistry:
    """Build char/pos/rel/act vocabularies from the tasks' training splits.

    ``partition`` is a ParameterPartition (or a plain ``{family: shared}``
    dict); a family whose embedding table is shared gets one vocabulary over
    the union of all tasks. Symbols are numbered by first occurrence, visiting
    tasks in task_id order.
    """
    shared_families = partition.vocab_sharing() if hasattr(partition, "vocab_sharing") else partition
    ordered = sorted(tasks, key=lambda t: t.task_id)
    vocabs: Dict[str, Dict[Optional[int], Vocabulary]] = {}
    for family in ("char", "pos", "rel"):
        if shared_families[family]:
            v = Vocabulary()
            for task in ordered:
                for s in _symbols(task.train, family):
                    v.add(s)
            vocabs[family] = {None: v}
        else:
            vocabs[family] = {task.task_id: Vocabulary(_symbols(task.train, family)) for task in ordered}

    # actions follow relations; a shared action table needs a shared relation space
    if shared_families["act"]:
        if not shared_families["rel"]:
            rels: List[str] = []
            for task in ordered:
                rels.extend(r for r in vocabs["rel"][task.task_id].labels if r not in rels)
        else:
            rels = vocabs["rel"][None].labels
        vocabs["act"] = {None: Vocabulary(action_symbols(rels))}
    else:
        vocabs["act"] = {}
        for task in ordered:
            rel_vocab = vocabs["rel"][None] if shared_families["rel"] else vocabs["rel"][task.task_id]
            vocabs["act"][task.task_id] = Vocabulary(action_symbols(rel_vocab.labels))

    report = []
    if shared_families["rel"] and len(ordered) > 1:
        per_task = {t.task_id: set(_symbols(t.train, "rel")) for t in ordered}
        union = set().union(*per_task.values())
        for tid, labels in per_task.items():
            missing = sorted(union - labels)
            if missing:
                report.append(f"task {tid}: relations unseen in its own data: {', '.join(missing)}")
    for line in report:
        logger.info(line)
    return VocabRegistry(dict(shared_families), vocabs, report)


@dataclass
class TaskSpec:
    """One treebank bound to a task id."""

    task_id: int
    train: Treebank
    dev: Optional[Treebank] = None
    test: Optional[Treebank] = None
    role: str = "source"
    language: str = ""
    scheme: str = ""
    weight: float = 0.0
    fmt: str = CONLLU

    def __post_init__(self):
        if self.role not in ("primary", "source"):
            raise ValueError(f"task role must be 'primary' or 'source', got {self.role!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"sampling weight {self.weight} outside [0, 1]")


def check_tasks(tasks: Sequence[TaskSpec]) -> None:
    primaries = [t for t in tasks if t.role == "primary"]
    if len(primaries) != 1:
        raise ValueError(f"exactly one primary task required, found {len(primaries)}")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids {ids}")
    total = sum(t.weight for t in tasks)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"task sampling weights sum to {total}, not 1")


def primary_task(tasks: Sequence[TaskSpec]) -> TaskSpec:
    return next(t for t in tasks if t.role == "primary")
