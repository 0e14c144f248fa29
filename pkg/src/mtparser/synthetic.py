"""Synthetic treebanks: random labeled trees and a toy grammar annotated
under two relation schemes that share the same tree structure."""
from __future__ import annotations

import random
from typing import Dict, List, Optional, Sequence, Tuple

from .transition import is_projective
from .treebank_io import Sentence, Token, Treebank


def random_tree(n: int, rng: random.Random, labels: Sequence[str] = ("a", "b", "c"),
                pos: Sequence[str] = ("NOUN", "VERB", "DET")) -> Sentence:
    """Uniform-ish random single-rooted tree: nodes are attached in random
    order to an already attached node."""
    order = list(range(1, n + 1))
    rng.shuffle(order)
    heads = {order[0]: 0}
    for k, node in enumerate(order[1:], start=1):
        heads[node] = order[rng.randrange(k)]
    tokens = []
    for i in range(1, n + 1):
        form = "".join(rng.choice("abcdefgh") for _ in range(rng.randint(1, 4)))
        rel = "root" if heads[i] == 0 else rng.choice(labels)
        tokens.append(Token(i, form, rng.choice(pos), heads[i], rel))
    return Sentence(tuple(tokens))


def random_nonprojective_tree(n: int, rng: random.Random, **kwargs) -> Sentence:
    if n < 3:
        raise ValueError("non-projective trees need at least 3 tokens")
    while True:
        s = random_tree(n, rng, **kwargs)
        if not is_projective(s):
            return s


def random_treebank(count: int, rng: random.Random, max_len: int = 10, nonprojective_share: float = 0.0,
                    **kwargs) -> Treebank:
    sentences = []
    for k in range(count):
        if k < round(count * nonprojective_share):
            sentences.append(random_nonprojective_tree(rng.randint(3, max(3, max_len)), rng, **kwargs))
        else:
            sentences.append(random_tree(rng.randint(1, max_len), rng, **kwargs))
    rng.shuffle(sentences)
    return Treebank(sentences, "random")


def projective_treebank(count: int, rng: random.Random, max_len: int = 10) -> Treebank:
    sentences = []
    while len(sentences) < count:
        s = random_tree(rng.randint(1, max_len), rng)
        if is_projective(s):
            sentences.append(s)
    return Treebank(sentences, "projective")


# -- toy grammar ------------------------------------------------------------

# one relation label per construction, in two annotation schemes
SCHEMES: Dict[str, Dict[str, str]] = {
    "univ": {"root": "root", "subj": "nsubj", "obj": "dobj", "det": "det", "mod": "amod",
             "case": "case", "nmod": "nmod", "adv": "advmod"},
    "conll": {"root": "ROOT", "subj": "SBJ", "obj": "OBJ", "det": "NMOD", "mod": "NMOD",
              "case": "PMOD", "nmod": "NMOD", "adv": "ADV"},
}


class ToyGrammar:
    """Small subject-verb-object language with prepositional attachments.

    Whether a prepositional phrase attaches to the verb or to the preceding
    noun depends on the preposition, so attachment has to be learned from
    lexical evidence. Tags come from the universal tag set.
    """

    def __init__(self, seed: int = 0, lexicon_size: int = 12):
        rng = random.Random(seed)

        def words(n: int, length: Tuple[int, int]) -> List[str]:
            out: List[str] = []
            while len(out) < n:
                w = "".join(rng.choice("bcdfgklmnprstvz" if k % 2 == 0 else "aeiou")
                            for k in range(rng.randint(*length)))
                if w not in out:
                    out.append(w)
            return out

        self.nouns = words(lexicon_size, (3, 6))
        self.verbs = words(lexicon_size // 2, (3, 6))
        self.adjs = words(lexicon_size // 2, (3, 5))
        self.dets = words(3, (2, 3))
        self.advs = words(4, (4, 6))
        preps = words(6, (2, 3))
        self.verb_preps = preps[:3]
        self.noun_preps = preps[3:]

    def _np(self, rng: random.Random, allow_pp: bool, out: list, head_of: int, rel: str) -> int:
        """Append a noun phrase, return the index of its head noun."""
        det = rng.random() < 0.7
        n_adj = rng.choice((0, 0, 1, 1, 2))
        start = len(out)
        if det:
            out.append([rng.choice(self.dets), "DET", None, "det"])
        for _ in range(n_adj):
            out.append([rng.choice(self.adjs), "ADJ", None, "mod"])
        out.append([rng.choice(self.nouns), "NOUN", head_of, rel])
        noun = len(out)
        for k in range(start, noun - 1):
            out[k][2] = noun
        if allow_pp and rng.random() < 0.3:
            self._pp(rng, out, noun, self.noun_preps)
        return noun

    def _pp(self, rng: random.Random, out: list, attach_to: int, preps: Sequence[str]) -> None:
        out.append([rng.choice(preps), "ADP", None, "case"])
        case = len(out)
        noun = self._np(rng, False, out, attach_to, "nmod")
        out[case - 1][2] = noun

    def sentence(self, rng: random.Random, scheme: str) -> Sentence:
        out: list = []
        # heads are fixed up once the verb position is known
        subj = self._np(rng, True, out, -1, "subj")
        out.append([rng.choice(self.verbs), "VERB", 0, "root"])
        verb = len(out)
        out[subj - 1][2] = verb
        if rng.random() < 0.8:
            obj = self._np(rng, False, out, verb, "obj")
            if rng.random() < 0.6:
                preps = self.verb_preps if rng.random() < 0.5 else self.noun_preps
                self._pp(rng, out, verb if preps is self.verb_preps else obj, preps)
        if rng.random() < 0.3:
            out.append([rng.choice(self.advs), "ADV", verb, "adv"])
        labels = SCHEMES[scheme]
        tokens = tuple(Token(i, form, pos, head, labels[rel]) for i, (form, pos, head, rel) in enumerate(out, start=1))
        return Sentence(tokens)

    def treebank(self, count: int, seed: int, scheme: str, name: Optional[str] = None) -> Treebank:
        rng = random.Random(seed)
        return Treebank([self.sentence(rng, scheme) for _ in range(count)], name or f"toy-{scheme}")
