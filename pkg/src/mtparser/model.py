"""Stack-LSTM parser network with character BiLSTM token encoders, recursive
subtree composition and task-conditioned state encoding."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import multitask as mt
from .autodiff import ParameterStore, Tape, Var
from .transition import (LEFT_ARC, RIGHT_ARC, SHIFT, SWAP, Action, ActionInventory, Configuration,
                         apply, initial_config, is_terminal, step_ceiling, valid_actions)
from .treebank_io import Sentence, Token, VocabRegistry


class ConsistencyError(RuntimeError):
    """Network histories disagree with the transition configuration."""


@dataclass
class ModelConfig:
    char_dim: int = 32
    pos_dim: int = 12
    rel_dim: int = 20
    act_dim: int = 16
    char_hidden: int = 64
    token_dim: int = 100
    stack_dim: int = 100
    buffer_dim: int = 100
    action_dim: int = 100
    state_dim: int = 100
    task_dim: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "dropout" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


class ParamSpec(NamedTuple):
    logical: str
    group: str
    shape: Tuple[int, ...]
    init: str
    family: Optional[str] = None  # vocabulary whose symbols index the rows


def _lstm_specs(prefix: str, group: str, d_in: int, hidden: int) -> List[ParamSpec]:
    return [
        ParamSpec(f"{prefix}/W_x", group, (4 * hidden, d_in), "matrix"),
        ParamSpec(f"{prefix}/W_h", group, (4 * hidden, hidden), "matrix"),
        ParamSpec(f"{prefix}/b", group, (4 * hidden,), "bias"),
    ]


def param_specs(cfg: ModelConfig, n_char: int, n_pos: int, n_rel: int, n_act: int, n_out: int,
                task_embedding: bool) -> List[ParamSpec]:
    """Every parameter the network reads, with its sharing group.

    The guard (empty-state) vectors and the root vector belong to the group of
    the LSTM that consumes them; the token projection V, b belongs with the
    character BiLSTM; the state bias d and the task-embedding block of the
    state map belong with W_S.
    """
    specs = [
        ParamSpec("emb_char", mt.E_CHAR, (n_char, cfg.char_dim), "embedding", "char"),
        ParamSpec("emb_pos", mt.E_POS, (n_pos, cfg.pos_dim), "embedding", "pos"),
        ParamSpec("emb_rel", mt.E_REL, (n_rel, cfg.rel_dim), "embedding", "rel"),
        ParamSpec("emb_act", mt.E_ACT, (n_act, cfg.act_dim), "embedding", "act"),
    ]
    specs += _lstm_specs("char_fw", mt.BILSTM_CHARS, cfg.char_dim, cfg.char_hidden)
    specs += _lstm_specs("char_bw", mt.BILSTM_CHARS, cfg.char_dim, cfg.char_hidden)
    specs += [
        ParamSpec("token/V", mt.BILSTM_CHARS, (cfg.token_dim, 2 * cfg.char_hidden + cfg.pos_dim), "matrix"),
        ParamSpec("token/b", mt.BILSTM_CHARS, (cfg.token_dim,), "bias"),
    ]
    specs += _lstm_specs("lstm_stack", mt.LSTM_S, cfg.token_dim, cfg.stack_dim)
    specs += [ParamSpec("lstm_stack/guard", mt.LSTM_S, (cfg.token_dim,), "embedding"),
              ParamSpec("lstm_stack/root", mt.LSTM_S, (cfg.token_dim,), "embedding")]
    specs += _lstm_specs("lstm_buffer", mt.LSTM_B, cfg.token_dim, cfg.buffer_dim)
    specs += [ParamSpec("lstm_buffer/guard", mt.LSTM_B, (cfg.token_dim,), "embedding")]
    specs += _lstm_specs("lstm_action", mt.LSTM_A, cfg.act_dim, cfg.action_dim)
    specs += [ParamSpec("lstm_action/guard", mt.LSTM_A, (cfg.act_dim,), "embedding")]
    comp_in = 2 * cfg.token_dim + cfg.rel_dim
    specs += [
        ParamSpec("recnn/left_W", mt.RECNN, (cfg.token_dim, comp_in), "matrix"),
        ParamSpec("recnn/left_b", mt.RECNN, (cfg.token_dim,), "bias"),
        ParamSpec("recnn/right_W", mt.RECNN, (cfg.token_dim, comp_in), "matrix"),
        ParamSpec("recnn/right_b", mt.RECNN, (cfg.token_dim,), "bias"),
        ParamSpec("state/W_stack", mt.W_S, (cfg.state_dim, cfg.stack_dim), "matrix"),
        ParamSpec("state/d", mt.W_S, (cfg.state_dim,), "bias"),
        ParamSpec("state/W_buffer", mt.W_B, (cfg.state_dim, cfg.buffer_dim), "matrix"),
        ParamSpec("state/W_action", mt.W_A, (cfg.state_dim, cfg.action_dim), "matrix"),
    ]
    out_in = cfg.state_dim
    if task_embedding:
        specs += [ParamSpec("state/W_task", mt.W_S, (cfg.state_dim, cfg.task_dim), "matrix"),
                  ParamSpec("task_embedding", mt.TASK_EMB, (1, cfg.task_dim), "embedding")]
        out_in += cfg.task_dim
    specs += [ParamSpec("output/G", mt.G, (n_out, out_in), "matrix", "act_out"),
              ParamSpec("output/q", mt.G, (n_out,), "bias", "act_out")]
    return specs


class StackRnn:
    """LSTM over a stack of inputs with push/pop.

    ``states`` holds the (h, c) pair after each pushed input; popping drops the
    last pair, so the exposed output always equals a fresh run of the LSTM over
    the inputs currently on the stack. The first entry after construction is
    the guard and can never be popped.
    """

    def __init__(self, tape: Tape, W_x: Var, W_h: Var, b: Var, guard: Var):
        self.tape = tape
        self.weights = (W_x, W_h, b)
        hidden = W_h.value.shape[1]
        zero = tape.const(np.zeros(hidden))
        self.states: List[Tuple[Var, Var]] = [(zero, zero)]
        self.push(guard)

    def push(self, x: Var) -> None:
        h, c = self.states[-1]
        self.states.append(ad.lstm_cell(self.tape, x, h, c, *self.weights))

    def pop(self) -> None:
        if len(self.states) <= 2:
            raise ConsistencyError("pop below the guard state")
        self.states.pop()

    def output(self) -> Var:
        return self.states[-1][0]

    def __len__(self) -> int:
        """Number of entries above the guard."""
        return len(self.states) - 2


class ParserState:
    """A configuration together with the network histories that mirror it."""

    def __init__(self, config: Configuration, stack: StackRnn, buffer: StackRnn, actions: StackRnn,
                 stack_vecs: List[Var], buffer_vecs: List[Var]):
        self.config = config
        self.stack = stack
        self.buffer = buffer
        self.actions = actions
        self.stack_vecs = stack_vecs
        # front of the buffer is the last element
        self.buffer_vecs = buffer_vecs

    def check(self) -> None:
        c = self.config
        if not (len(self.stack_vecs) == len(c.stack) == len(self.stack)
                and len(self.buffer_vecs) == len(c.buffer) == len(self.buffer)):
            raise ConsistencyError(
                f"histories out of sync with {c}: stack lstm {len(self.stack)}, buffer lstm {len(self.buffer)}")


class ParseOutput(NamedTuple):
    heads: List[int]
    relations: List[str]
    actions: List[Action]
    log_prob: float


class ParserModel:
    """The parser network for a set of tasks under one parameter partition."""

    def __init__(self, config: ModelConfig, partition: mt.ParameterPartition, vocabs: VocabRegistry,
                 store: Optional[ParameterStore] = None, seed: int = 0):
        self.config = config
        self.partition = partition
        self.vocabs = vocabs
        self.inventories: Dict[int, ActionInventory] = {}
        for t in partition.task_ids:
            self.inventories[t] = ActionInventory(vocabs.get("rel", t).labels)
            act_vocab = vocabs.get("act", t)
            for a in self.inventories[t].actions:
                if str(a) not in act_vocab:
                    raise mt.ConfigurationError(f"task {t}: action {a} missing from the action vocabulary")
        for fam, group in mt.FAMILY_GROUP.items():
            if vocabs.shared[fam] != partition.is_shared(group):
                raise mt.ConfigurationError(
                    f"{fam} vocabulary sharing ({vocabs.shared[fam]}) disagrees with {group} ownership")
        self.specs: Dict[int, List[ParamSpec]] = {t: self._specs(t) for t in partition.task_ids}
        self._names = {t: {s.logical: self.resolve(s, t) for s in specs} for t, specs in self.specs.items()}
        # concrete name -> spec
        self.logical: Dict[str, ParamSpec] = {}
        for t, specs in self.specs.items():
            for spec in specs:
                self.logical[self.resolve(spec, t)] = spec
        self.store = store if store is not None else ParameterStore()
        self._initialize(np.random.default_rng(seed))
        self.rng = np.random.default_rng(seed + 1)

    def _specs(self, task_id: int) -> List[ParamSpec]:
        v = self.vocabs
        return param_specs(self.config, len(v.get("char", task_id)), len(v.get("pos", task_id)),
                           len(v.get("rel", task_id)), len(v.get("act", task_id)),
                           len(self.inventories[task_id]), self.partition.task_embedding)

    def resolve(self, spec: ParamSpec, task_id: int) -> str:
        return self.partition.resolve(spec.logical, spec.group, task_id)

    def _initialize(self, rng: np.random.Generator) -> None:
        for t in self.partition.task_ids:
            for spec in self.specs[t]:
                name = self.resolve(spec, t)
                owner = self.partition.owner_tag(spec.group, t)
                if name in self.store:
                    existing = self.store[name]
                    if existing.value.shape != spec.shape:
                        raise mt.ConfigurationError(
                            f"{name}: stored shape {existing.value.shape} != required {spec.shape}")
                    continue
                self.store.add(name, ad.initial_value(spec.init, spec.shape, rng), owner)

    def concrete_names(self, task_id: int) -> List[str]:
        return [self.resolve(s, task_id) for s in self.specs[task_id]]

    def owned_names(self, task_id: int) -> List[str]:
        """Parameters a training step on ``task_id`` may update."""
        return self.concrete_names(task_id)

    # -- network pieces ---------------------------------------------------

    def _p(self, tape: Tape, logical: str, task_id: int) -> Var:
        return tape.param(self.store[self._names[task_id][logical]])

    def _lstm(self, tape: Tape, prefix: str, task_id: int) -> Tuple[Var, Var, Var]:
        return (self._p(tape, f"{prefix}/W_x", task_id), self._p(tape, f"{prefix}/W_h", task_id),
                self._p(tape, f"{prefix}/b", task_id))

    def _char_final(self, tape: Tape, char_ids: Sequence[int], direction: str, task_id: int) -> Var:
        W_x, W_h, b = self._lstm(tape, f"char_{direction}", task_id)
        table = self._p(tape, "emb_char", task_id)
        h = c = tape.const(np.zeros(self.config.char_hidden))
        for cid in char_ids:
            h, c = ad.lstm_cell(tape, ad.lookup(tape, table, cid), h, c, W_x, W_h, b)
        return h

    def embed_token(self, tape: Tape, token: Token, task_id: int) -> Var:
        """Token vector ``ReLU(V [fw; bw; pos] + b)`` from the character BiLSTM."""
        chars = self.vocabs.get("char", task_id)
        ids = [chars.lookup(ch) for ch in token.characters]
        fw = self._char_final(tape, ids, "fw", task_id)
        bw = self._char_final(tape, ids[::-1], "bw", task_id)
        pos = ad.lookup(tape, self._p(tape, "emb_pos", task_id), self.vocabs.get("pos", task_id).lookup(token.upos))
        x = ad.affine(tape, self._p(tape, "token/V", task_id), ad.concat(tape, fw, bw, pos),
                      self._p(tape, "token/b", task_id))
        return ad.relu(tape, x)

    def compose_subtree(self, tape: Tape, head: Var, dep: Var, relation: str, direction: str, task_id: int) -> Var:
        """``tanh(C_dir [head; dep; rel] + c_dir)``; ``direction`` is LEFT_ARC or RIGHT_ARC."""
        side = "left" if direction == LEFT_ARC else "right"
        rel = ad.lookup(tape, self._p(tape, "emb_rel", task_id), self.vocabs.get("rel", task_id).lookup(relation))
        z = ad.affine(tape, self._p(tape, f"recnn/{side}_W", task_id), ad.concat(tape, head, dep, rel),
                      self._p(tape, f"recnn/{side}_b", task_id))
        return ad.tanh(tape, z)

    def task_vector(self, tape: Tape, task_id: int) -> Optional[Var]:
        if not self.partition.task_embedding:
            return None
        return ad.lookup(tape, self._p(tape, "task_embedding", task_id), 0)

    def encode_state(self, tape: Tape, state: ParserState, task_id: int, train: bool = False) -> Var:
        """``p = ReLU(W_S s + W_B b + W_A a [+ W_E e] + d)``."""
        state.check()
        pairs = [(self._p(tape, "state/W_stack", task_id), state.stack.output()),
                 (self._p(tape, "state/W_buffer", task_id), state.buffer.output()),
                 (self._p(tape, "state/W_action", task_id), state.actions.output())]
        e = self.task_vector(tape, task_id)
        if e is not None:
            pairs.append((self._p(tape, "state/W_task", task_id), e))
        p = ad.relu(tape, ad.affine_sum(tape, pairs, self._p(tape, "state/d", task_id)))
        if train and self.config.dropout > 0:
            p = ad.dropout(tape, p, self.config.dropout, self.rng)
        return p

    def action_logits(self, tape: Tape, p: Var, task_id: int) -> Var:
        e = self.task_vector(tape, task_id)
        features = p if e is None else ad.concat(tape, p, e)
        return ad.affine(tape, self._p(tape, "output/G", task_id), features, self._p(tape, "output/q", task_id))

    def score_actions(self, tape: Tape, p: Var, task_id: int, mask) -> np.ndarray:
        """Probabilities over the task's action inventory; zero where ``mask`` is False."""
        return ad.masked_softmax(self.action_logits(tape, p, task_id).value, np.asarray(mask, dtype=bool))

    def start(self, tape: Tape, sentence: Sentence, task_id: int) -> ParserState:
        config = initial_config(sentence)
        cache: Dict[Tuple[str, str], Var] = {}
        vecs = []
        for tok in sentence:
            key = (tok.form, tok.upos)
            if key not in cache:
                cache[key] = self.embed_token(tape, tok, task_id)
            vecs.append(cache[key])
        stack = StackRnn(tape, *self._lstm(tape, "lstm_stack", task_id), self._p(tape, "lstm_stack/guard", task_id))
        root = self._p(tape, "lstm_stack/root", task_id)
        stack.push(root)
        buffer = StackRnn(tape, *self._lstm(tape, "lstm_buffer", task_id), self._p(tape, "lstm_buffer/guard", task_id))
        buffer_vecs = []
        for v in reversed(vecs):
            buffer.push(v)
            buffer_vecs.append(v)
        actions = StackRnn(tape, *self._lstm(tape, "lstm_action", task_id), self._p(tape, "lstm_action/guard", task_id))
        return ParserState(config, stack, buffer, actions, [root], buffer_vecs)

    def advance(self, tape: Tape, state: ParserState, action: Action, task_id: int) -> None:
        """Apply ``action`` to the configuration and mirror it in the histories."""
        state.config = apply(state.config, action)
        sv = state.stack_vecs
        if action.kind == SHIFT:
            vec = state.buffer_vecs.pop()
            state.buffer.pop()
            state.stack.push(vec)
            sv.append(vec)
        elif action.kind == SWAP:
            top, second = sv.pop(), sv.pop()
            state.stack.pop()
            state.stack.pop()
            state.stack.push(top)
            sv.append(top)
            state.buffer.push(second)
            state.buffer_vecs.append(second)
        else:
            top, second = sv.pop(), sv.pop()
            state.stack.pop()
            state.stack.pop()
            if action.kind == LEFT_ARC:
                comp = self.compose_subtree(tape, top, second, action.relation, LEFT_ARC, task_id)
            else:
                comp = self.compose_subtree(tape, second, top, action.relation, RIGHT_ARC, task_id)
            state.stack.push(comp)
            sv.append(comp)
        act_id = self.vocabs.get("act", task_id).lookup(str(action))
        state.actions.push(ad.lookup(tape, self._p(tape, "emb_act", task_id), act_id))

    # -- whole-sentence computations --------------------------------------

    def sentence_loss(self, tape: Tape, sentence: Sentence, task_id: int, gold: Sequence[Action],
                      train: bool = True) -> Var:
        """Summed cross-entropy of the gold transitions."""
        inventory = self.inventories[task_id]
        state = self.start(tape, sentence, task_id)
        losses = []
        for action in gold:
            mask = inventory.mask(valid_actions(state.config))
            p = self.encode_state(tape, state, task_id, train)
            logits = self.action_logits(tape, p, task_id)
            losses.append(ad.softmax_cross_entropy(tape, logits, mask, inventory.index(action)))
            self.advance(tape, state, action, task_id)
        if not is_terminal(state.config):
            raise ConsistencyError("gold sequence does not end in a terminal configuration")
        return ad.add_n(tape, losses)

    def parse(self, sentence: Sentence, task_id: int) -> ParseOutput:
        """Greedy decoding: the most probable legal action at every step.

        Ties go to the earliest action in inventory order.
        """
        tape = Tape(enabled=False)
        inventory = self.inventories[task_id]
        state = self.start(tape, sentence, task_id)
        actions: List[Action] = []
        log_prob = 0.0
        ceiling = step_ceiling(len(sentence))
        while not is_terminal(state.config):
            mask = inventory.mask(valid_actions(state.config))
            probs = self.score_actions(tape, self.encode_state(tape, state, task_id), task_id, mask)
            best = int(np.argmax(probs))
            log_prob += math.log(probs[best])
            action = inventory[best]
            self.advance(tape, state, action, task_id)
            actions.append(action)
            if len(actions) > ceiling:
                raise ConsistencyError("decoder exceeded the transition ceiling")
        heads = [0] * len(sentence)
        rels = [""] * len(sentence)
        for h, d, r in state.config.arcs:
            heads[d - 1] = h
            rels[d - 1] = r
        return ParseOutput(heads, rels, actions, log_prob)

    def manifest(self) -> dict:
        return {"model_config": self.config.to_dict(), "partition": self.partition.to_dict(),
                "vocabularies": self.vocabs.to_dict()}

    @classmethod
    def from_manifest(cls, store: ParameterStore, manifest: dict) -> "ParserModel":
        return cls(ModelConfig.from_dict(manifest["model_config"]),
                   mt.ParameterPartition.from_dict(manifest["partition"]),
                   VocabRegistry.from_dict(manifest["vocabularies"]), store)
