"""Self-checks: oracle round-trips over a treebank and finite-difference
gradient checks for every autodiff primitive and the full parser loss."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import multitask as mt
from .autodiff import Tape, Var
from .model import ModelConfig, ParserModel
from .synthetic import random_nonprojective_tree
from .transition import SWAP, is_projective, is_terminal, run, static_oracle
from .treebank_io import Sentence, TaskSpec, Treebank, TreebankError, build_vocabularies

# -- oracle round-trip ------------------------------------------------------


@dataclass
class OracleStats:
    sentences: int = 0
    reproduced: int = 0
    nonprojective: int = 0
    swaps: int = 0
    transitions: List[int] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def success_rate(self) -> float:
        return 100.0 * self.reproduced / self.sentences if self.sentences else 100.0

    @property
    def nonprojective_rate(self) -> float:
        return 100.0 * self.nonprojective / self.sentences if self.sentences else 0.0

    def format(self) -> str:
        lines = [f"sentences       {self.sentences}",
                 f"round-trip      {self.success_rate:.2f}%",
                 f"non-projective  {self.nonprojective_rate:.2f}%",
                 f"swaps           {self.swaps}",
                 f"max actions     {max(self.transitions, default=0)}",
                 f"mean actions    {np.mean(self.transitions) if self.transitions else 0.0:.2f}",
                 f"seconds         {self.seconds:.2f}"]
        lines += self.failures[:20]
        return "\n".join(lines)


def oracle_check(sentences: Sequence[Sentence]) -> OracleStats:
    """Run the static oracle on every sentence and replay it."""
    stats = OracleStats()
    start = time.perf_counter()
    for k, sentence in enumerate(sentences, start=1):
        stats.sentences += 1
        if not is_projective(sentence):
            stats.nonprojective += 1
        try:
            actions = static_oracle(sentence)
            config = run(sentence, actions)
        except TreebankError as err:
            stats.failures.append(f"sentence {k}: {err}")
            continue
        stats.swaps += sum(a.kind == SWAP for a in actions)
        stats.transitions.append(len(actions))
        if is_terminal(config) and set(config.arcs) == sentence.arcs():
            stats.reproduced += 1
        else:
            stats.failures.append(f"sentence {k}: replay does not reproduce the gold arcs")
    stats.seconds = time.perf_counter() - start
    return stats


# -- gradient checks --------------------------------------------------------

TOLERANCE = 1e-4
# tighter bounds for primitives whose finite differences are well conditioned
PRIMITIVE_TOLERANCE = {"affine": 1e-6, "lstm_cell": 1e-5}


def _leaf(value: np.ndarray) -> Var:
    return Var(value, True, np.zeros_like(value))


def check_function(build: Callable[[Tape, Dict[str, Var]], Var], inputs: Dict[str, np.ndarray],
                   rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Largest per-input relative error of ``build``'s gradient.

    The output is reduced to a scalar with a fixed random projection.
    """
    probe_tape = Tape(enabled=False)
    out_shape = build(probe_tape, {k: Var(v) for k, v in inputs.items()}).value.shape
    proj = rng.normal(size=out_shape)

    tape = Tape()
    leaves = {k: _leaf(v) for k, v in inputs.items()}
    out = build(tape, leaves)
    tape.backward(out, proj)

    def f() -> float:
        return float(np.sum(proj * build(Tape(enabled=False), {k: Var(v) for k, v in inputs.items()}).value))

    worst = 0.0
    for k, value in inputs.items():
        numeric = ad.numeric_gradient(f, value, eps)
        worst = max(worst, ad.relative_error(leaves[k].grad, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def random_instance(name: str, rng: np.random.Generator):
    """Random inputs and a builder for one primitive."""
    m, n = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    if name == "lookup":
        rows = int(rng.integers(1, 6))
        idx = int(rng.integers(rows))
        return {"T": rng.normal(size=(rows, n))}, lambda t, v: ad.lookup(t, v["T"], idx)
    if name == "concat":
        k = int(rng.integers(1, 4))
        data = {f"x{i}": rng.normal(size=int(rng.integers(1, 5))) for i in range(k)}
        return data, lambda t, v: ad.concat(t, *[v[f"x{i}"] for i in range(k)])
    if name == "affine":
        return ({"W": rng.normal(size=(m, n)), "x": rng.normal(size=n), "b": rng.normal(size=m)},
                lambda t, v: ad.affine(t, v["W"], v["x"], v["b"]))
    if name == "affine_sum":
        n2 = int(rng.integers(1, 6))
        return ({"W1": rng.normal(size=(m, n)), "x1": rng.normal(size=n), "W2": rng.normal(size=(m, n2)),
                 "x2": rng.normal(size=n2), "b": rng.normal(size=m)},
                lambda t, v: ad.affine_sum(t, [(v["W1"], v["x1"]), (v["W2"], v["x2"])], v["b"]))
    if name in ("relu", "tanh", "sigmoid"):
        fn = getattr(ad, name)
        return {"x": _away_from_zero(rng, m)}, lambda t, v: fn(t, v["x"])
    if name in ("add", "mul"):
        fn = getattr(ad, name)
        return {"a": rng.normal(size=m), "b": rng.normal(size=m)}, lambda t, v: fn(t, v["a"], v["b"])
    if name == "add_n":
        k = int(rng.integers(1, 4))
        return ({f"x{i}": rng.normal(size=m) for i in range(k)},
                lambda t, v: ad.add_n(t, [v[f"x{i}"] for i in range(k)]))
    if name == "dropout":
        seed = int(rng.integers(1 << 30))
        # same mask on every evaluation
        return ({"x": rng.normal(size=m + 2)},
                lambda t, v: ad.dropout(t, v["x"], 0.3, np.random.default_rng(seed)))
    if name == "softmax_cross_entropy":
        k = m + 1
        mask = rng.random(k) < 0.6
        gold = int(rng.integers(k))
        mask[gold] = True
        return {"z": rng.normal(size=k)}, lambda t, v: ad.softmax_cross_entropy(t, v["z"], mask, gold)
    if name == "lstm_cell":
        H, d = m, n
        data = {"x": rng.normal(size=d), "h": rng.normal(size=H), "c": rng.normal(size=H),
                "W_x": rng.normal(size=(4 * H, d)) * 0.5, "W_h": rng.normal(size=(4 * H, H)) * 0.5,
                "b": rng.normal(size=4 * H) * 0.5}

        def build(t, v):
            h, c = ad.lstm_cell(t, v["x"], v["h"], v["c"], v["W_x"], v["W_h"], v["b"])
            return ad.concat(t, h, c)
        return data, build
    raise KeyError(name)


PRIMITIVES = ("lookup", "concat", "affine", "affine_sum", "relu", "tanh", "sigmoid", "add", "mul", "add_n",
              "dropout", "softmax_cross_entropy", "lstm_cell")


def primitive_errors(seed: int = 0, instances: int = 20) -> Dict[str, float]:
    """Max relative error per primitive over ``instances`` random cases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in PRIMITIVES:
        worst = 0.0
        for _ in range(instances):
            data, build = random_instance(name, rng)
            worst = max(worst, check_function(build, data, rng))
        out[name] = worst
    return out


GRADCHECK_MODEL = ModelConfig(char_dim=4, pos_dim=3, rel_dim=3, act_dim=3, char_hidden=3, token_dim=5,
                              stack_dim=4, buffer_dim=4, action_dim=4, state_dim=4, task_dim=2)


def swap_sentence(rng: random.Random, max_len: int = 5) -> Sentence:
    """A random non-projective sentence whose oracle uses SWAP."""
    while True:
        s = random_nonprojective_tree(rng.randint(3, max_len), rng)
        if any(a.kind == SWAP for a in static_oracle(s)):
            return s


def model_errors(sentence: Sentence, seed: int = 0, strategy: str = "SUP", per_tensor: int = 12,
                 config: ModelConfig = GRADCHECK_MODEL) -> Dict[str, float]:
    """Relative error of d(sentence loss)/d(parameter) for every tensor.

    Each tensor is probed on its largest analytic entries plus a few random
    ones; unused tensors (zero in both) report 0.
    """
    task = TaskSpec(0, Treebank([sentence]), role="primary", weight=1.0)
    partition = mt.build_partition(strategy, [task])
    model = ParserModel(config, partition, build_vocabularies([task], partition), seed=seed)
    rng = np.random.default_rng(seed)
    # break the near-zero embedding initialization so every path carries signal
    for p in model.store:
        p.value += rng.normal(scale=0.3, size=p.value.shape)
    gold = static_oracle(sentence)

    tape = Tape()
    loss = model.sentence_loss(tape, sentence, 0, gold, train=False)
    model.store.zero_grad()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in model.store}

    def f() -> float:
        return float(model.sentence_loss(Tape(enabled=False), sentence, 0, gold, train=False).value)

    errors = {}
    for p in model.store:
        flat = np.abs(analytic[p.name]).ravel()
        top = list(np.argsort(-flat, kind="stable")[:per_tensor // 2 + 1])
        extra = list(rng.choice(flat.size, size=min(flat.size, per_tensor // 2), replace=False))
        idx = [np.unravel_index(int(i), p.value.shape) for i in dict.fromkeys(top + extra)]
        numeric = ad.numeric_gradient(f, p.value, indices=idx)
        errors[p.name] = ad.relative_error(analytic[p.name], numeric)
    return errors


@dataclass
class GradReport:
    primitives: Dict[str, float]
    model: Dict[str, float]
    seconds: float

    def failures(self) -> List[str]:
        bad = [k for k, e in self.primitives.items() if e >= PRIMITIVE_TOLERANCE.get(k, TOLERANCE)]
        bad += [k for k, e in self.model.items() if e >= TOLERANCE]
        return bad

    def format(self) -> str:
        lines = [f"{'primitive':<24}{'max rel. error':>16}{'bound':>10}"]
        for k, e in self.primitives.items():
            lines.append(f"{k:<24}{e:>16.3e}{PRIMITIVE_TOLERANCE.get(k, TOLERANCE):>10.0e}")
        worst = max(self.model.items(), key=lambda kv: kv[1]) if self.model else ("-", 0.0)
        lines.append(f"{'sentence loss':<24}{worst[1]:>16.3e}{TOLERANCE:>10.0e}   (worst: {worst[0]})")
        lines.append(f"{'seconds':<24}{self.seconds:>16.2f}")
        return "\n".join(lines)


GRADCHECK_STRATEGIES = ("SUP", "MONO_HETERO", "MULTI_UNIV")


def grad_check(seed: int = 0, instances: int = 20, sentences: int = 3) -> GradReport:
    start = time.perf_counter()
    prims = primitive_errors(seed, instances)
    rng = random.Random(seed)
    model: Dict[str, float] = {}
    for k in range(sentences):
        # cycle strategies so the task-embedding path is covered too
        strategy = GRADCHECK_STRATEGIES[k % len(GRADCHECK_STRATEGIES)]
        errs = model_errors(swap_sentence(rng), seed + k, strategy)
        for name, e in errs.items():
            model[name] = max(model.get(name, 0.0), e)
    return GradReport(prims, model, time.perf_counter() - start)
