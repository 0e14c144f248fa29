"""Acceptance suite. Each test prints one PASS/FAIL line and asserts.

Run with ``pytest tests/test_acceptance.py -s`` (the verdict lines are
printed even without ``-s``). Set MTPARSER_ORACLE_TREEBANK to a CoNLL file
to add a real treebank sample to the oracle round-trip.
"""
import os
import random
import statistics
import time

import numpy as np
import pytest

from conftest import SMALL
from mtparser.autodiff import save_archive
from mtparser.cli import main
from mtparser.diagnostics import grad_check, oracle_check
from mtparser.evaluation import evaluate, score
from mtparser.synthetic import ToyGrammar, random_tree, random_treebank
from mtparser.training import (TaskCursor, TrainConfig, Trainer, build_model, oracle_instances, pretrain_finetune,
                               sample_task, train)
from mtparser.treebank_io import TaskSpec, Token, Sentence, Treebank, read_conll_file


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_oracle_round_trip(verdict):
    start = time.perf_counter()
    sentences = list(random_treebank(10000, random.Random(0), max_len=10, nonprojective_share=0.3))
    extra = os.environ.get("MTPARSER_ORACLE_TREEBANK")
    if extra:
        sentences += list(read_conll_file(extra))
    stats = oracle_check(sentences)
    seconds = time.perf_counter() - start
    ok = (stats.reproduced == stats.sentences and stats.nonprojective_rate >= 30.0 and seconds < 60
          and max(len(s) for s in sentences[:10000]) <= 10)
    verdict("oracle round-trip", ok,
            f"{stats.reproduced}/{stats.sentences} reproduced, {stats.nonprojective_rate:.1f}% non-projective, "
            f"{seconds:.1f}s")


def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    report = grad_check(seed=0, instances=20, sentences=3)
    seconds = time.perf_counter() - start
    worst = max(list(report.primitives.values()) + list(report.model.values()))
    verdict("gradient fidelity", worst < 1e-4 and seconds < 120,
            f"max relative error {worst:.2e} over {len(report.primitives)} primitives and "
            f"{len(report.model)} model tensors, {seconds:.1f}s")


def _isolation_violations(strategy, steps=100, seed=0):
    g = ToyGrammar(seed)
    t1 = g.treebank(30, 1, "univ")
    t2 = g.treebank(30, 2, "univ")
    tasks = [TaskSpec(1, t1, role="primary", weight=0.5), TaskSpec(2, t2, role="source", weight=0.5)]
    model = build_model(tasks, strategy, SMALL, seed)
    trainer = Trainer(model, TrainConfig(seed=seed))
    rng = np.random.default_rng(seed)
    cursors = {t.task_id: TaskCursor(oracle_instances(t)[0], rng) for t in tasks}
    shared = [n for n in model.store.names() if n.startswith("shared/")]
    other_owned = {1: [n for n in model.owned_names(2) if not n.startswith("shared/")],
                   2: [n for n in model.owned_names(1) if not n.startswith("shared/")]}
    violations = task1_steps = 0
    for _ in range(steps):
        task = sample_task({1: 0.5, 2: 0.5}, rng)
        before = model.store.snapshot()
        trainer.step(task, *cursors[task].next(), 0.1)
        moved = {n for n in model.store.names() if model.store[n].value.tobytes() != before[n].tobytes()}
        task1_steps += task == 1
        violations += bool(moved & set(other_owned[task])) + (not moved & set(shared))
    return violations, task1_steps


def test_partition_isolation(verdict):
    results = {s: _isolation_violations(s) for s in ("SMTL", "MULTI_UNIV", "MONO_HETERO")}
    total = sum(v for v, _ in results.values())
    detail = ", ".join(f"{s} {v} violations ({n} task-1 steps)" for s, (v, n) in results.items())
    verdict("partition isolation", total == 0 and all(n > 0 for _, n in results.values()), detail)


SHARING_TABLE = {
    ("Shared", "MULTI_UNIV"): ["LSTM(S)", "LSTM(B)", "RecNN", "W_A", "W_S", "W_B", "E_pos", "E_rel", "E_act"],
    ("Shared", "MONO_HETERO"): ["LSTM(S)", "LSTM(B)", "BiLSTM(chars)", "RecNN", "W_A", "W_S", "W_B", "E_pos",
                                "E_char"],
    ("Task-specific", "MULTI_UNIV"): ["LSTM(A)", "BiLSTM(chars)", "g", "E_char", "e^t"],
    ("Task-specific", "MONO_HETERO"): ["LSTM(A)", "g", "E_rel", "E_act", "e^t"],
}


def _read_dump(text):
    lines = text.rstrip("\n").split("\n")
    header = lines[0]
    starts = [k for k in range(len(header)) if header[k] != " " and (k == 0 or header[k - 1] == " ")]
    names = header.split()
    cells, section = {}, None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line[:starts[0]].strip():
            section = line[:starts[0]].strip()
        for k, name in enumerate(names):
            end = starts[k + 1] if k + 1 < len(starts) else None
            value = line[starts[k]:end].strip()
            if value:
                cells.setdefault((section, name), []).append(value)
    return cells


def test_table_conformance(verdict, capsys):
    assert main(["diagnose", "partition-dump", "--strategy", "MULTI_UNIV", "--strategy", "MONO_HETERO"]) == 0
    cells = _read_dump(capsys.readouterr().out)
    bad = [key for key, want in SHARING_TABLE.items() if cells.get(key) != want]
    extra = set(cells) - set(SHARING_TABLE)
    verdict("sharing table conformance", not bad and not extra,
            f"{len(SHARING_TABLE) - len(bad)}/{len(SHARING_TABLE)} cells match" + (f", mismatched {bad}" if bad else ""))


def test_overfit(verdict):
    start = time.perf_counter()
    tb = ToyGrammar(0).treebank(32, 1, "univ")
    task = TaskSpec(0, tb, role="primary", weight=1.0)
    cfg = TrainConfig(max_epochs=30, optimizer="adam", learning_rate=0.005, lr_decay=1.0)
    result = train([task], "SUP", SMALL, cfg)
    uas = evaluate(result.model, tb, 0).uas
    seconds = time.perf_counter() - start
    verdict("overfit smoke test", uas >= 99.0 and seconds < 300, f"train UAS {uas:.2f} after 30 epochs, {seconds:.1f}s")


def _mtl_pair(seed):
    g = ToyGrammar(100 + seed)
    source = g.treebank(500, 1000 + seed, "conll")
    target = g.treebank(50, 2000 + seed, "univ")
    held_out = g.treebank(100, 3000 + seed, "univ")
    sup = train([TaskSpec(1, target, dev=held_out, role="primary", weight=1.0)], "SUP", SMALL,
                TrainConfig(seed=seed, max_epochs=30))
    mtl = train([TaskSpec(0, source, role="source", weight=0.5),
                 TaskSpec(1, target, dev=held_out, role="primary", weight=0.5)],
                "MONO_HETERO", SMALL, TrainConfig(seed=seed, max_epochs=10))
    return evaluate(sup.model, held_out, 1).uas, evaluate(mtl.model, held_out, 1).uas


@pytest.mark.slow
def test_mtl_benefit(verdict):
    start = time.perf_counter()
    pairs = [_mtl_pair(seed) for seed in range(5)]
    seconds = time.perf_counter() - start
    sup = [s for s, _ in pairs]
    mtl = [m for _, m in pairs]
    wins = sum(m >= s for s, m in pairs)
    ok = statistics.median(mtl) >= statistics.median(sup) - 1.0 and wins >= 3 and seconds < 1800
    verdict("MTL benefit", ok,
            f"median UAS MONO_HETERO {statistics.median(mtl):.2f} vs SUP {statistics.median(sup):.2f}, "
            f"MONO_HETERO >= SUP in {wins}/5 seeds, {seconds:.0f}s")


def test_weighted_sampling(verdict):
    rng = np.random.default_rng(0)
    draws = [sample_task({0: 0.9, 1: 0.1}, rng) for _ in range(100_000)]
    freq = draws.count(0) / len(draws)
    verdict("weighted sampling", abs(freq - 0.9) <= 0.01, f"source frequency {freq:.4f}")


def _pos_task(pos):
    words = ["a", "b", "c"]
    tokens = tuple(Token(i + 1, words[i], pos[i], [0, 1, 1][i], ["root", "det", "amod"][i]) for i in range(3))
    return TaskSpec(0, Treebank([Sentence(tokens)] * 4), role="primary", weight=1.0)


def test_cascaded_transfer(verdict):
    source, target = _pos_task(["DET", "NOUN", "ADJ"]), _pos_task(["VERB", "NOUN", "ADJ"])
    # zero stage-2 steps leaves the model exactly as initialized
    stage1, stage2, report = pretrain_finetune(source, target, SMALL, TrainConfig(max_epochs=3),
                                               TrainConfig(max_steps=0))
    src, dst = stage1.model, stage2.model
    fresh = build_model([target], "CAS", SMALL, 0)
    problems = []
    for spec in dst.specs[0]:
        name = dst.resolve(spec, 0)
        value, init = dst.store[name].value, fresh.store[name].value
        other = src.store[src.resolve(spec, 0)].value
        if spec.family is None:
            if value.tobytes() != other.tobytes():
                problems.append(name)
            continue
        if spec.family == "act_out":
            keys_dst = [str(a) for a in dst.inventories[0].actions]
            keys_src = [str(a) for a in src.inventories[0].actions]
        else:
            keys_dst = dst.vocabs.get(spec.family, 0).symbols
            keys_src = src.vocabs.get(spec.family, 0).symbols
        for k, sym in enumerate(keys_dst):
            want = other[keys_src.index(sym)] if sym in keys_src else init[k]
            if value[k].tobytes() != want.tobytes():
                problems.append(f"{name}[{sym}]")
    pos_dst, pos_src = dst.vocabs.get("pos", 0), src.vocabs.get("pos", 0)
    emb = dst.store["task0/emb_pos"].value
    golden = (emb[pos_dst.lookup("NOUN")].tobytes() == src.store["task0/emb_pos"].value[pos_src.lookup("NOUN")].tobytes()
              and emb[pos_dst.lookup("VERB")].tobytes() == fresh.store["task0/emb_pos"].value[pos_dst.lookup("VERB")].tobytes()
              and "task0/emb_pos" in report.partial)
    verdict("cascaded transfer", not problems and golden,
            f"{len(report.copied)} tensors copied whole, {len(report.partial)} row-wise, {len(problems)} mismatches")


def _checkpoint(tmp_path, tag):
    g = ToyGrammar(0)
    tasks = [TaskSpec(0, g.treebank(20, 1, "conll"), role="source", weight=0.5),
             TaskSpec(1, g.treebank(20, 2, "univ"), role="primary", weight=0.5)]
    result = train(tasks, "MONO_HETERO", SMALL, TrainConfig(seed=7, max_steps=100))
    path = tmp_path / f"{tag}.archive"
    save_archive(path, result.model.store, result.model.manifest())
    return path.read_bytes(), result.model.store.step


def test_determinism(verdict, tmp_path):
    a, steps = _checkpoint(tmp_path, "a")
    b, _ = _checkpoint(tmp_path, "b")
    verdict("determinism", a == b and steps == 100, f"{len(a)}-byte checkpoints after {steps} steps identical: {a == b}")


def _chain(heads, rels=None):
    rels = rels or ["root" if h == 0 else "dep" for h in heads]
    return Sentence(tuple(Token(i + 1, f"w{i}", "NOUN", h, r) for i, (h, r) in enumerate(zip(heads, rels))))


def test_evaluation_arithmetic(verdict):
    heads = [2, 3, 4, 5, 6, 7, 8, 9, 10, 0]
    gold = [_chain(heads)]
    same = score(gold, gold)
    wrong_head = score(gold, [_chain([3] + heads[1:])])
    rels = ["root" if h == 0 else "dep" for h in heads]
    wrong_label = score(gold, [_chain(heads, ["amod"] + rels[1:])])
    hand = ((same.uas, same.las) == (100.0, 100.0)
            and (wrong_head.uas, wrong_head.las) == (90.0, 90.0)
            and (wrong_label.uas, wrong_label.las) == (100.0, 90.0))
    rng = random.Random(0)
    fuzz_bad = 0
    for _ in range(2000):
        g = random_tree(rng.randint(1, 10), rng)
        p = g.with_parse([rng.randint(0, len(g)) if rng.random() < 0.3 else t.head for t in g],
                         [rng.choice("abc") if rng.random() < 0.3 else t.deprel for t in g])
        rep = score([g], [p])
        fuzz_bad += not (rep.las <= rep.uas)
    verdict("evaluation arithmetic", hand and fuzz_bad == 0,
            f"hand cases {'exact' if hand else 'wrong'}, LAS > UAS in {fuzz_bad}/2000 fuzzed predictions")
