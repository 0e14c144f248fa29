import numpy as np
import pytest

from conftest import SMALL, make_sentence
from mtparser import multitask as mt
from mtparser.model import ParserModel
from mtparser.multitask import ConfigurationError, SharingStrategy, build_partition, format_table
from mtparser.synthetic import ToyGrammar
from mtparser.treebank_io import TaskSpec, Treebank, build_vocabularies

SHARING_TABLE = {
    "MULTI_UNIV": {
        "Shared": ["LSTM(S)", "LSTM(B)", "RecNN", "W_A", "W_S", "W_B", "E_pos", "E_rel", "E_act"],
        "Task-specific": ["LSTM(A)", "BiLSTM(chars)", "g", "E_char", "e^t"],
    },
    "MONO_HETERO": {
        "Shared": ["LSTM(S)", "LSTM(B)", "BiLSTM(chars)", "RecNN", "W_A", "W_S", "W_B", "E_pos", "E_char"],
        "Task-specific": ["LSTM(A)", "g", "E_rel", "E_act", "e^t"],
    },
}


@pytest.mark.parametrize("strategy", sorted(SHARING_TABLE))
def test_table_assignments(strategy):
    table = build_partition(strategy, [0, 1]).table()
    for section, groups in SHARING_TABLE[strategy].items():
        assert sorted(table[section]) == sorted(groups)


def test_table_examples():
    mu = build_partition("MULTI_UNIV", [0, 1])
    assert mu.is_shared(mt.E_POS) and not mu.is_shared(mt.E_CHAR)
    mh = build_partition("MONO_HETERO", [0, 1])
    assert not mh.is_shared(mt.E_ACT) and mh.is_shared(mt.BILSTM_CHARS)
    assert mu.task_embedding and mh.task_embedding


def test_resolve_examples():
    mu = build_partition("MULTI_UNIV", [0, 1])
    assert mu.resolve("lstm_action/W_x", mt.LSTM_A, 1) == "task1/lstm_action/W_x"
    assert mu.resolve("recnn/left_W", mt.RECNN, 0) == mu.resolve("recnn/left_W", mt.RECNN, 1) == "shared/recnn/left_W"
    smtl = build_partition("SMTL", [1, 2])
    assert smtl.resolve("emb_char", mt.E_CHAR, 2) == "task2/emb_char"
    assert not smtl.task_embedding
    with pytest.raises(ConfigurationError):
        smtl.resolve("task_embedding", mt.TASK_EMB, 1)
    with pytest.raises(ConfigurationError):
        mu.resolve("x", mt.RECNN, 9)


def test_smtl_shares_everything_but_chars_and_output():
    p = build_partition("SMTL", [0, 1])
    assert {g for g in mt.GROUPS if not p.is_shared(g)} == {mt.E_CHAR, mt.G, mt.TASK_EMB}
    assert p.is_shared(mt.BILSTM_CHARS)


def test_sup_and_cas_are_single_task():
    for s in ("SUP", "CAS"):
        p = build_partition(s, [3])
        assert not any(p.is_shared(g) for g in mt.GROUPS)
        assert not p.task_embedding
        with pytest.raises(ConfigurationError):
            build_partition(s, [0, 1])


def _tasks(rel_sets):
    tasks = []
    for k, rels in enumerate(rel_sets):
        s = make_sentence([0] + [1] * (len(rels)), ["root"] + list(rels))
        tasks.append(TaskSpec(k, Treebank([s]), role="primary" if k == 0 else "source", weight=1 / len(rel_sets)))
    return tasks


def test_multi_univ_requires_identical_relations():
    build_partition("MULTI_UNIV", _tasks([["det"], ["det"]]))
    with pytest.raises(ConfigurationError, match="relation"):
        build_partition("MULTI_UNIV", _tasks([["det"], ["NMOD"]]))


def test_custom_validation():
    ok = {g: mt.SHARED for g in mt.GROUPS}
    ok[mt.G] = ok[mt.TASK_EMB] = mt.TASK
    build_partition("CUSTOM", [0, 1], ok)
    bad = dict(ok, g="shared")
    with pytest.raises(ConfigurationError, match="g"):
        build_partition("CUSTOM", [0, 1], bad)
    with pytest.raises(ConfigurationError):
        build_partition("CUSTOM", [0, 1], dict(ok, **{"e^t": "shared"}))
    with pytest.raises(ConfigurationError, match="relation"):
        build_partition("CUSTOM", [0, 1], dict(ok, E_rel="task"))
    with pytest.raises(ConfigurationError):
        build_partition("CUSTOM", [0, 1], {"LSTM(S)": "shared"})
    with pytest.raises(ConfigurationError):
        build_partition("CUSTOM", [0, 1], dict(ok, Bogus="shared"))
    with pytest.raises(ConfigurationError):
        build_partition("CUSTOM", [0, 1])
    with pytest.raises(ConfigurationError):
        SharingStrategy.parse("nope")


def test_smtl_equals_custom_table():
    smtl = build_partition("SMTL", [0, 1])
    custom = build_partition("CUSTOM", [0, 1], dict(smtl.ownership), task_embedding=False)
    assert custom.ownership == smtl.ownership
    assert custom.task_embedding == smtl.task_embedding
    assert custom.table() == smtl.table()


def test_partition_dict_round_trip():
    p = build_partition("MONO_HETERO", [0, 1])
    assert mt.ParameterPartition.from_dict(p.to_dict()) == p


def _model(strategy, tasks):
    partition = build_partition(strategy, tasks)
    return ParserModel(SMALL, partition, build_vocabularies(tasks, partition))


def test_single_task_multi_univ_collapses_to_sup():
    tb = ToyGrammar(0).treebank(5, 1, "univ")
    tasks = [TaskSpec(0, tb, role="primary", weight=1.0)]
    sup, mu = _model("SUP", tasks), _model("MULTI_UNIV", tasks)
    task_terms = {"state/W_task", "task_embedding", "output/G"}

    def shapes(model):
        return {model.logical[n].logical: model.store[n].value.shape for n in model.store.names()
                if model.logical[n].logical not in task_terms}

    assert shapes(sup) == shapes(mu)
    assert not any(n.startswith("shared/") for n in sup.store.names())
    # with one task every parameter is updated by that task's steps either way
    assert set(mu.owned_names(0)) == set(mu.store.names())


def test_vocabulary_sharing_must_match_partition():
    tb = ToyGrammar(0).treebank(5, 1, "univ")
    tasks = [TaskSpec(0, tb, role="primary", weight=0.5), TaskSpec(1, tb, role="source", weight=0.5)]
    mu = build_partition("MULTI_UNIV", tasks)
    mh = build_partition("MONO_HETERO", tasks)
    with pytest.raises(ConfigurationError):
        ParserModel(SMALL, mu, build_vocabularies(tasks, mh))


def test_task_embedding_table():
    tb = ToyGrammar(0).treebank(5, 1, "univ")
    tasks = [TaskSpec(0, tb, role="primary", weight=0.5), TaskSpec(1, tb, role="source", weight=0.5)]
    model = _model("MONO_HETERO", tasks)
    table = mt.task_embedding_table(model.store, model.partition)
    assert table.shape == (2, SMALL.task_dim)
    np.testing.assert_array_equal(table[1], model.store["task1/task_embedding"].value[0])


def test_format_table_layout():
    text = format_table({"MULTI_UNIV": build_partition("MULTI_UNIV", [0, 1])})
    lines = text.splitlines()
    assert lines[1].split() == ["Shared", "LSTM(S)"]
    assert "Task-specific" in text and text.endswith("\n")
