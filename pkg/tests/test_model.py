import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, TINY, make_sentence
from mtparser import autodiff as ad
from mtparser import multitask as mt
from mtparser.autodiff import Tape
from mtparser.diagnostics import model_errors, swap_sentence
from mtparser.model import ConsistencyError, ModelConfig, ParserModel, StackRnn
from mtparser.synthetic import ToyGrammar, random_tree
from mtparser.transition import (LEFT_ARC, RIGHT_ARC, SHIFT, SWAP, Action, is_terminal, static_oracle,
                                 step_ceiling, valid_actions)
from mtparser.treebank_io import TaskSpec, Treebank, build_vocabularies


def single_model(sentences, config=SMALL, strategy="SUP", seed=0):
    task = TaskSpec(0, Treebank(list(sentences)), role="primary", weight=1.0)
    partition = mt.build_partition(strategy, [task])
    return ParserModel(config, partition, build_vocabularies([task], partition), seed=seed), task


def multi_model(strategy, config=SMALL, custom=None, seed=0):
    # same sentences for both tasks so relation inventories agree
    tb = ToyGrammar(0).treebank(8, 1, "univ")
    tasks = [TaskSpec(0, tb, role="source", weight=0.5), TaskSpec(1, tb, role="primary", weight=0.5)]
    partition = mt.build_partition(strategy, tasks, custom)
    return ParserModel(config, partition, build_vocabularies(tasks, partition), seed=seed), tasks


def randomize(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.store:
        p.value += rng.normal(scale=scale, size=p.value.shape)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(token_dim=0)
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_embed_token_shape_and_zero_projection(passive_sentence):
    model, _ = single_model([passive_sentence])
    t = Tape()
    for tok in passive_sentence:
        assert model.embed_token(t, tok, 0).value.shape == (SMALL.token_dim,)
    model.store["task0/token/V"].value[...] = 0.0
    model.store["task0/token/b"].value[...] = 0.0
    assert np.all(model.embed_token(Tape(), passive_sentence[1], 0).value == 0.0)


def test_embed_token_identical_inputs_and_task_specific_chars():
    model, tasks = multi_model("MULTI_UNIV")
    randomize(model)
    tok = tasks[0].train[0][0]
    a = model.embed_token(Tape(), tok, 0).value
    assert a.tobytes() == model.embed_token(Tape(), tok, 0).value.tobytes()
    assert not np.allclose(a, model.embed_token(Tape(), tok, 1).value)


def test_compose_subtree(passive_sentence):
    model, _ = single_model([passive_sentence])
    randomize(model)
    t = Tape()
    h = model.embed_token(t, passive_sentence[1], 0)
    d = model.embed_token(t, passive_sentence[0], 0)
    left = model.compose_subtree(t, h, d, "det", LEFT_ARC, 0)
    right = model.compose_subtree(t, h, d, "det", RIGHT_ARC, 0)
    assert left.value.shape == h.value.shape
    assert not np.allclose(left.value, right.value)
    model.store["task0/recnn/left_W"].value[...] = 0.0
    bias = model.store["task0/recnn/left_b"].value
    out = model.compose_subtree(Tape(), h, d, "det", LEFT_ARC, 0).value
    np.testing.assert_array_equal(out, np.tanh(bias))


def test_encode_state_dim_and_initial_config(passive_sentence):
    model, _ = single_model([passive_sentence])
    t = Tape()
    state = model.start(t, passive_sentence, 0)
    assert model.encode_state(t, state, 0).value.shape == (SMALL.state_dim,)


def test_task_embedding_is_the_only_difference():
    custom = {g: mt.SHARED for g in mt.GROUPS}
    custom[mt.G] = mt.TASK
    custom[mt.TASK_EMB] = mt.TASK
    model, tasks = multi_model("CUSTOM", custom=custom)
    randomize(model)
    sentence = tasks[0].train[0]
    e0, e1 = model.store["task0/task_embedding"].value, model.store["task1/task_embedding"].value
    e1[...] = e0

    def p(task):
        t = Tape()
        return model.encode_state(t, model.start(t, sentence, task), task).value

    assert p(0).tobytes() == p(1).tobytes()
    e1 += 0.5
    assert not np.allclose(p(0), p(1))


def test_score_actions_masks(passive_sentence):
    model, _ = single_model([passive_sentence])
    randomize(model)
    t = Tape()
    state = model.start(t, passive_sentence, 0)
    inv = model.inventories[0]
    pvec = model.encode_state(t, state, 0)
    probs = model.score_actions(t, pvec, 0, inv.mask(valid_actions(state.config)))
    assert probs[inv.index(Action(SHIFT))] == 1.0
    model.store["task0/output/G"].value[...] = 0.0
    model.store["task0/output/q"].value[...] = 0.0
    mask = inv.mask(frozenset({SHIFT, LEFT_ARC}))
    probs = model.score_actions(t, pvec, 0, mask)
    legal = np.array(mask)
    np.testing.assert_allclose(probs[legal], 1.0 / legal.sum())
    assert np.all(probs[~legal] == 0.0)


def test_history_depths_follow_transitions():
    s = make_sentence([2, 0, 2])
    model, _ = single_model([s])
    t = Tape()
    state = model.start(t, s, 0)
    assert (len(state.stack), len(state.buffer)) == (1, 3)
    model.advance(t, state, Action(SHIFT), 0)
    assert (len(state.stack), len(state.buffer)) == (2, 2)
    model.advance(t, state, Action(SHIFT), 0)
    model.advance(t, state, Action(LEFT_ARC, "dep"), 0)
    assert (len(state.stack), len(state.buffer)) == (2, 1)
    assert len(state.actions) == 3
    state.check()


def test_swap_moves_node_back_to_buffer():
    s = make_sentence([3, 4, 0, 3])
    model, _ = single_model([s])
    t = Tape()
    state = model.start(t, s, 0)
    for a in static_oracle(s):
        before = (len(state.stack), len(state.buffer))
        model.advance(t, state, a, 0)
        if a.kind == SWAP:
            assert (len(state.stack), len(state.buffer)) == (before[0] - 1, before[1] + 1)
        state.check()
    assert is_terminal(state.config)


def test_desynchronized_state_raises(passive_sentence):
    model, _ = single_model([passive_sentence])
    t = Tape()
    state = model.start(t, passive_sentence, 0)
    state.stack_vecs.append(state.stack_vecs[-1])
    with pytest.raises(ConsistencyError):
        model.encode_state(t, state, 0)


def _fresh_output(tape, weights, guard, xs):
    rnn = StackRnn(tape, *weights, guard)
    for x in xs:
        rnn.push(x)
    return rnn.output().value


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 10**6))
def test_stack_lstm_matches_fresh_run(ops, seed):
    rng = np.random.default_rng(seed)
    t = Tape(enabled=False)
    d, H = 3, 4
    weights = (t.const(rng.normal(size=(4 * H, d))), t.const(rng.normal(size=(4 * H, H))),
               t.const(rng.normal(size=4 * H)))
    guard = t.const(rng.normal(size=d))
    rnn = StackRnn(t, *weights, guard)
    items = []
    for push in ops:
        if push or not items:
            x = t.const(rng.normal(size=d))
            rnn.push(x)
            items.append(x)
        else:
            rnn.pop()
            items.pop()
        assert len(rnn) == len(items)
        np.testing.assert_array_equal(rnn.output().value, _fresh_output(t, weights, guard, items))


def test_stack_lstm_cannot_pop_guard():
    t = Tape(enabled=False)
    rnn = StackRnn(t, t.const(np.zeros((8, 1))), t.const(np.zeros((8, 2))), t.const(np.zeros(8)),
                   t.const(np.zeros(1)))
    with pytest.raises(ConsistencyError):
        rnn.pop()


def test_buffer_lstm_equals_fresh_right_to_left_run():
    s = random_tree(6, random.Random(3))
    model, _ = single_model([s])
    randomize(model)
    t = Tape(enabled=False)
    state = model.start(t, s, 0)
    weights = model._lstm(t, "lstm_buffer", 0)
    guard = model._p(t, "lstm_buffer/guard", 0)
    for a in static_oracle(s):
        model.advance(t, state, a, 0)
        expected = _fresh_output(t, weights, guard, list(state.buffer_vecs))
        np.testing.assert_array_equal(state.buffer.output().value, expected)


def test_end_to_end_gradient_three_tokens():
    s = make_sentence([2, 0, 2], ["nsubj", "root", "obj"])
    errs = model_errors(s, seed=1, config=TINY)
    assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("strategy", ["SUP", "MONO_HETERO", "SMTL"])
def test_end_to_end_gradient_with_swap(strategy):
    s = swap_sentence(random.Random(7))
    assert any(a.kind == SWAP for a in static_oracle(s)) and len(s) <= 5
    errs = model_errors(s, seed=2, strategy=strategy, config=TINY)
    assert max(errs.values()) < 1e-4


def test_gold_probability_positive_and_normalized():
    g = ToyGrammar(1)
    tb = g.treebank(3, 5, "univ")
    model, _ = single_model(tb)
    randomize(model)
    inv = model.inventories[0]
    for s in tb:
        t = Tape(enabled=False)
        state = model.start(t, s, 0)
        for a in static_oracle(s):
            mask = inv.mask(valid_actions(state.config))
            probs = model.score_actions(t, model.encode_state(t, state, 0), 0, mask)
            assert probs.sum() == pytest.approx(1.0)
            assert probs[inv.index(a)] > 0.0
            model.advance(t, state, a, 0)


def test_single_token_parse_is_forced(passive_sentence):
    s = make_sentence([0], ["root"])
    model, _ = single_model([passive_sentence, s])
    out = model.parse(s, 0)
    assert [a.kind for a in out.actions] == [SHIFT, RIGHT_ARC]
    assert out.heads == [0]
    # the relation is the most probable one at the final step
    t = Tape(enabled=False)
    state = model.start(t, s, 0)
    model.advance(t, state, Action(SHIFT), 0)
    inv = model.inventories[0]
    probs = model.score_actions(t, model.encode_state(t, state, 0), 0, inv.mask(valid_actions(state.config)))
    assert out.relations == [inv[int(np.argmax(probs))].relation]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10**6))
def test_parse_terminates_with_valid_tree(n, seed):
    s = random_tree(n, random.Random(seed))
    model, _ = single_model([s], TINY, seed=seed % 7)
    randomize(model, seed, scale=1.0)
    out = model.parse(s, 0)
    assert len(out.actions) <= step_ceiling(n)
    assert sorted(out.heads).count(0) == 1
    from mtparser.treebank_io import check_tree

    assert check_tree(out.heads) is None
    assert out.log_prob <= 0.0


def test_loss_is_deterministic_under_seed():
    tb = ToyGrammar(0).treebank(2, 1, "univ")

    def loss(seed):
        model, _ = single_model(tb, seed=seed)
        return float(model.sentence_loss(Tape(), tb[0], 0, static_oracle(tb[0])).value)

    assert loss(4) == loss(4)
    assert loss(4) != loss(5)


def test_manifest_round_trip_parses_identically(tmp_path):
    tb = ToyGrammar(0).treebank(4, 1, "univ")
    model, _ = single_model(tb)
    randomize(model)
    path = tmp_path / "m.archive"
    ad.save_archive(path, model.store, model.manifest())
    store, manifest = ad.load_archive(path)
    again = ParserModel.from_manifest(store, manifest)
    for s in tb:
        assert again.parse(s, 0) == model.parse(s, 0)


def test_partition_totality():
    for strategy in ("SMTL", "MULTI_UNIV", "MONO_HETERO"):
        model, _ = multi_model(strategy)
        requested = {model.resolve(spec, t) for t in (0, 1) for spec in model.specs[t]}
        assert requested == set(model.store.names())
        for t in (0, 1):
            names = model.concrete_names(t)
            assert len(names) == len(set(names))
