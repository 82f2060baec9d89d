from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lt2 import tasks as tk
from lt2.errors import ContractError, ParseError, TokenizerError


def test_example_program_answer():
    p = tk.example_program()
    assert p.m == 32 and p.n == 8
    assert p.targets[-1] == 0
    assert tk.interpret_program(p.text) == p.targets


def test_render_layout():
    p = tk.make_program([1, 0, 1, 1, 0, 1], [0, 1, 2, 3, 4], [("a", "b")])
    assert p.text.split("\n") == ["bits = [1,0,1,1,0,1]", "a, b, c, d, e = 0, 1, 2, 3, 4",
                                  "a, b = b, a;", "assert bits[a] == ?"]
    assert p.targets == [0]


@given(st.integers(5, 64), st.integers(0, 64), st.integers(0, 2**40))
def test_generator_matches_interpreter(m, n, seed):
    p = tk.gen_state_recall(m, n, seed)
    assert len(p.bits) == m and len(p.swaps) == n
    assert len(set(p.bindings)) == 5
    assert tk.interpret_program(p.text) == p.targets


def test_generator_is_deterministic_and_guards():
    assert tk.gen_state_recall(16, 8, 7).text == tk.gen_state_recall(16, 8, 7).text
    assert tk.gen_state_recall(16, 8, 7).text != tk.gen_state_recall(16, 8, 8).text
    with pytest.raises(ContractError):
        tk.gen_state_recall(4, 3, 0)


def test_swap_pairs_cover_all_ten():
    assert len(tk.PAIRS) == 10
    seen = set()
    for s in range(30):
        seen.update(tk.gen_state_recall(8, 16, s).swaps)
    assert seen == set(tk.PAIRS)


def test_interpreter_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 3"):
        tk.interpret_program("bits = [1,0,1,0,1]\na, b, c, d, e = 0, 1, 2, 3, 4\na, b = a, b;")
    with pytest.raises(ParseError, match="line 1"):
        tk.interpret_program("a, b, c, d, e = 0, 1, 2, 3, 4")
    with pytest.raises(ParseError):
        tk.interpret_program("bits = [1,0]\na, b, c, d, e = 0, 1, 2, 3, 9")


def test_tokenizer_round_trip_and_mask():
    p = tk.gen_state_recall(10, 4, 3)
    tp = tk.tokenize_program(p)
    assert tp.ids[0] == tk.TOKENIZER.bos
    assert tk.detokenize(tp.ids) == p.text
    assert int(tp.loss_mask.sum()) == 4
    digits = [tk.TOKENIZER.itos[i] for i in tp.targets[tp.loss_mask]]
    assert digits == [str(t) for t in p.targets]
    assert tk.TOKENIZER.vocab_size == 30
    with pytest.raises(TokenizerError):
        tk.TOKENIZER.encode("bits = [X]")


def test_tokenize_text_uses_interpreter():
    p = tk.gen_state_recall(8, 3, 1)
    assert np.array_equal(tk.tokenize_program(p.text).targets, tk.tokenize_program(p).targets)


def test_collate_right_pads():
    a, b = tk.tokenize_program(tk.gen_state_recall(8, 1, 0)), tk.tokenize_program(tk.gen_state_recall(8, 5, 0))
    ids, mask, tg = tk.collate([a, b])
    assert ids.shape == (2, b.ids.size)
    assert (ids[0, a.ids.size:] == 0).all() and not mask[0, a.ids.size:].any()


def test_eval_seeds_disjoint_from_training():
    rng = np.random.default_rng(0)
    train = {tk.train_seed(rng) for _ in range(1000)}
    ev = set(tk.eval_seeds(8)) | set(tk.eval_seeds(256))
    assert not train & ev
    assert not set(tk.eval_seeds(8)) & set(tk.eval_seeds(16))


def test_curriculum_progression():
    s = tk.CurriculumState(budget=100)
    s = tk.curriculum_step(s, 0.5, steps=40)
    assert s.n == 8 and s.steps_used == 40
    s = tk.curriculum_step(s, 0.95)
    assert s.n == 16 and s.solved == [8] and s.steps_used == 0
    s = tk.curriculum_step(s, 0.1, steps=100)
    assert s.finished and s.n_max == 8
    with pytest.raises(ContractError):
        tk.curriculum_step(tk.CurriculumState(), 1.5)


def test_curriculum_finishes_after_last_stage():
    s = tk.CurriculumState()
    for _ in tk.STAGES:
        s = tk.curriculum_step(s, 1.0)
    assert s.finished and s.n_max == 256


def test_corpus_round_trip(tmp_path):
    progs = [tk.gen_state_recall(8, 2, i) for i in range(5)]
    assert tk.write_corpus(progs, tmp_path / "c.jsonl") == 5
    back = tk.read_corpus(tmp_path / "c.jsonl")
    assert [b["targets"] for b in back] == [p.targets for p in progs]
