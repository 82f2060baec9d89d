from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lt2 import model as md
from lt2 import tensor as tn
from lt2.errors import ConfigError, ContractError
from lt2.mixers import MixerKind, init_mixer_params, mixer_forward_sequence
from lt2.model import BlockConfig, LoopedModel, LoopSchedule
from lt2.tensor import Tensor


def small(mixers=("gdn", "full"), T=2, **kw):
    cfg = BlockConfig(n_layers=len(mixers), d_model=8, n_heads=2, mixers=list(mixers), vocab_size=11, **kw)
    return LoopedModel(cfg, LoopSchedule(T), seed=3)


def _perturb(m, rng, s=0.05):
    for t in m.parameters():
        t.data += rng.normal(0, s, t.shape)


def test_block_is_identity_with_zero_output_weights(rng):
    m = small()
    lp = m.layers[0]
    lp.mixer.wo.data[...] = 0.0
    lp.w2.data[...] = 0.0
    h = rng.normal(size=(1, 5, 8))
    assert np.array_equal(md.block_forward(m.cfg, lp, h).data, h)


def test_block_matches_composition(rng):
    m = small()
    lp = m.layers[1]
    h = rng.normal(size=(1, 6, 8))
    x = tn.rmsnorm(Tensor(h), lp.norm1, m.cfg.norm_eps)
    h1 = h + mixer_forward_sequence(lp.mixer.kind, lp.mixer, x).data
    z = tn.rmsnorm(Tensor(h1), lp.norm2, m.cfg.norm_eps).data @ lp.w1.data
    want = h1 + (z / (1 + np.exp(-z))) @ lp.w2.data
    assert np.abs(md.block_forward(m.cfg, lp, h).data - want).max() <= 1e-12


def _manual_unroll(m, ids, T):
    h = m.params["embed"].data[ids]
    for tau in range(T):
        prev = h
        for lp in m.layers:
            h = md.block_forward(m.cfg, lp, h).data
        h = h + m.params["loop_gate"].data[tau] * prev
    return m.decode(Tensor(h)).data


@pytest.mark.parametrize("T", [1, 2, 3])
def test_loop_equals_manual_unroll(rng, T):
    m = small(T=T)
    _perturb(m, rng)
    ids = rng.integers(0, 11, size=(2, 7))
    logits, trace = m(ids)
    assert trace.T == T
    assert np.abs(logits.data - _manual_unroll(m, ids, T)).max() <= 1e-12


def test_zero_gate_is_bit_neutral(rng):
    m = small(T=3)
    ids = rng.integers(0, 11, size=(2, 6))
    a, _ = md.loop_forward(m, ids, gate=True)
    b, _ = md.loop_forward(m, ids, gate=False)
    assert np.array_equal(a.data, b.data)


def test_sdpa_gate_zero_and_saturated(rng):
    m = small(mixers=("full",), sdpa_gate=True)
    lp = m.layers[0]
    h = rng.normal(size=(1, 5, 8))
    x = tn.rmsnorm(Tensor(h), lp.norm1, m.cfg.norm_eps)
    lp.mixer.wg.data[...] = 0.0
    lp.mixer.bg.data[...] = 0.0
    half = mixer_forward_sequence("full", lp.mixer, x).data
    lp.mixer.bg.data[...] = 1e3
    sat = mixer_forward_sequence("full", lp.mixer, x).data
    assert np.abs(half - 0.5 * sat).max() <= 1e-12
    plain = init_mixer_params("full", 8, 2, np.random.default_rng(0))
    for n in ("wq", "wk", "wv", "wo"):
        getattr(plain, n).data[...] = getattr(lp.mixer, n).data
    assert np.abs(sat - mixer_forward_sequence("full", plain, x).data).max() <= 1e-12


def test_loop_override_full_and_window(rng):
    m = small(mixers=("gdn", "gdn"), T=2)
    m.schedule = LoopSchedule(2, ["full", "window:1"])
    ids = rng.integers(0, 11, size=(1, 5))
    _, trace = m(ids, capture=True)
    # window 1 attention: each position sees only itself
    assert all(np.array_equal(r["attn"][0, 0], np.eye(5)) for r in trace.records if r["loop"] == 2)
    assert trace.records[0]["attn"].shape[-1] == 5


def test_named_schedules():
    c2f = md.build_loop_schedule("coarse_to_fine", 4)
    assert c2f.override(0) == (MixerKind.FULL, None)
    assert c2f.override(3) == (MixerKind.WINDOW, 128)
    assert md.build_loop_schedule("fine_to_coarse", 4).override(0) == (MixerKind.WINDOW, 128)
    with pytest.raises(ContractError):
        md.build_loop_schedule("coarse_to_fine", 3)
    with pytest.raises(ContractError):
        md.parse_override("window:0")


def test_depth_patterns():
    il = md.build_depth_pattern(20, (1, 3), "interleave")
    assert [i + 1 for i, k in enumerate(il) if k == "full"] == [4, 8, 12, 16, 20]
    il4 = md.build_depth_pattern(20, (1, 4), "interleave", n_full=4)
    assert [i + 1 for i, k in enumerate(il4) if k == "full"] == [5, 10, 15, 20]
    be = md.build_depth_pattern(20, (1, 4), "bookend", n_full=4)
    assert [i + 1 for i, k in enumerate(be) if k == "full"] == [1, 2, 19, 20]
    assert md.build_depth_pattern(4, (0, 1)) == ["gdn"] * 4
    with pytest.raises(ContractError):
        md.build_depth_pattern(4, (1, 1), n_full=5)


@given(st.integers(1, 40), st.integers(0, 3), st.integers(1, 5),
       st.sampled_from(["interleave", "bookend", "front", "back"]))
def test_depth_pattern_counts(N, full, lin, pattern):
    out = md.build_depth_pattern(N, (full, lin), pattern)
    assert len(out) == N
    n_full = out.count("full")
    assert n_full == (0 if full == 0 else max(1, round(N * full / (full + lin))))


def test_act_examples():
    assert md.act_halt([0.995], 0.01) == 1
    assert md.act_halt([0.5, 0.5], 0.01) == 2
    assert md.act_halt([0.1] * 4, 0.01, 4) == 4
    with pytest.raises(ContractError):
        md.act_halt([], 0.01)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_act_monotone_in_eps(p, e1, e2):
    lo, hi = sorted((e1, e2))
    assert md.act_halt(p, hi) <= md.act_halt(p, lo)


def test_ponder_cost_expected_steps():
    p = [Tensor(np.full(3, 0.5)), Tensor(np.full(3, 0.5)), Tensor(np.full(3, 0.5))]
    assert abs(float(md.ponder_cost(p).data) - (1 + 0.5 + 0.0)) <= 1e-15


def test_act_model_freezes_halted_positions(rng):
    cfg = BlockConfig(n_layers=1, d_model=8, n_heads=2, mixers=["gdn"], vocab_size=11)
    m = LoopedModel(cfg, LoopSchedule(4), seed=0, act=True)
    m.params["halt.b"].data[...] = 20.0  # halt after the first loop
    ids = rng.integers(0, 11, size=(1, 4))
    _, tr = m(ids)
    assert (tr.halt_steps == 1).all()
    assert np.array_equal(tr.states[1].data, tr.states[4].data)


def test_parameter_count_independent_of_T():
    a, b = small(T=1), small(T=8)
    assert a.num_parameters(shared_only=True) == b.num_parameters(shared_only=True)
    assert b.num_parameters() - a.num_parameters() == 7 * 8


def test_config_validation_paths():
    with pytest.raises(ConfigError, match="mixers"):
        BlockConfig(n_layers=2, mixers=["gdn"]).validate()
    with pytest.raises(ConfigError, match=r"mixers\[1\]"):
        BlockConfig(n_layers=2, mixers=["gdn", "lstm"]).validate()
    with pytest.raises(ConfigError, match="d_model"):
        BlockConfig(d_model=10, n_heads=3, n_layers=2).validate()
    with pytest.raises(ContractError):
        LoopSchedule(0).validate()


def test_token_range_checked():
    with pytest.raises(ContractError):
        small()(np.array([[0, 11]]))


def test_checkpoint_round_trip(rng, tmp_path):
    m = small(mixers=("kda", "nsa"), T=2)
    _perturb(m, rng)
    md.save_checkpoint(m, tmp_path / "ck")
    m2 = md.load_checkpoint(tmp_path / "ck")
    ids = rng.integers(0, 11, size=(1, 6))
    assert np.array_equal(m(ids)[0].data, m2(ids)[0].data)


def test_loop_logits_and_capture(rng):
    m = small(T=3)
    ids = rng.integers(0, 11, size=(1, 4))
    outs, tr = m(ids, loop_logits=True, capture=True)
    assert len(outs) == 3 and len(tr.records) == 6
    assert np.array_equal(outs[-1].data, m(ids)[0].data)


def test_model_gradcheck(rng):
    cfg = BlockConfig(n_layers=2, d_model=8, n_heads=2, mixers=["gdn", "full"], vocab_size=7, sdpa_gate=True)
    m = LoopedModel(cfg, LoopSchedule(3), seed=5)
    _perturb(m, rng)
    ids = rng.integers(0, 7, size=(1, 5))

    def f():
        logits, _ = m(ids)
        return tn.mean(logits * logits)

    assert max(tn.gradcheck(f, m.parameters(), max_entries=4, rng=rng)) <= 1e-5
