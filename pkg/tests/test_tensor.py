from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lt2 import tensor as tn
from lt2.errors import ContractError, DimensionError
from lt2.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_matmul_identity_and_dot():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradcheck(rng):
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    errs = tn.gradcheck(lambda: tn.reduce_sum(a @ b), [a, b])
    assert max(errs) <= 1e-6


def test_softmax_values_and_grad():
    assert np.allclose(tn.softmax(Tensor(np.zeros(4))).data, 0.25, atol=0, rtol=0)
    big = tn.softmax(Tensor([1e4, 0.0, 0.0])).data
    assert big[0] == 1.0 and big[1] == 0.0
    x = leaf([1.0, 2.0, 3.0])
    e = np.exp([1.0, 2.0, 3.0])
    assert np.abs(tn.softmax(x).data - e / e.sum()).max() <= 1e-15
    w = np.array([0.3, -1.0, 2.0])
    assert max(tn.gradcheck(lambda: tn.reduce_sum(tn.softmax(x) * w), [x])) <= 1e-6


def test_softmax_mask_gives_exact_zero(rng):
    x = leaf(rng.normal(size=(3, 5)))
    mask = np.tril(np.ones((3, 5), dtype=bool))
    p = tn.softmax(x, mask=mask).data
    assert (p[~mask] == 0.0).all()
    assert np.abs(p.sum(axis=-1) - 1).max() <= 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = tn.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-12


def test_sigmoid_and_saturation():
    assert tn.sigmoid(Tensor(0.0)).data == 0.5
    s = tn.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.isfinite(s).all() and s[1] == 1.0 and s[0] >= 0.0


def test_sigmoid_chain_gradcheck(rng):
    W, x = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
    assert max(tn.gradcheck(lambda: tn.reduce_sum(tn.sigmoid(W @ x)), [W, x])) <= 1e-6


def test_rmsnorm_unit_rms_is_unchanged(rng):
    v = rng.normal(size=16)
    v /= np.sqrt(np.mean(v * v))
    out = tn.rmsnorm(Tensor(v), Tensor(np.ones(16)), eps=1e-6).data
    assert np.abs(out - v).max() <= 1e-12


def test_rmsnorm_rejects_bad_eps():
    with pytest.raises(ContractError):
        tn.rmsnorm(Tensor(np.ones(3)), eps=0.0)


def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=8)
    assert np.array_equal(tn.rope_apply(Tensor(x), 0).data, x)


def test_rope_preserves_norm_and_relative_phase(rng):
    q, k = rng.normal(size=8), rng.normal(size=8)
    # scores depend only on the offset between positions
    s1 = tn.rope_apply(Tensor(q), 5).data @ tn.rope_apply(Tensor(k), 2).data
    s2 = tn.rope_apply(Tensor(q), 13).data @ tn.rope_apply(Tensor(k), 10).data
    assert abs(s1 - s2) <= 1e-12
    assert abs(np.linalg.norm(tn.rope_apply(Tensor(q), 7).data) - np.linalg.norm(q)) <= 1e-12


def test_elementwise_and_structural_gradchecks(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    u, v = leaf(rng.normal(size=3)), leaf(rng.normal(size=5))
    g = rng.normal(size=(3, 5))
    w = leaf(rng.uniform(0.5, 1.5, size=4))
    cases = [
        (lambda: tn.reduce_sum((a + b) * (a - b)), [a, b]),
        (lambda: tn.reduce_sum(tn.outer_product(u, v) * g), [u, v]),
        (lambda: tn.reduce_sum(tn.getitem(a, (slice(1, 3), slice(None, None, 2))) ** 2), [a]),
        (lambda: tn.reduce_sum(tn.concat([a, b], axis=1) ** 3), [a, b]),
        (lambda: tn.reduce_sum(tn.rmsnorm(a, w) * b), [a, w]),
        (lambda: tn.reduce_sum(tn.l2_normalize(a) * b), [a]),
        (lambda: tn.reduce_sum(tn.silu(a) * b), [a]),
        (lambda: tn.reduce_sum(tn.rope_apply(tn.reshape(a, (1, 3, 4)), np.arange(3)) * 1.7), [a]),
        (lambda: tn.reduce_sum(tn.log_softmax(a, axis=0) * b), [a]),
    ]
    for fn, ps in cases:
        assert max(tn.gradcheck(fn, ps)) <= 1e-6


def test_backward_square_is_exact():
    x = leaf([1.5, -2.0, 3.25])
    tn.backward(tn.reduce_sum(x * x))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_for_shared_use():
    x = leaf([2.0])
    y = x * x * x + x  # x used four times
    tn.backward(tn.reduce_sum(y))
    assert x.grad.tolist() == [3 * 4.0 + 1.0]


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        tn.backward(x * 2.0)


def test_tape_topological_order(rng):
    x = leaf(rng.normal(size=3))
    y = tn.reduce_sum(tn.exp(x) * x)
    tape = tn.backward(y)
    seen = set()
    for node in tape.nodes:
        for p in node._parents:
            assert id(p) in seen
        seen.add(id(node))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with tn.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_broadcast_gradient_reduces_to_operand_shape(rng):
    a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
    tn.backward(tn.reduce_sum(a * b))
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, a.data.sum(axis=0), atol=1e-14)


def test_determinism(rng):
    x = rng.normal(size=(5, 5))
    r1 = tn.softmax(Tensor(x) @ Tensor(x)).data
    r2 = tn.softmax(Tensor(x) @ Tensor(x)).data
    assert np.array_equal(r1, r2)
