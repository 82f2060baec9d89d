from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lt2 import tensor as tn
from lt2.errors import DimensionError
from lt2.scan import BACKEND, kernels, linear_scan
from lt2.tensor import Tensor

BACKENDS = ["numpy"] + (["cython"] if BACKEND == "cython" else [])


def _inputs(rng, BH=2, L=6, dk=3, dv=4):
    k = rng.normal(size=(BH, L, dk))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    return (rng.normal(size=(BH, L, dk)), k, rng.uniform(0, 2, size=(BH, L)),
            rng.uniform(0, 1, size=(BH, L, dk)), rng.normal(size=(BH, L, dk)), rng.normal(size=(BH, L, dv)))


def _naive(q, k, beta, alpha, u, v, erase):
    BH, L, dk = q.shape
    y = np.zeros((BH, L, v.shape[-1]))
    for b in range(BH):
        S = np.zeros((dk, v.shape[-1]))
        for t in range(L):
            A = np.diag(alpha[b, t])
            if erase:
                A = (np.eye(dk) - beta[b, t] * np.outer(k[b, t], k[b, t])) @ A
            S = A @ S + np.outer(u[b, t], v[b, t])
            y[b, t] = S.T @ q[b, t]
    return y


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("erase", [True, False])
def test_forward_matches_dense_recurrence(rng, backend, erase):
    args = _inputs(rng)
    fwd, _ = kernels(backend)
    assert np.abs(fwd(*args, erase) - _naive(*args, erase)).max() <= 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
def test_backward_gradcheck(rng, backend):
    ts = [Tensor(a, requires_grad=True) for a in _inputs(rng, L=7)]
    w = rng.normal(size=(2, 7, 4))
    errs = tn.gradcheck(lambda: tn.reduce_sum(linear_scan(*ts, backend=backend) * w), ts)
    assert max(errs) <= 1e-6


@pytest.mark.skipif(BACKEND != "cython", reason="compiled kernel not built")
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(0, 2**31))
def test_compiled_and_fallback_agree(L, dk, dv, erase, seed):
    rng = np.random.default_rng(seed)
    args = _inputs(rng, BH=2, L=L, dk=dk, dv=dv)
    dy = rng.normal(size=(2, L, dv))
    (fc, bc), (fn, bn) = kernels("cython"), kernels("numpy")
    assert np.abs(fc(*args, erase) - fn(*args, erase)).max() <= 1e-11
    for a, b in zip(bc(*args, dy, erase), bn(*args, dy, erase)):
        assert np.abs(a - b).max() <= 1e-10


def test_broadcast_leading_dims(rng):
    q, k, beta, alpha, u, v = _inputs(rng, BH=3)
    y = linear_scan(q, k, beta, np.ones((1, 1, 3)), u, v, erase=False).data
    assert y.shape == (3, 6, 4)
    assert np.abs(y - _naive(q, k, beta, np.ones_like(alpha), u, v, False)).max() <= 1e-12


def test_shape_errors(rng):
    q, k, beta, alpha, u, v = _inputs(rng)
    with pytest.raises(DimensionError):
        linear_scan(q, k[..., :2], beta, alpha, u, v)
    with pytest.raises(DimensionError):
        linear_scan(q, k, beta, alpha, u, v[:, :3])


def test_float32_uses_fallback(rng):
    args = [a.astype(np.float32) for a in _inputs(rng)]
    y = linear_scan(*args).data
    assert y.dtype == np.float32
    assert np.abs(y - _naive(*[a.astype(float) for a in args], True)).max() <= 1e-4
