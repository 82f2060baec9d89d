"""Differentiable linear-attention scan with a compiled kernel when available.

The compiled module ``lt2._scan_ext`` is used for float64 inputs if it was
built; otherwise (or with ``LT2_PURE_PYTHON=1``) the numpy kernels in
``lt2._scan_ref`` are used. ``BACKEND`` names the selection made at import.
"""
from __future__ import annotations

import os

import numpy as np

from . import _scan_ref
from .errors import DimensionError
from .tensor import Tensor, _node, as_tensor

try:
    if os.environ.get("LT2_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _scan_ext
except ImportError:
    _scan_ext = None

BACKEND = "cython" if _scan_ext is not None else "numpy"


def kernels(backend: str | None = None):
    """Return ``(forward, backward)`` for ``backend`` ('cython', 'numpy' or default)."""
    backend = backend or BACKEND
    if backend == "cython":
        if _scan_ext is None:
            raise RuntimeError("compiled scan kernel is not built")
        return _scan_ext.scan_forward, _scan_ext.scan_backward
    if backend == "numpy":
        return _scan_ref.scan_forward, _scan_ref.scan_backward
    raise ValueError(f"unknown backend {backend!r}")


def _flat(x: np.ndarray, lead: tuple[int, ...], tail: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(x, lead + tail).reshape((-1,) + tail))


def linear_scan(q, k, beta, alpha, u, v, *, erase: bool = True, backend: str | None = None) -> Tensor:
    """Run the scan over axis -2.

    Shapes: ``q, k, alpha, u`` are ``(..., L, dk)``, ``beta`` is ``(..., L)``,
    ``v`` is ``(..., L, dv)``; returns ``(..., L, dv)``. Leading dimensions are
    broadcast, so e.g. a constant ``alpha`` may be passed with size-1 axes.
    """
    q, k, beta, alpha, u, v = (as_tensor(x) for x in (q, k, beta, alpha, u, v))
    *lead, L, dk = q.shape
    lead = tuple(lead)
    dv = v.shape[-1]
    for name, t, want in (("k", k, dk), ("alpha", alpha, dk), ("u", u, dk)):
        if t.shape[-1] != want:
            raise DimensionError(f"linear_scan: {name} last dim {t.shape[-1]} != {want}")
    if v.shape[-2] != L or beta.shape[-1] not in (1, L):
        raise DimensionError(f"linear_scan: sequence lengths disagree: q {q.shape}, v {v.shape}, beta {beta.shape}")

    dtype = np.result_type(q.data, v.data)
    if backend is None and dtype != np.float64:
        backend = "numpy"
    fwd, bwd = kernels(backend)
    arrs = (
        _flat(q.data, lead, (L, dk)),
        _flat(k.data, lead, (L, dk)),
        _flat(beta.data, lead, (L,)),
        _flat(alpha.data, lead, (L, dk)),
        _flat(u.data, lead, (L, dk)),
        _flat(v.data, lead, (L, dv)),
    )
    y = np.asarray(fwd(*arrs, erase)).reshape(lead + (L, dv))
    if dtype != y.dtype:
        y = y.astype(dtype)
    parents = (q, k, beta, alpha, u, v)
    shapes = [p.shape for p in parents]

    def bw(g):
        from .tensor import _unbroadcast

        grads = bwd(*arrs, np.ascontiguousarray(g.reshape((-1, L, dv)), dtype=arrs[0].dtype), erase)
        tails = ((L, dk), (L, dk), (L,), (L, dk), (L, dk), (L, dv))
        out = []
        for gr, tail, shape, p in zip(grads, tails, shapes, parents):
            if not p.requires_grad:
                out.append(None)
                continue
            out.append(_unbroadcast(np.asarray(gr).reshape(lead + tail), shape))
        return tuple(out)

    return _node(y, parents, bw, "linear_scan")
