"""Pure-numpy reference kernels for the generalised linear-attention scan.

Every linear mixer is an instance of

    S_t = (I - beta_t k_t k_t^T) Diag(alpha_t) S_{t-1} + u_t v_t^T
    y_t = S_t^T q_t

with ``S_0 = 0``. Arrays are laid out ``(BH, L, dim)``; ``beta`` is ``(BH, L)``.
The backward pass re-runs the forward in segments of ``ceil(sqrt(L))`` steps so
only O(sqrt(L)) states are alive at once.
"""
from __future__ import annotations

import math

import numpy as np


def _step(S, q, k, beta, alpha, u, v, erase):
    S = S * alpha[:, :, None]
    if erase:
        w = np.einsum("bi,bij->bj", k, S)
        S = S - (beta[:, None, None] * k[:, :, None]) * w[:, None, :]
    S = S + u[:, :, None] * v[:, None, :]
    return S


def scan_forward(q, k, beta, alpha, u, v, erase=True):
    BH, L, dk = q.shape
    dv = v.shape[2]
    S = np.zeros((BH, dk, dv), dtype=q.dtype)
    y = np.empty((BH, L, dv), dtype=q.dtype)
    for t in range(L):
        S = _step(S, q[:, t], k[:, t], beta[:, t], alpha[:, t], u[:, t], v[:, t], erase)
        y[:, t] = np.einsum("bij,bi->bj", S, q[:, t])
    return y


def scan_backward(q, k, beta, alpha, u, v, dy, erase=True):
    BH, L, dk = q.shape
    dv = v.shape[2]
    seg = max(1, int(math.ceil(math.sqrt(L))))
    # checkpoints[c] = state before step c*seg
    checkpoints = []
    S = np.zeros((BH, dk, dv), dtype=q.dtype)
    for t in range(L):
        if t % seg == 0:
            checkpoints.append(S)
        S = _step(S, q[:, t], k[:, t], beta[:, t], alpha[:, t], u[:, t], v[:, t], erase)

    dq = np.zeros_like(q)
    dk_ = np.zeros_like(k)
    dbeta = np.zeros_like(beta)
    dalpha = np.zeros_like(alpha)
    du = np.zeros_like(u)
    dv_ = np.zeros_like(v)
    G = np.zeros((BH, dk, dv), dtype=q.dtype)

    for c in range(len(checkpoints) - 1, -1, -1):
        t0, t1 = c * seg, min(L, (c + 1) * seg)
        states = [checkpoints[c]]
        for t in range(t0, t1):
            states.append(_step(states[-1], q[:, t], k[:, t], beta[:, t], alpha[:, t], u[:, t], v[:, t], erase))
        for t in range(t1 - 1, t0 - 1, -1):
            S_t = states[t - t0 + 1]
            S_prev = states[t - t0]
            qt, kt, bt, at, ut, vt = q[:, t], k[:, t], beta[:, t], alpha[:, t], u[:, t], v[:, t]
            G = G + qt[:, :, None] * dy[:, t][:, None, :]
            dq[:, t] = np.einsum("bij,bj->bi", S_t, dy[:, t])
            du[:, t] = np.einsum("bij,bj->bi", G, vt)
            dv_[:, t] = np.einsum("bij,bi->bj", G, ut)
            P = S_prev * at[:, :, None]
            if erase:
                gk = np.einsum("bi,bij->bj", kt, G)
                pk = np.einsum("bi,bij->bj", kt, P)
                dbeta[:, t] = -np.einsum("bj,bj->b", gk, pk)
                dk_[:, t] = -bt[:, None] * (np.einsum("bij,bj->bi", G, pk) + np.einsum("bij,bj->bi", P, gk))
                dP = G - (bt[:, None, None] * kt[:, :, None]) * gk[:, None, :]
            else:
                dP = G
            dalpha[:, t] = np.einsum("bij,bij->bi", dP, S_prev)
            G = dP * at[:, :, None]
    return dq, dk_, dbeta, dalpha, du, dv_
