"""Token mixers: eight linear-attention recurrences, full softmax attention and
three sparse-attention variants.

Each linear kind updates a ``d_k x d_v`` state per head and reads out
``y_t = S_t^T q_t`` (no normalising denominator). The differentiable path runs
the generalised scan in :mod:`lt2.scan`; :func:`state_step` spells out each
kind's update rule literally and :func:`unrolled_oracle` materialises the
transition products densely, so the three can be checked against each other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import tensor as tn
from .errors import BudgetError, ContractError, DimensionError, NumericError
from .patterns import SparsityPattern, causal_mask, power_slash_pattern, window_mask, window_pattern
from .scan import linear_scan
from .tensor import Tensor, as_tensor


class MixerKind(str, Enum):
    FULL = "full"
    LA = "la"
    RETNET = "retnet"
    MAMBA2 = "mamba2"
    GLA = "gla"
    HGRN2 = "hgrn2"
    DELTANET = "deltanet"
    GDN = "gdn"
    KDA = "kda"
    WINDOW = "window"
    NSA = "nsa"
    DSA = "dsa"

    @classmethod
    def parse(cls, value) -> "MixerKind":
        if isinstance(value, MixerKind):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"fullattention": "full", "softmax": "full", "mha": "full", "swa": "window"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ContractError(f"unknown mixer kind {value!r}") from None

    @property
    def is_linear(self) -> bool:
        return self in LINEAR_KINDS

    @property
    def is_attention(self) -> bool:
        return self in ATTENTION_KINDS


LINEAR_KINDS = (MixerKind.LA, MixerKind.RETNET, MixerKind.MAMBA2, MixerKind.GLA,
                MixerKind.HGRN2, MixerKind.DELTANET, MixerKind.GDN, MixerKind.KDA)
ATTENTION_KINDS = (MixerKind.FULL, MixerKind.WINDOW, MixerKind.NSA, MixerKind.DSA)
DELTA_KINDS = (MixerKind.DELTANET, MixerKind.GDN, MixerKind.KDA)
VECTOR_GATE_KINDS = (MixerKind.GLA, MixerKind.HGRN2, MixerKind.KDA)
SCALAR_GATE_KINDS = (MixerKind.MAMBA2, MixerKind.GDN)

# kinds whose scan path is deliberately perturbed; used by `lt2 verify --inject-fault`
_FAULTS: set[MixerKind] = set()


# -- single-step semantics --------------------------------------------------------
@dataclass
class GateSignals:
    alpha: float | np.ndarray = 1.0
    beta: float = 0.0

    def validate(self) -> "GateSignals":
        a = np.asarray(self.alpha, dtype=float)
        if np.isnan(a).any() or math.isnan(float(self.beta)):
            raise NumericError("NaN in gate signals")
        if (a < 0).any() or (a > 1).any():
            raise ContractError(f"alpha outside [0, 1]: {self.alpha}")
        if not 0.0 <= float(self.beta) <= 2.0:
            raise ContractError(f"beta outside [0, 2]: {self.beta}")
        return self


@dataclass
class MixerState:
    """Recurrent memory of one head.

    Linear kinds keep ``S`` (``d_k x d_v``); attention kinds keep key/value
    buffers (Window trims them to the last ``window`` rows).
    """

    kind: MixerKind
    S: np.ndarray | None = None
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    t: int = 0
    window: int | None = None

    @classmethod
    def empty(cls, kind, d_k: int, d_v: int, window: int | None = None) -> "MixerState":
        kind = MixerKind.parse(kind)
        if kind.is_linear:
            return cls(kind, S=np.zeros((d_k, d_v)))
        if kind is MixerKind.WINDOW and (window is None or window < 1):
            raise ContractError("Window state needs window >= 1")
        return cls(kind, keys=np.zeros((0, d_k)), values=np.zeros((0, d_v)), window=window)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.S, self.keys, self.values) if a is not None)


def _check_unit(k: np.ndarray, kind: MixerKind) -> None:
    n = float(np.linalg.norm(k))
    if abs(n - 1.0) > 1e-8:
        raise ContractError(f"{kind.value} needs a unit-norm key, got norm {n:.6g}")


def state_step(kind, state: MixerState, q, k, v, gates: GateSignals | None = None,
               *, visible=None) -> tuple[MixerState, np.ndarray]:
    """Advance one position; returns ``(new_state, y)``.

    ``visible`` (NSA/DSA only) lists buffer rows, 0-based, the query may attend
    to; by default all buffered rows are visible.
    """
    kind = MixerKind.parse(kind)
    q, k, v = (np.asarray(x, dtype=float) for x in (q, k, v))
    gates = (gates or GateSignals()).validate()
    a, b = gates.alpha, float(gates.beta)

    if kind.is_linear:
        S = state.S
        if kind in DELTA_KINDS:
            _check_unit(k, kind)
        kv = np.outer(k, v)
        if kind is MixerKind.LA:
            S = S + kv
        elif kind in (MixerKind.RETNET, MixerKind.MAMBA2):
            S = float(a) * S + kv
        elif kind is MixerKind.GLA:
            S = np.asarray(a)[:, None] * S + kv
        elif kind is MixerKind.HGRN2:
            av = np.broadcast_to(np.asarray(a, dtype=float), (S.shape[0],))
            S = av[:, None] * S + np.outer(1.0 - av, v)
        else:
            erase = np.eye(len(k)) - b * np.outer(k, k)
            if kind is MixerKind.DELTANET:
                S = erase @ S + b * kv
            elif kind is MixerKind.GDN:
                S = float(a) * (erase @ S) + b * kv
            else:  # KDA
                av = np.broadcast_to(np.asarray(a, dtype=float), (S.shape[0],))
                S = erase @ (av[:, None] * S) + b * kv
        return replace(state, S=S, t=state.t + 1), S.T @ q

    keys = np.vstack([state.keys, k[None, :]])
    values = np.vstack([state.values, v[None, :]])
    if kind is MixerKind.WINDOW:
        keys, values = keys[-state.window:], values[-state.window:]
    scores = keys @ q / math.sqrt(len(q))
    if visible is not None and kind in (MixerKind.NSA, MixerKind.DSA):
        m = np.zeros(len(scores), dtype=bool)
        m[np.asarray(list(visible), dtype=int)] = True
        scores = np.where(m, scores, -np.inf)
    p = np.exp(scores - scores.max())
    p /= p.sum()
    return replace(state, keys=keys, values=values, t=state.t + 1), values.T @ p


# -- parameters ------------------------------------------------------------------------
@dataclass
class MixerParams:
    kind: MixerKind
    n_heads: int
    head_dim: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    wa: Tensor | None = None
    ba: Tensor | None = None
    wb: Tensor | None = None
    bb: Tensor | None = None
    wg: Tensor | None = None
    bg: Tensor | None = None
    widx_q: Tensor | None = None
    widx_k: Tensor | None = None
    gamma: np.ndarray | None = None
    window: int = 64
    block_size: int = 8
    topk: int = 64
    rope_theta: float = 10000.0

    TENSOR_FIELDS = ("wq", "wk", "wv", "wo", "wa", "ba", "wb", "bb", "wg", "bg", "widx_q", "widx_k")

    def named_tensors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.TENSOR_FIELDS if getattr(self, n) is not None}

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]


def retnet_gammas(n_heads: int) -> np.ndarray:
    return 1.0 - 2.0 ** (-5.0 - np.arange(n_heads, dtype=float))


def init_mixer_params(kind, d_model: int, n_heads: int, rng: np.random.Generator, *,
                      sdpa_gate: bool = False, window: int = 64, block_size: int = 8,
                      topk: int = 64, index_dim: int = 16, out_std: float | None = None,
                      alpha_bias: float = 3.0, rope_theta: float = 10000.0,
                      dtype=np.float64) -> MixerParams:
    kind = MixerKind.parse(kind)
    if d_model % n_heads:
        raise DimensionError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    dh = d_model // n_heads
    std = d_model**-0.5
    out_std = std if out_std is None else out_std

    def w(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dtype), requires_grad=True)

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    p = MixerParams(kind, n_heads, dh, w((d_model, d_model), std), w((d_model, d_model), std),
                    w((d_model, d_model), std), w((d_model, d_model), out_std),
                    window=window, block_size=block_size, topk=topk, rope_theta=rope_theta)
    if kind in SCALAR_GATE_KINDS:
        p.wa, p.ba = w((d_model, n_heads), std), const((n_heads,), alpha_bias)
    elif kind in VECTOR_GATE_KINDS:
        p.wa, p.ba = w((d_model, d_model), std), const((d_model,), alpha_bias)
    if kind in DELTA_KINDS:
        p.wb, p.bb = w((d_model, n_heads), std), const((n_heads,), 0.0)
    if kind is MixerKind.RETNET:
        p.gamma = retnet_gammas(n_heads)
    if kind is MixerKind.DSA:
        p.widx_q, p.widx_k = w((d_model, index_dim), std), w((d_model, index_dim), std)
    if sdpa_gate:
        p.wg, p.bg = w((d_model, n_heads), std), const((n_heads,), 0.0)
    return p


# -- sparse selection -------------------------------------------------------------------
def _topk_rows(scores: np.ndarray, valid: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask of the ``n`` highest valid scores per row; ties go to lower index."""
    s = np.where(valid, scores, -np.inf)
    order = np.argsort(-s, axis=-1, kind="stable")[..., :n]
    sel = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=-1)
    return sel & valid


def select_mask(kind, L: int, w: int, *, q=None, k=None, block_size: int | None = None,
                n_slashes: int | None = None) -> np.ndarray:
    """Boolean ``(L, L)`` visibility mask (0-based) for a sparse kind."""
    kind_s = str(kind.value if isinstance(kind, MixerKind) else kind).lower()
    if w is None or w < 1:
        raise ContractError("sparse selection needs w >= 1")
    causal = causal_mask(L)
    if kind_s == "window":
        return window_mask(L, w)
    if kind_s in ("powerslash", "power"):
        return power_slash_pattern(L, w, n_slashes).to_mask()
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    if kind_s == "dsa":
        scores = q @ k.T
        strict = np.tril(np.ones((L, L), dtype=bool), -1)
        sel = _topk_rows(scores, strict, w - 1) if w > 1 else np.zeros((L, L), dtype=bool)
        return sel | np.eye(L, dtype=bool)
    if kind_s == "nsa":
        bs = block_size or 1
        if bs < 1:
            raise ContractError("NSA block_size must be >= 1")
        nb = -(-L // bs)
        csum = np.vstack([np.zeros((1, k.shape[1])), np.cumsum(k, axis=0)])
        i = np.arange(L)[:, None]
        start = (np.arange(nb) * bs)[None, :]
        end = np.minimum(start + bs, i + 1)
        valid = start <= i
        cnt = np.where(valid, end - start, 1)
        means = (csum[np.where(valid, end, 0)] - csum[np.where(valid, start, 0)]) / cnt[..., None]
        scores = np.einsum("id,icd->ic", q, means)
        n_sel = max(1, -(-w // bs))
        blocks = _topk_rows(scores, valid, n_sel)
        expanded = blocks[:, np.arange(L) // bs] & causal
        return expanded | window_mask(L, w)
    raise ContractError(f"no sparse selection rule for {kind!r}")


def sparse_select(kind, L: int, w: int, *, q=None, k=None, block_size: int | None = None,
                  n_slashes: int | None = None) -> SparsityPattern:
    """Visible key set per query for Window / NSA / DSA / PowerSlash.

    DSA ``q``/``k`` are indexer projections; NSA ``q``/``k`` are the attention
    queries and keys (block keys are mean-pooled over the causal part of each
    block, and ``ceil(w / block_size)`` blocks are kept alongside the local
    window of ``w``).
    """
    return SparsityPattern.from_mask(select_mask(kind, L, w, q=q, k=k, block_size=block_size,
                                                 n_slashes=n_slashes))


# -- attention ---------------------------------------------------------------------------
def attention(q, k, v, mask) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes with a boolean mask."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scores = (q @ tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = tn.softmax(scores, axis=-1, mask=mask)
    return weights @ v, weights


def full_attention(q, k, v, pattern: SparsityPattern | None = None, *, return_weights: bool = False):
    """Per-head softmax attention restricted to ``pattern`` (causal by default).

    Inputs are ``(..., L, d_head)``; weights outside the pattern are exactly 0.
    """
    q = as_tensor(q)
    L = q.shape[-2]
    if pattern is None:
        mask = causal_mask(L)
    else:
        if pattern.L != L:
            raise DimensionError(f"pattern covers {pattern.L} positions, sequence has {L}")
        pattern.validate()
        mask = pattern.to_mask()
    out, weights = attention(q, k, v, mask)
    return (out, weights) if return_weights else out


def sdpa_output_gate(attn_out, h, wg, bg=None) -> Tensor:
    """Scale each head's attention output by ``sigmoid(h @ wg[:, head] + bg[head])``.

    ``attn_out`` is ``(B, H, L, d_head)`` and ``h`` is ``(B, L, d)``.
    """
    pre = as_tensor(h) @ wg
    if bg is not None:
        pre = pre + bg
    gate = tn.sigmoid(pre)
    gate = tn.reshape(tn.transpose(gate, (0, 2, 1)), gate.shape[:1] + (gate.shape[2], gate.shape[1], 1))
    return as_tensor(attn_out) * gate


# -- sequence forward ------------------------------------------------------------------------
def _split_heads(x: Tensor, H: int) -> Tensor:
    B, L, D = x.shape
    return tn.transpose(tn.reshape(x, (B, L, H, D // H)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def attention_mask(kind: MixerKind, params: MixerParams, h: np.ndarray, q: np.ndarray,
                   k: np.ndarray, window: int | None = None) -> np.ndarray:
    """Mask of shape ``(B or 1, 1, L, L)``; data-dependent for NSA and DSA."""
    B, L = h.shape[0], h.shape[1]
    if kind is MixerKind.FULL:
        return causal_mask(L)[None, None]
    w = window if window is not None else (params.topk if kind is MixerKind.DSA else params.window)
    if kind is MixerKind.WINDOW:
        return window_mask(L, w)[None, None]
    masks = []
    for b in range(B):
        if kind is MixerKind.DSA:
            masks.append(select_mask("dsa", L, w, q=h[b] @ params.widx_q.data, k=h[b] @ params.widx_k.data))
        else:
            masks.append(select_mask("nsa", L, w, q=q[b].mean(axis=0), k=k[b].mean(axis=0),
                                     block_size=params.block_size))
    return np.stack(masks)[:, None]


def _linear_inputs(kind: MixerKind, p: MixerParams, h: Tensor, q: Tensor, k: Tensor):
    B, L, _ = h.shape
    H, dh = p.n_heads, p.head_dim
    if kind in DELTA_KINDS:
        q = tn.l2_normalize(q)
        k = tn.l2_normalize(k)
    if kind in (MixerKind.LA, MixerKind.DELTANET):
        alpha = np.ones((1, 1, 1, dh))
    elif kind is MixerKind.RETNET:
        alpha = np.broadcast_to(p.gamma.reshape(1, H, 1, 1), (1, H, 1, dh)).copy()
    elif kind in SCALAR_GATE_KINDS:
        a = tn.sigmoid(h @ p.wa + p.ba)  # (B, L, H)
        a = tn.reshape(tn.transpose(a, (0, 2, 1)), (B, H, L, 1))
        alpha = tn.broadcast_to(a, (B, H, L, dh))
    else:
        alpha = _split_heads(tn.sigmoid(h @ p.wa + p.ba), H)
    if kind in DELTA_KINDS:
        beta = tn.transpose(tn.sigmoid(h @ p.wb + p.bb) * 2.0, (0, 2, 1))  # (B, H, L)
        u = tn.reshape(beta, (B, H, L, 1)) * k
    else:
        beta = np.zeros((1, 1, 1))
        u = 1.0 - alpha if kind is MixerKind.HGRN2 else k
    if kind in _FAULTS:
        alpha = as_tensor(alpha) * 0.999
    return q, k, beta, alpha, u


def mixer_forward_sequence(kind, params: MixerParams, h, *, window: int | None = None,
                           capture: dict | None = None, mode: str = "scan") -> Tensor:
    """Apply one mixer to ``h`` of shape ``(L, d)`` or ``(B, L, d)``.

    ``window`` overrides the visible span for attention kinds (used by
    loop-level schedules). ``mode="recurrent"`` evaluates position by position
    through :func:`state_step` instead (numpy, no gradient). When ``capture`` is
    given, attention weights are stored under ``"attn"``.
    """
    kind = MixerKind.parse(kind)
    h = as_tensor(h)
    single = h.ndim == 2
    if single:
        h = tn.reshape(h, (1,) + h.shape)
    if h.ndim != 3 or h.shape[-1] != params.d_model:
        raise DimensionError(f"mixer input shape {h.shape} does not match d_model {params.d_model}")
    if mode == "recurrent":
        out = Tensor(_recurrent_forward(kind, params, h.data, window))
        return tn.reshape(out, out.shape[1:]) if single else out
    if mode != "scan":
        raise ContractError(f"unknown mode {mode!r}")
    B, L, _ = h.shape
    H = params.n_heads
    q = _split_heads(h @ params.wq, H)
    k = _split_heads(h @ params.wk, H)
    v = _split_heads(h @ params.wv, H)
    if kind.is_attention:
        pos = np.arange(L)
        q = tn.rope_apply(q, pos, params.rope_theta)
        k = tn.rope_apply(k, pos, params.rope_theta)
        mask = attention_mask(kind, params, h.data, q.data, k.data, window)
        o, weights = attention(q, k, v, mask)
        if capture is not None:
            capture["attn"] = weights.data
        if params.wg is not None:
            o = sdpa_output_gate(o, h, params.wg, params.bg)
    else:
        q, k, beta, alpha, u = _linear_inputs(kind, params, h, q, k)
        o = linear_scan(q, k, beta, alpha, u, v, erase=kind in DELTA_KINDS)
    out = _merge_heads(o) @ params.wo
    return tn.reshape(out, out.shape[1:]) if single else out


# -- numpy reference paths -------------------------------------------------------------------
def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _project_np(kind: MixerKind, p: MixerParams, x: np.ndarray) -> dict:
    """Per-head projections and gates for one sequence ``x`` of shape ``(L, d)``."""
    L = x.shape[0]
    H, dh = p.n_heads, p.head_dim

    def heads(m):
        return m.reshape(L, H, -1).transpose(1, 0, 2)

    q, k, v = heads(x @ p.wq.data), heads(x @ p.wk.data), heads(x @ p.wv.data)
    out = {"v": v}
    if kind.is_attention:
        pos = np.arange(L)
        cos, sin = tn.rope_tables(pos, dh, p.rope_theta)

        def rot(z):
            r = np.empty_like(z)
            r[..., 0::2] = z[..., 0::2] * cos - z[..., 1::2] * sin
            r[..., 1::2] = z[..., 0::2] * sin + z[..., 1::2] * cos
            return r

        q, k = rot(q), rot(k)
        if p.wg is not None:
            out["gate"] = _sig(x @ p.wg.data + p.bg.data).T  # (H, L)
    if kind in DELTA_KINDS:
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        k = k / np.linalg.norm(k, axis=-1, keepdims=True)
        out["beta"] = 2.0 * _sig(x @ p.wb.data + p.bb.data).T  # (H, L)
    if kind in SCALAR_GATE_KINDS:
        out["alpha"] = _sig(x @ p.wa.data + p.ba.data).T  # (H, L)
    elif kind in VECTOR_GATE_KINDS:
        out["alpha"] = heads(_sig(x @ p.wa.data + p.ba.data))  # (H, L, dh)
    elif kind is MixerKind.RETNET:
        out["alpha"] = np.repeat(p.gamma[:, None], L, axis=1)
    out["q"], out["k"] = q, k
    return out


def _gates_at(kind: MixerKind, pr: dict, hd: int, t: int) -> GateSignals:
    alpha = pr["alpha"][hd, t] if "alpha" in pr else 1.0
    beta = pr["beta"][hd, t] if "beta" in pr else 0.0
    return GateSignals(alpha=alpha, beta=beta)


def _recurrent_forward(kind: MixerKind, p: MixerParams, x: np.ndarray, window: int | None) -> np.ndarray:
    B, L, d = x.shape
    outs = np.zeros((B, L, d))
    for b in range(B):
        pr = _project_np(kind, p, x[b])
        mask = None
        if kind in (MixerKind.NSA, MixerKind.DSA):
            mask = attention_mask(kind, p, x[b:b + 1], pr["q"][None], pr["k"][None], window)[0, 0]
        heads = []
        for hd in range(p.n_heads):
            w = window if window is not None else p.window
            st = MixerState.empty(kind, p.head_dim, p.head_dim, window=w)
            ys = []
            for t in range(L):
                vis = np.nonzero(mask[t, : t + 1])[0] if mask is not None else None
                st, y = state_step(kind, st, pr["q"][hd, t], pr["k"][hd, t], pr["v"][hd, t],
                                   _gates_at(kind, pr, hd, t), visible=vis)
                ys.append(y)
            y = np.array(ys)
            if "gate" in pr:
                y = y * pr["gate"][hd][:, None]
            heads.append(y)
        outs[b] = np.concatenate(heads, axis=-1) @ p.wo.data
    return outs


def _transition_np(kind: MixerKind, pr: dict, hd: int, t: int, dk: int) -> np.ndarray:
    eye = np.eye(dk)
    if kind is MixerKind.LA:
        return eye
    if kind in (MixerKind.RETNET, MixerKind.MAMBA2):
        return pr["alpha"][hd, t] * eye
    if kind in (MixerKind.GLA, MixerKind.HGRN2):
        return np.diag(pr["alpha"][hd, t])
    k, b = pr["k"][hd, t], pr["beta"][hd, t]
    erase = eye - b * np.outer(k, k)
    if kind is MixerKind.DELTANET:
        return erase
    if kind is MixerKind.GDN:
        return pr["alpha"][hd, t] * erase
    return erase @ np.diag(pr["alpha"][hd, t])


def _update_np(kind: MixerKind, pr: dict, hd: int, t: int) -> np.ndarray:
    v = pr["v"][hd, t]
    if kind is MixerKind.HGRN2:
        return np.outer(1.0 - pr["alpha"][hd, t], v)
    if kind in DELTA_KINDS:
        return pr["beta"][hd, t] * np.outer(pr["k"][hd, t], v)
    return np.outer(pr["k"][hd, t], v)


def unrolled_oracle(kind, params: MixerParams, h, *, window: int | None = None, max_len: int = 256) -> np.ndarray:
    """Reference mixer output with no recurrence.

    Linear kinds: ``S_t = sum_{s<=t} (A_t ... A_{s+1}) U_s`` with dense
    ``d_k x d_k`` transition matrices. Attention kinds: full score matrix with
    invisible entries set to ``-inf`` before the softmax.
    """
    kind = MixerKind.parse(kind)
    x = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, L, d = x.shape
    if L > max_len:
        raise BudgetError(f"unrolled_oracle is O(L^2); L={L} exceeds {max_len}")
    outs = np.zeros((B, L, d))
    dh = params.head_dim
    for b in range(B):
        pr = _project_np(kind, params, x[b])
        heads = []
        for hd in range(params.n_heads):
            if kind.is_attention:
                if kind is MixerKind.FULL:
                    mask = causal_mask(L)
                elif kind is MixerKind.WINDOW:
                    mask = window_mask(L, window or params.window)
                else:
                    mask = attention_mask(kind, params, x[b:b + 1], pr["q"][None], pr["k"][None], window)[0, 0]
                scores = pr["q"][hd] @ pr["k"][hd].T / math.sqrt(dh)
                scores = np.where(mask, scores, -np.inf)
                wts = np.exp(scores - scores.max(axis=1, keepdims=True))
                wts /= wts.sum(axis=1, keepdims=True)
                y = wts @ pr["v"][hd]
                if "gate" in pr:
                    y = y * pr["gate"][hd][:, None]
            else:
                A = [_transition_np(kind, pr, hd, t, dh) for t in range(L)]
                U = [_update_np(kind, pr, hd, t) for t in range(L)]
                y = np.zeros((L, dh))
                for t in range(L):
                    S = np.zeros((dh, dh))
                    M = np.eye(dh)  # A_t ... A_{s+1}
                    for s in range(t, -1, -1):
                        S += M @ U[s]
                        M = M @ A[s]
                    y[t] = S.T @ pr["q"][hd, t]
            heads.append(y)
        outs[b] = np.concatenate(heads, axis=-1) @ params.wo.data
    return outs[0] if single else outs


def transition_matrix(kind, gates: GateSignals, k: np.ndarray) -> np.ndarray:
    """Dense per-step transition ``A_t`` of a linear kind (for stability checks)."""
    kind = MixerKind.parse(kind)
    dk = len(k)
    pr = {"k": np.asarray(k, float)[None, None], "beta": np.array([[gates.beta]]),
          "alpha": np.asarray(gates.alpha, float).reshape(1, 1, *np.shape(gates.alpha))}
    if kind in (MixerKind.GLA, MixerKind.HGRN2, MixerKind.KDA):
        pr["alpha"] = np.broadcast_to(np.asarray(gates.alpha, float), (dk,)).reshape(1, 1, dk)
    else:
        pr["alpha"] = np.array([[float(np.asarray(gates.alpha).mean())]])
    return _transition_np(kind, pr, 0, 0, dk)
