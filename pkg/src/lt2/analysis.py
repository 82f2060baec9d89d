"""Closed-form and combinatorial analysis of looped mixers.

Covers products of diagonal-plus-rank-one transitions, Householder
constructions, receptive fields on unrolled sparse patterns, influence
profiles under a uniform-attention prior, and an analytic cost model.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .mixers import ATTENTION_KINDS, LINEAR_KINDS, MixerKind
from .patterns import SparsityPattern


# -- DPLR products ----------------------------------------------------------------------------
@dataclass
class DplrFactor:
    """One transition ``Diag(alpha) (I - beta k k^T)``."""

    alpha: np.ndarray
    beta: float
    key: np.ndarray

    def __post_init__(self):
        self.key = np.asarray(self.key, dtype=float).ravel()
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), self.key.shape).copy()
        self.beta = float(self.beta)

    @property
    def d_k(self) -> int:
        return self.key.size

    def validate(self) -> "DplrFactor":
        if abs(np.linalg.norm(self.key) - 1.0) > 1e-10:
            raise ContractError(f"key norm {np.linalg.norm(self.key):.12g} is not 1")
        if (self.alpha < 0).any() or (self.alpha > 1).any():
            raise ContractError("alpha outside [0, 1]")
        if not 0.0 <= self.beta <= 2.0:
            raise ContractError("beta outside [0, 2]")
        return self

    def matrix(self) -> np.ndarray:
        k = self.key
        return self.alpha[:, None] * (np.eye(k.size) - self.beta * np.outer(k, k))

    @classmethod
    def identity(cls, d_k: int) -> "DplrFactor":
        e = np.zeros(d_k)
        e[0] = 1.0
        return cls(np.ones(d_k), 0.0, e)


def effective_transition(factors: Sequence[DplrFactor], d_k: int | None = None) -> np.ndarray:
    """``A_T ... A_2 A_1``: the first factor is applied first (rightmost)."""
    if not factors:
        if d_k is None:
            raise ContractError("empty factor list needs d_k")
        return np.eye(d_k)
    A = np.eye(factors[0].d_k)
    for f in factors:
        f.validate()
        A = f.matrix() @ A
    return A


def dplr_rank(factors: Sequence[DplrFactor], d_k: int | None = None, rtol: float = 1e-8) -> int:
    """Numerical rank of ``I - A_eff`` (singular values above ``rtol * sigma_max``)."""
    A = effective_transition(factors, d_k)
    s = np.linalg.svd(np.eye(A.shape[0]) - A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > rtol * s[0]).sum())


def householder_for_transposition(i: int, j: int, d_k: int) -> DplrFactor:
    """Reflection swapping coordinates ``i`` and ``j`` (1-based)."""
    if i == j:
        raise ContractError("transposition needs i != j")
    if not (1 <= i <= d_k and 1 <= j <= d_k):
        raise ContractError(f"indices ({i}, {j}) outside 1..{d_k}")
    k = np.zeros(d_k)
    k[i - 1], k[j - 1] = 1.0, -1.0
    return DplrFactor(np.ones(d_k), 2.0, k / math.sqrt(2.0))


def orthogonal_decompose(Q, T: int | None = None, tol: float = 1e-8) -> list[DplrFactor]:
    """Write orthogonal ``Q`` as at most ``d_k`` reflections (alpha=1, beta=2).

    Column by column, a reflection maps the current column onto ``+e_j``; the
    reflection vector ``x - e_j`` has its pivot entry computed in the
    cancellation-free form ``-(|x|^2 - x_j^2) / (x_j + 1)`` when ``x_j > 0``.
    With ``T`` given, the list is padded with identity factors (beta=0).
    """
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    if Q.shape != (d, d) or np.abs(Q.T @ Q - np.eye(d)).max() > tol:
        raise ContractError("orthogonal_decompose needs an orthogonal square matrix")
    M = Q.copy()
    refl = []
    for j in range(d):
        x = M[:, j]
        v = x.copy()
        rest = float(x @ x) - x[j] ** 2
        v[j] = -rest / (x[j] + 1.0) if x[j] > 0 else x[j] - 1.0
        n = np.linalg.norm(v)
        if n < 1e-14:
            continue
        v /= n
        M = M - 2.0 * np.outer(v, v @ M)
        refl.append(v)
    # M = H_m ... H_1 Q = I, so Q = H_1 ... H_m; the factor applied first is H_m
    factors = [DplrFactor(np.ones(d), 2.0, v) for v in reversed(refl)]
    if T is not None:
        if T < len(factors):
            raise ContractError(f"T={T} is fewer than the {len(factors)} reflections needed")
        factors = factors + [DplrFactor.identity(d) for _ in range(T - len(factors))]
    return factors


# -- receptive fields --------------------------------------------------------------------------
def receptive_field(pattern: SparsityPattern, T: int, i: int) -> tuple[int, ...]:
    """Positions with a path to ``(i, T)`` in the unrolled DAG (1-based, sorted)."""
    if T < 1:
        raise ContractError("T must be >= 1")
    if not 1 <= i <= pattern.L:
        raise ContractError(f"position {i} outside 1..{pattern.L}")
    frontier = {i}
    for _ in range(T):
        nxt = set()
        for j in frontier:
            nxt.update(pattern[j])
        frontier = nxt
    return tuple(sorted(frontier))


def receptive_field_masks(pattern: SparsityPattern, T_max: int) -> list[np.ndarray]:
    """Reachability masks for ``T = 1..T_max`` as boolean ``(L, L)`` matrices."""
    M = pattern.to_mask().astype(np.int64)
    R = M.copy()
    out = [R.astype(bool)]
    for _ in range(T_max - 1):
        R = ((R @ M) > 0).astype(np.int64)
        out.append(R.astype(bool))
    return out


def window_rf_size(i: int, w: int, T: int) -> int:
    return min(i, T * (w - 1) + 1)


def contiguous_reach(field_: Iterable[int], i: int) -> int:
    """Largest ``D`` with ``{i-D, ..., i}`` inside the set (0 if only ``i``)."""
    s = set(field_)
    D = 0
    while i - D - 1 >= 1 and (i - D - 1) in s:
        D += 1
    return D


# -- influence profiles ---------------------------------------------------------------------------
@dataclass
class InfluenceProfile:
    P: np.ndarray
    T: int
    w: int
    alpha_residual: float

    @property
    def mean(self) -> float:
        return float(np.arange(self.P.size) @ self.P)

    @property
    def variance(self) -> float:
        d = np.arange(self.P.size)
        return float(((d - self.mean) ** 2) @ self.P)

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "w": self.w, "alpha_residual": self.alpha_residual,
                           "P": self.P.tolist()})


def influence_profile(w: int, T: int, alpha_residual: float = 0.0) -> InfluenceProfile:
    """``T``-fold convolution of the spike-and-slab single-loop kernel."""
    if w < 1 or T < 1:
        raise ContractError("influence_profile needs w >= 1 and T >= 1")
    a = float(alpha_residual)
    if not 0.0 <= a < 1.0:
        raise ContractError("alpha_residual must lie in [0, 1)")
    k = np.full(w, (1.0 - a) / w)
    k[0] += a
    P = np.array([1.0])
    for _ in range(T):
        P = np.convolve(P, k)
    return InfluenceProfile(P, T, w, a)


HORIZON_DEFINITIONS = ("interval", "tail", "pointwise")


def effective_horizon(profile: InfluenceProfile, eps: float, definition: str = "interval") -> int:
    """Distance over which all but ``eps`` of the influence is concentrated.

    * ``interval``: width ``b - a`` of the shortest distance interval
      ``[a, b]`` holding at least ``1 - eps`` of the mass;
    * ``tail``: smallest ``d`` whose tail mass beyond ``d`` is at most ``eps``;
    * ``pointwise``: largest ``d`` with ``P(d) >= eps`` (0 if none).
    """
    if not 0.0 < eps < 1.0:
        raise ContractError("eps must lie in (0, 1)")
    P = profile.P
    need = 1.0 - eps - 1e-12
    if definition == "tail":
        tail = 1.0 - np.cumsum(P)
        return int(np.argmax(tail <= eps + 1e-12))
    if definition == "pointwise":
        idx = np.nonzero(P >= eps)[0]
        return int(idx[-1]) if idx.size else 0
    if definition != "interval":
        raise ContractError(f"unknown horizon definition {definition!r}")
    c = np.concatenate([[0.0], np.cumsum(P)])
    n = P.size
    best = n - 1
    # for each start a, smallest b with mass(a..b) >= need, via searchsorted
    for a in range(n):
        b = int(np.searchsorted(c, c[a] + need, side="left")) - 1
        if b >= n:
            break
        best = min(best, b - a)
    return best


# -- cost model -----------------------------------------------------------------------------------
FLOP_CONSTANT = 4  # two matrix products per mixer, 2 flops per multiply-accumulate


@dataclass
class CostEstimate:
    kind: str
    L: int
    d: int
    d_k: int
    d_v: int
    w: int
    T: int
    N: int
    batch: int
    train_flops_per_layer: int
    cache_memory_per_layer: int

    @property
    def total_flops(self) -> int:
        return self.train_flops_per_layer * self.N * self.T * self.batch

    @property
    def total_cache(self) -> int:
        return self.cache_memory_per_layer * self.N * self.T * self.batch

    def row(self) -> dict:
        r = asdict(self)
        r["total_flops"] = self.total_flops
        r["total_cache"] = self.total_cache
        return r


COST_HEADER = ["kind", "L", "d", "d_k", "d_v", "w", "T", "N", "batch",
               "train_flops_per_layer", "cache_memory_per_layer", "total_flops", "total_cache"]


def cost_model(kind, L: int, d: int, d_k: int, d_v: int, w: int, T: int = 1, N: int = 1,
               batch: int = 1) -> CostEstimate:
    kind = MixerKind.parse(kind)
    for name, val in (("L", L), ("d", d), ("d_k", d_k), ("d_v", d_v), ("w", w), ("T", T), ("N", N), ("batch", batch)):
        if val < 1:
            raise ContractError(f"cost_model: {name} must be positive")
    c = FLOP_CONSTANT
    if kind is MixerKind.FULL:
        flops, cache = c * L * L * d, L * d
    elif kind in LINEAR_KINDS:
        flops, cache = c * L * d_k * d_v, d_k * d_v
    else:
        flops = c * L * w * d
        cache = w * d if kind is MixerKind.WINDOW else L * d
    return CostEstimate(kind.value, L, d, d_k, d_v, w, T, N, batch, flops, cache)


# -- tabular output ---------------------------------------------------------------------------------
def to_csv(header: Sequence[str], rows: Iterable[dict | Sequence]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([r[h] for h in header] if isinstance(r, dict) else list(r))
    return buf.getvalue()


def cost_table(kinds: Sequence, Ls: Sequence[int], *, d: int, d_k: int, d_v: int, w: int, T: int,
               N: int, batch: int = 1) -> list[dict]:
    return [cost_model(k, L, d, d_k, d_v, w, T, N, batch).row() for k in kinds for L in Ls]


RF_HEADER = ["pattern", "w", "T", "i", "size", "closed_form", "contiguous_reach"]


def rf_table(pattern_name: str, L: int, w: int, T_values: Sequence[int]) -> list[dict]:
    """Receptive-field size per query and loop count (closed form for windows)."""
    from .patterns import power_slash_pattern, window_pattern

    if pattern_name == "window":
        pat = window_pattern(L, w)
    elif pattern_name in ("powerslash", "power"):
        pat = power_slash_pattern(L, w)
    else:
        raise ContractError(f"unknown pattern {pattern_name!r}")
    masks = receptive_field_masks(pat, max(T_values))
    rows = []
    for T in T_values:
        R = masks[T - 1]
        for i in range(1, L + 1):
            fld = np.nonzero(R[i - 1])[0] + 1
            rows.append({"pattern": pattern_name, "w": w, "T": T, "i": i, "size": int(fld.size),
                         "closed_form": window_rf_size(i, w, T) if pattern_name == "window" else "",
                         "contiguous_reach": contiguous_reach(fld.tolist(), i)})
    return rows
