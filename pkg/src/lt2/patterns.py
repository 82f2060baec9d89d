"""Causal sparsity patterns: which key positions each query may see.

Positions are 1-based in the public API, matching ``M_i ⊆ {1..i}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class SparsityPattern:
    rows: tuple[tuple[int, ...], ...]

    @classmethod
    def from_sets(cls, sets: Sequence[Iterable[int]]) -> "SparsityPattern":
        return cls(tuple(tuple(sorted(set(int(j) for j in s))) for s in sets))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SparsityPattern":
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(tuple(int(j) + 1 for j in np.nonzero(row)[0]) for row in mask))

    @property
    def L(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> tuple[int, ...]:
        if not 1 <= i <= self.L:
            raise IndexError(f"query index {i} outside 1..{self.L}")
        return self.rows[i - 1]

    def is_causal(self) -> bool:
        return all(row and row[-1] <= i and i in row and row[0] >= 1 for i, row in enumerate(self.rows, 1))

    def validate(self) -> "SparsityPattern":
        for i, row in enumerate(self.rows, 1):
            if not row or row[0] < 1 or row[-1] > i:
                raise ContractError(f"pattern row {i} is not causal: {row}")
            if i not in row:
                raise ContractError(f"pattern row {i} does not contain the query position")
        return self

    def to_mask(self) -> np.ndarray:
        """Boolean ``(L, L)`` mask, 0-based, ``mask[i, j]`` iff key j visible to query i."""
        m = np.zeros((self.L, self.L), dtype=bool)
        for i, row in enumerate(self.rows):
            if row:
                m[i, np.asarray(row) - 1] = True
        return m


def causal_pattern(L: int) -> SparsityPattern:
    return SparsityPattern(tuple(tuple(range(1, i + 1)) for i in range(1, L + 1)))


def window_pattern(L: int, w: int) -> SparsityPattern:
    if w < 1:
        raise ContractError("window size must be >= 1")
    return SparsityPattern(tuple(tuple(range(max(1, i - w + 1), i + 1)) for i in range(1, L + 1)))


def power_slash_pattern(L: int, w: int, n_slashes: int | None = None) -> SparsityPattern:
    """Local window plus the offsets ``i - 2^k`` for ``k < n_slashes``.

    ``n_slashes`` defaults to ``ceil(log2 L)``.
    """
    if w < 1:
        raise ContractError("window size must be >= 1")
    if n_slashes is None:
        n_slashes = max(1, math.ceil(math.log2(L))) if L > 1 else 1
    rows = []
    for i in range(1, L + 1):
        s = set(range(max(1, i - w + 1), i + 1))
        s.update(i - 2**k for k in range(n_slashes) if i - 2**k >= 1)
        rows.append(tuple(sorted(s)))
    return SparsityPattern(tuple(rows))


def window_mask(L: int, w: int) -> np.ndarray:
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    return (j <= i) & (j > i - w)


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))
