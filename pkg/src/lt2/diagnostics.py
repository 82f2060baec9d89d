"""Per-(loop, layer) diagnostics over an unrolled looped forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import to_csv
from .errors import ContractError
from .model import LoopTrace


def first_token_mass(attn_weights) -> np.ndarray:
    """Per-head mean weight on key 1 over queries ``i >= 2``.

    Accepts ``(L, L)``, ``(H, L, L)`` or ``(B, H, L, L)``; the batch axis is
    averaged.
    """
    a = np.asarray(attn_weights, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if a.shape[-1] < 2:
        raise ContractError("first_token_mass needs L >= 2")
    m = a[..., 1:, 0].mean(axis=-1)
    return m.mean(axis=0) if m.ndim == 2 else m


def max_ffn_residual(ffn_out) -> float:
    a = np.asarray(ffn_out, dtype=float)
    return float(np.abs(a).max()) if a.size else 0.0


def residual_rms(h) -> float:
    a = np.asarray(h, dtype=float)
    return float(np.sqrt(np.mean(a * a)))


@dataclass
class TraceRecord:
    loop: int
    layer: int
    first_token_mass: np.ndarray | None
    max_ffn_residual: float
    residual_rms: float


@dataclass
class UnrolledTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    HEADER = ("loop", "layer", "head", "first_token_mass", "max_ffn_residual", "residual_rms")

    def rows(self) -> list[tuple]:
        out = []
        for r in self.records:
            if r.first_token_mass is None:
                out.append((r.loop, r.layer, "", "", r.max_ffn_residual, r.residual_rms))
                continue
            for h, m in enumerate(r.first_token_mass):
                out.append((r.loop, r.layer, h, float(m), r.max_ffn_residual, r.residual_rms))
            out.append((r.loop, r.layer, "mean", float(np.mean(r.first_token_mass)),
                        r.max_ffn_residual, r.residual_rms))
        return out

    def to_csv(self) -> str:
        return to_csv(self.HEADER, self.rows())


def residual_rms_trace(trace: LoopTrace) -> UnrolledTrace:
    """Collect the three metrics in unrolled order (loop-major, then layer).

    Linear-mixer layers have no attention matrix; their first-token mass is
    left empty.
    """
    if trace.records is None:
        raise ContractError("trace was captured without diagnostics (capture=False)")
    recs = sorted(trace.records, key=lambda r: (r["loop"], r["layer"]))
    out = UnrolledTrace()
    for r in recs:
        attn = r.get("attn")
        out.records.append(TraceRecord(
            r["loop"], r["layer"],
            first_token_mass(attn) if attn is not None else None,
            max_ffn_residual(r["ffn_out"]),
            residual_rms(r["residual"]),
        ))
    return out
