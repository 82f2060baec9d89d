"""Looped block stack: N shared blocks iterated T times with per-loop gates."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .mixers import MixerKind, MixerParams, init_mixer_params, mixer_forward_sequence, sdpa_output_gate
from .tensor import Tensor, as_tensor

__all__ = [
    "BlockConfig", "LoopSchedule", "HaltingHead", "LayerParams", "LoopedModel", "LoopTrace",
    "block_forward", "loop_forward", "sdpa_output_gate", "build_depth_pattern",
    "build_loop_schedule", "halting_probability", "act_halt", "ponder_cost",
    "save_checkpoint", "load_checkpoint",
]


@dataclass
class BlockConfig:
    n_layers: int = 2
    d_model: int = 16
    n_heads: int = 2
    ffn_mult: int = 4
    mixers: list[str] = field(default_factory=lambda: ["gdn", "full"])
    sdpa_gate: bool = False
    vocab_size: int = 32
    window: int = 64
    block_size: int = 8
    topk: int = 64
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def validate(self) -> "BlockConfig":
        if self.n_layers < 1:
            raise ConfigError("must be >= 1", "n_layers")
        if len(self.mixers) != self.n_layers:
            raise ConfigError(f"has {len(self.mixers)} entries, expected n_layers={self.n_layers}", "mixers")
        for i, m in enumerate(self.mixers):
            try:
                MixerKind.parse(m)
            except ContractError as e:
                raise ConfigError(str(e), f"mixers[{i}]") from None
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}", "d_model")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even (RoPE pairs)", "n_heads")
        for name in ("vocab_size", "ffn_mult", "window", "block_size", "topk"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        return self

    @property
    def kinds(self) -> list[MixerKind]:
        return [MixerKind.parse(m) for m in self.mixers]


def parse_override(entry) -> tuple[MixerKind, int | None] | None:
    """``None`` | ``"full"`` | ``"window:<w>"`` -> ``(kind, window)``."""
    if entry is None:
        return None
    s = str(entry).strip().lower()
    if s in ("", "none", "pattern"):
        return None
    if s in ("full", "fullattention"):
        return MixerKind.FULL, None
    if s.startswith("window"):
        _, _, w = s.partition(":")
        try:
            w = int(w)
        except ValueError:
            raise ContractError(f"bad window override {entry!r}") from None
        if w < 1:
            raise ContractError("window override needs w >= 1")
        return MixerKind.WINDOW, w
    raise ContractError(f"unknown loop override {entry!r}")


@dataclass
class LoopSchedule:
    T: int = 1
    overrides: list[str | None] | None = None

    def validate(self) -> "LoopSchedule":
        if self.T < 1:
            raise ContractError(f"loop count T must be >= 1, got {self.T}")
        if self.overrides is not None:
            if len(self.overrides) != self.T:
                raise ContractError(f"{len(self.overrides)} overrides for T={self.T}")
            for o in self.overrides:
                parse_override(o)
        return self

    def override(self, tau: int):
        """Override for loop ``tau`` (0-based)."""
        return None if self.overrides is None else parse_override(self.overrides[tau])


def build_loop_schedule(kind: str = "uniform", T: int = 4) -> LoopSchedule:
    c2f = ["full", "window:512", "window:256", "window:128"]
    if kind == "uniform":
        return LoopSchedule(T).validate()
    if kind in ("coarse_to_fine", "fine_to_coarse"):
        if T != 4:
            raise ContractError(f"schedule {kind!r} is defined for T=4 only")
        return LoopSchedule(4, c2f if kind == "coarse_to_fine" else c2f[::-1])
    raise ContractError(f"unknown schedule {kind!r}")


def build_depth_pattern(N: int, ratio=(1, 4), pattern: str = "interleave", *,
                        linear_kind: str = "gdn", full_kind: str = "full",
                        n_full: int | None = None) -> list[str]:
    """Mixer per layer for a ``full:linear`` ratio.

    Layer numbers below are 1-based. ``interleave`` ends each group of
    ``1 + linear/full`` layers with a full layer; ``bookend`` puts half the full
    layers (rounded up) at the bottom and the rest at the top; ``front`` and
    ``back`` pack them at the bottom or top.
    """
    full, lin = ratio
    if full < 0 or lin < 0 or full + lin <= 0:
        raise ContractError(f"invalid ratio {ratio}")
    if n_full is None:
        n_full = int(round(N * full / (full + lin)))
        if full > 0 and n_full == 0:
            n_full = 1
    if n_full > N:
        raise ContractError(f"{n_full} full layers requested but only {N} layers")
    if n_full < 0:
        raise ContractError("n_full must be >= 0")
    if pattern == "interleave":
        slots = {round(k * N / n_full) for k in range(1, n_full + 1)} if n_full else set()
    elif pattern == "bookend":
        lo = math.ceil(n_full / 2)
        slots = set(range(1, lo + 1)) | set(range(N - (n_full - lo) + 1, N + 1))
    elif pattern == "front":
        slots = set(range(1, n_full + 1))
    elif pattern == "back":
        slots = set(range(N - n_full + 1, N + 1))
    else:
        raise ContractError(f"unknown depth pattern {pattern!r}")
    return [full_kind if i in slots else linear_kind for i in range(1, N + 1)]


# -- halting ----------------------------------------------------------------------------
@dataclass
class HaltingHead:
    w: Tensor
    b: Tensor
    eps: float = 0.01


def halting_probability(head: HaltingHead, h) -> Tensor:
    h = as_tensor(h)
    return tn.sigmoid(h @ head.w + head.b)


def act_halt(p, eps: float = 0.01, T_max: int | None = None) -> int:
    """Smallest 1-based loop index whose cumulative halting probability reaches ``1 - eps``."""
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0:
        raise ContractError("act_halt needs at least one probability")
    if not 0.0 < eps < 1.0:
        raise ContractError("eps must lie in (0, 1)")
    T_max = len(p) if T_max is None else T_max
    hit = np.nonzero(np.cumsum(p[:T_max]) >= 1.0 - eps)[0]
    return int(hit[0]) + 1 if hit.size else int(T_max)


def ponder_cost(p) -> Tensor:
    """Expected iteration count ``sum_tau clip(1 - sum_{tau' < tau} p_tau', 0, 1)``.

    ``p`` is a list over loops of Tensors with identical shapes; returns the
    per-position cost averaged over positions.
    """
    remaining = None
    total = None
    for pt in p:
        pt = as_tensor(pt)
        r = Tensor(np.ones(pt.shape)) if remaining is None else remaining
        rc = tn.where((r.data > 0) & (r.data < 1), r, Tensor(np.clip(r.data, 0, 1)))
        total = rc if total is None else total + rc
        remaining = r - pt
    return tn.mean(total)


# -- parameters -----------------------------------------------------------------------------
@dataclass
class LayerParams:
    norm1: Tensor
    mixer: MixerParams
    norm2: Tensor
    w1: Tensor
    w2: Tensor


def _ffn(p: LayerParams, x: Tensor) -> Tensor:
    return tn.silu(x @ p.w1) @ p.w2


def block_forward(cfg: BlockConfig, params: LayerParams, h, *, kind=None, window: int | None = None,
                  record: dict | None = None) -> Tensor:
    """Pre-norm block: ``h' = h + Mixer(norm(h))``, ``out = h' + FFN(norm(h'))``."""
    h = as_tensor(h)
    kind = params.mixer.kind if kind is None else MixerKind.parse(kind)
    cap = {} if record is not None else None
    mix = mixer_forward_sequence(kind, params.mixer, tn.rmsnorm(h, params.norm1, cfg.norm_eps),
                                 window=window, capture=cap)
    h1 = h + mix
    f = _ffn(params, tn.rmsnorm(h1, params.norm2, cfg.norm_eps))
    out = h1 + f
    if record is not None:
        record["attn"] = cap.get("attn")
        record["mixer_out"] = mix.data
        record["ffn_out"] = f.data
        record["residual"] = out.data
    return out


@dataclass
class LoopTrace:
    """Hidden states ``h^(0..T)`` plus optional per-(loop, layer) records."""

    states: list[Tensor]
    records: list[dict] | None = None
    halt_probs: list[Tensor] | None = None
    halt_steps: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.states) - 1


class LoopedModel:
    """Embedding, ``N`` shared blocks applied ``T`` times, final norm and head.

    ``params`` is an ordered name -> Tensor dict; the loop gates
    ``loop_gate`` of shape ``(T, d)`` start at zero.
    """

    def __init__(self, cfg: BlockConfig, schedule: LoopSchedule | None = None, *, seed: int = 0,
                 act: bool = False, act_eps: float = 0.01, ponder_weight: float = 0.0):
        self.cfg = cfg.validate()
        self.schedule = (schedule or LoopSchedule()).validate()
        self.act = act
        self.ponder_weight = ponder_weight
        rng = np.random.default_rng(seed)
        d, V = cfg.d_model, cfg.vocab_size
        std = d**-0.5
        out_std = std / math.sqrt(2 * cfg.n_layers)
        P: dict[str, Tensor] = {}
        P["embed"] = Tensor(rng.normal(0, 1.0, (V, d)), requires_grad=True)
        self.layers: list[LayerParams] = []
        for i, kind in enumerate(cfg.kinds):
            mp = init_mixer_params(kind, d, cfg.n_heads, rng, sdpa_gate=cfg.sdpa_gate, window=cfg.window,
                                   block_size=cfg.block_size, topk=cfg.topk, out_std=out_std,
                                   rope_theta=cfg.rope_theta)
            lp = LayerParams(Tensor(np.ones(d), requires_grad=True), mp, Tensor(np.ones(d), requires_grad=True),
                             Tensor(rng.normal(0, std, (d, cfg.ffn_mult * d)), requires_grad=True),
                             Tensor(rng.normal(0, (cfg.ffn_mult * d) ** -0.5 / math.sqrt(2 * cfg.n_layers),
                                               (cfg.ffn_mult * d, d)), requires_grad=True))
            self.layers.append(lp)
            P[f"layers.{i}.norm1"] = lp.norm1
            for n, t in mp.named_tensors().items():
                P[f"layers.{i}.mixer.{n}"] = t
            P[f"layers.{i}.norm2"] = lp.norm2
            P[f"layers.{i}.ffn.w1"] = lp.w1
            P[f"layers.{i}.ffn.w2"] = lp.w2
        P["loop_gate"] = Tensor(np.zeros((self.schedule.T, d)), requires_grad=True)
        P["final_norm"] = Tensor(np.ones(d), requires_grad=True)
        P["head"] = Tensor(rng.normal(0, std, (d, V)), requires_grad=True)
        self.halting = None
        if act:
            P["halt.w"] = Tensor(np.zeros(d), requires_grad=True)
            P["halt.b"] = Tensor(np.array(-2.0), requires_grad=True)
            self.halting = HaltingHead(P["halt.w"], P["halt.b"], act_eps)
        self.params = P

    # parameter bookkeeping
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self, shared_only: bool = False) -> int:
        skip = ("loop_gate", "halt.w", "halt.b") if shared_only else ()
        return sum(t.size for n, t in self.params.items() if n not in skip)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def config_dict(self) -> dict:
        return {"block": asdict(self.cfg), "schedule": asdict(self.schedule), "act": self.act,
                "ponder_weight": self.ponder_weight}

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0) -> "LoopedModel":
        try:
            cfg = BlockConfig(**d["block"])
            sch = LoopSchedule(**d.get("schedule", {}))
        except TypeError as e:
            raise ConfigError(str(e), "model") from None
        return cls(cfg, sch, seed=seed, act=d.get("act", False), ponder_weight=d.get("ponder_weight", 0.0))

    # forward
    def decode(self, h) -> Tensor:
        return tn.rmsnorm(h, self.params["final_norm"], self.cfg.norm_eps) @ self.params["head"]

    def forward(self, ids, *, capture: bool = False, loop_logits: bool = False, gate: bool = True):
        """Return ``(logits, trace)``; with ``loop_logits`` logits is a list over loops."""
        h, trace = loop_forward(self, ids, capture=capture, gate=gate)
        if loop_logits:
            return [self.decode(s) for s in trace.states[1:]], trace
        return self.decode(h), trace

    __call__ = forward


def loop_forward(model: LoopedModel, ids, *, capture: bool = False, gate: bool = True,
                 T: int | None = None) -> tuple[Tensor, LoopTrace]:
    """``h^(tau) = F(h^(tau-1)) + rho_tau * h^(tau-1)`` for ``tau = 1..T``.

    ``gate=False`` drops the ``rho`` term entirely (used to check that the
    zero-initialised gate is neutral).
    """
    T = model.schedule.T if T is None else T
    if T < 1:
        raise ContractError(f"loop count T must be >= 1, got {T}")
    if T > model.params["loop_gate"].shape[0]:
        raise ContractError(f"T={T} exceeds the {model.params['loop_gate'].shape[0]} loop gates")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= model.cfg.vocab_size:
        raise ContractError("token id outside vocabulary")
    h = tn.embedding(model.params["embed"], ids)
    states = [h]
    records = [] if capture else None
    probs = [] if model.halting is not None else None
    cum = np.zeros(ids.shape)
    halted = np.zeros(ids.shape, dtype=bool)
    steps = np.full(ids.shape, T)
    rho = model.params["loop_gate"]
    for tau in range(T):
        ov = model.schedule.override(tau) if model.schedule.overrides is not None else None
        prev = h
        x = h
        for li, lp in enumerate(model.layers):
            rec = {"loop": tau + 1, "layer": li + 1} if capture else None
            kind, window = (ov if ov is not None else (None, None))
            x = block_forward(model.cfg, lp, x, kind=kind, window=window, record=rec)
            if capture:
                records.append(rec)
        if gate:
            x = x + tn.getitem(rho, tau) * prev
        if model.halting is not None:
            x = tn.where(halted[..., None], prev, x)
            p = halting_probability(model.halting, x)
            probs.append(p)
            cum = cum + np.where(halted, 0.0, p.data)
            newly = (~halted) & (cum >= 1.0 - model.halting.eps)
            steps = np.where(newly, tau + 1, steps)
            halted = halted | newly
        h = x
        states.append(h)
    return h, LoopTrace(states, records, probs, steps if probs is not None else None)


# -- checkpoints ---------------------------------------------------------------------------------
def save_checkpoint(model: LoopedModel, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (concatenated float64 arrays) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    blobs = []
    for name, t in model.params.items():
        a = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.ravel())
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
    np.concatenate(blobs).tofile(bin_path)
    man_path.write_text(json.dumps({"config": model.config_dict(), "tensors": entries}, indent=1))
    return bin_path, man_path


def load_checkpoint(path) -> LoopedModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    model = LoopedModel.from_config_dict(manifest["config"])
    for e in manifest["tensors"]:
        if e["name"] not in model.params:
            raise ConfigError(f"unknown tensor {e['name']}", "tensors")
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = flat[e["offset"]:e["offset"] + n].reshape(e["shape"])
        t = model.params[e["name"]]
        if t.shape != arr.shape:
            raise DimensionError(f"{e['name']}: checkpoint shape {arr.shape} != model {t.shape}")
        t.data[...] = arr
    return model
