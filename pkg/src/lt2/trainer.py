"""AdamW, learning-rate schedule, losses and the synthetic-task training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .analysis import to_csv
from .errors import ContractError, DimensionError, NumericError
from .model import BlockConfig, LoopedModel, LoopSchedule, ponder_cost
from .tasks import (TOKENIZER, CurriculumState, collate, curriculum_step, eval_seeds,
                    gen_state_recall, tokenize_program, train_seed)
from .tensor import Tensor, as_tensor


# -- optimiser -------------------------------------------------------------------------------
@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = 1.0
    decay_vectors: bool = False  # 1-D params (norm gains, biases) are not decayed by default
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None, state: OptimState,
               lr: float) -> float:
    """Clip by global norm, then a decoupled AdamW update in place.

    ``grads`` defaults to each parameter's ``.grad`` (missing -> zeros).
    Returns the pre-clip global gradient norm. A non-finite gradient raises
    :class:`NumericError` before anything is modified.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype) for p, g in zip(params, grads)]
    if len(grads) != len(params):
        raise ContractError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient; step aborted")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.weight_decay if (p.data.ndim >= 2 or state.decay_vectors) else 0.0
        p.data *= 1.0 - lr * wd
        p.data -= lr * upd
    return norm


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak: float, floor_ratio: float = 1e-6) -> float:
    """Linear warmup to ``peak``, then cosine decay to ``floor_ratio * peak`` at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ContractError("warmup_steps exceeds total_steps")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return peak
    floor = floor_ratio * peak
    prog = (step - warmup_steps) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * prog))


# -- losses ----------------------------------------------------------------------------------
def masked_cross_entropy(logits, targets, mask, denom: int | None = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is set.

    ``denom`` replaces the mask count as divisor (used when a batch is split
    into micro-batches whose losses are summed).
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    count = int(mask.sum()) if denom is None else int(denom)
    if count == 0:
        raise ContractError("loss mask selects no positions")
    nll = -tn.take_along_axis(tn.log_softmax(logits, axis=-1), targets[..., None], axis=-1)
    nll = tn.reshape(nll, targets.shape)
    return tn.reduce_sum(tn.where(mask, nll, 0.0)) * (1.0 / count)


@dataclass
class KdConfig:
    temperature: float = 1.0
    top_k: int = 8
    weights: list[float] | None = None
    schedule: str = "warmup_uniform_then_final"
    warm_frac: float = 0.1

    def validate(self, V: int | None = None) -> "KdConfig":
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.top_k < 1 or (V is not None and self.top_k > V):
            raise ContractError(f"top_k={self.top_k} outside [1, {V}]")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
                raise ContractError("per-loop weights must lie on the simplex")
        return self


def kd_weight_schedule(step: int, total: int, T: int, warm_frac: float = 0.1) -> np.ndarray:
    """Per-loop KD weights.

    The non-final loops ramp linearly from 0 to ``1/T`` over the first
    ``warm_frac`` of training, stay uniform until ``total / 2`` and are then
    switched off, leaving only the final loop.
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    if step > total:
        raise ContractError(f"step {step} beyond total {total}")
    w = np.zeros(T)
    if T == 1 or step > total / 2:
        w[-1] = 1.0
        return w
    warm = warm_frac * total
    r = 1.0 if warm <= 0 or step >= warm else step / warm
    w[:-1] = r / T
    w[-1] = 1.0 - (T - 1) * r / T
    return w


def _topk_indices(z: np.ndarray, k: int) -> np.ndarray:
    idx = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    return np.sort(idx, axis=-1)


def kd_loss(teacher_logits: Sequence, student_logits: Sequence, cfg: KdConfig,
            weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum over loops of ``KL(teacher_topk || student_topk)``, averaged over positions.

    Both distributions are temperature-scaled softmaxes renormalised over the
    teacher's top-k token set at each position.
    """
    if len(teacher_logits) != len(student_logits):
        raise ContractError("teacher and student expose different loop counts")
    T = len(student_logits)
    w = np.asarray(weights if weights is not None else (cfg.weights or kd_weight_schedule(0, 1, T)), dtype=float)
    if w.shape != (T,):
        raise ContractError(f"{w.size} weights for {T} loops")
    total = None
    for tau in range(T):
        zt = np.asarray(teacher_logits[tau].data if isinstance(teacher_logits[tau], Tensor) else teacher_logits[tau],
                        dtype=float)
        zs = as_tensor(student_logits[tau])
        if zt.shape != zs.shape:
            raise DimensionError(f"teacher logits {zt.shape} vs student logits {zs.shape}")
        V = zt.shape[-1]
        cfg.validate(V)
        if w[tau] == 0.0:
            continue
        idx = _topk_indices(zt, cfg.top_k)
        # same code path for both sides so identical logits give exactly zero
        t_log = tn.log_softmax(Tensor(np.take_along_axis(zt, idx, axis=-1)) * (1.0 / cfg.temperature), axis=-1).data
        pt = np.exp(t_log)
        s_log = tn.log_softmax(tn.take_along_axis(zs, idx, axis=-1) * (1.0 / cfg.temperature), axis=-1)
        kl = tn.reduce_sum((t_log - s_log) * pt, axis=-1)
        term = tn.mean(kl) * float(w[tau])
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


# -- training loop ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_steps: int = 1000
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eval_every: int = 500
    eval_size: int = 512
    eval_batch: int = 64
    micro_batch: int | None = None  # gradient accumulation chunk size
    stage_budget: int = 100_000
    threshold: float = 0.90
    stages: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    max_stage: int | None = None  # stop after this stage size is solved
    divergence_window: int = 1000
    divergence_factor: float = 10.0


@dataclass
class RunReport:
    curves: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    solved: list[int] = field(default_factory=list)
    n_max: int | None = None
    diverged: bool = False
    divergence: dict | None = None
    wall_time: float = 0.0
    steps_run: int = 0

    CURVE_HEADER = ("step", "loss", "grad_norm", "lr", "stage")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def curves_csv(self) -> str:
        return to_csv(self.CURVE_HEADER, self.curves)


def evaluate(model: LoopedModel, n: int, count: int = 512, batch: int = 64) -> float:
    """Accuracy of the argmax token at every ``?`` over held-out programs."""
    correct = total = 0
    seeds = list(eval_seeds(n, count))
    with tn.no_grad():
        for s in range(0, len(seeds), batch):
            items = [tokenize_program(gen_state_recall(n, n, sd)) for sd in seeds[s:s + batch]]
            ids, mask, tg = collate(items)
            logits, _ = model(ids)
            pred = logits.data.argmax(axis=-1)
            correct += int((pred[mask] == tg[mask]).sum())
            total += int(mask.sum())
    return correct / total if total else 0.0


def train_step(model: LoopedModel, opt: OptimState, ids, mask, tg, lr: float,
               micro_batch: int | None = None) -> tuple[float, float]:
    """One optimiser step; with ``micro_batch`` the batch is processed in chunks
    whose gradients accumulate to the full-batch gradient."""
    B = ids.shape[0]
    mb = B if not micro_batch else min(micro_batch, B)
    count = int(np.asarray(mask).sum())
    model.zero_grad()
    total = 0.0
    for s in range(0, B, mb):
        sl = slice(s, s + mb)
        if not mask[sl].any():
            continue
        logits, trace = model(ids[sl])
        loss = masked_cross_entropy(logits, tg[sl], mask[sl], denom=count)
        if model.halting is not None and model.ponder_weight:
            loss = loss + ponder_cost(trace.halt_probs) * (model.ponder_weight * ids[sl].shape[0] / B)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise NumericError(f"non-finite loss {lv}")
        tn.backward(loss)
        total += lv
        del logits, trace, loss
    gnorm = adamw_step(model.parameters(), None, opt, lr)
    return total, gnorm


def train_synthetic(model: LoopedModel | dict, cfg: TrainConfig | None = None, *, seed: int = 0,
                    log=None) -> RunReport:
    """Run the curriculum on the state-recall task and return curves and outcomes."""
    cfg = cfg or TrainConfig()
    if isinstance(model, dict):
        model = LoopedModel.from_config_dict(model, seed=seed)
    if model.cfg.vocab_size < TOKENIZER.vocab_size:
        raise ContractError(f"model vocabulary {model.cfg.vocab_size} < tokenizer {TOKENIZER.vocab_size}")
    rng = np.random.default_rng(seed)
    opt = OptimState(weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    cur = CurriculumState(budget=cfg.stage_budget, threshold=cfg.threshold, stages=tuple(cfg.stages))
    report = RunReport()
    t0 = time.perf_counter()
    since_eval = 0
    for step in range(1, cfg.steps + 1):
        if cur.finished or (cfg.max_stage is not None and cfg.max_stage in cur.solved):
            break
        n = cur.n
        items = [tokenize_program(gen_state_recall(n, n, train_seed(rng))) for _ in range(cfg.batch_size)]
        ids, mask, tg = collate(items)
        lr = lr_schedule(step, min(cfg.warmup_steps, cfg.steps), cfg.steps, cfg.peak_lr)
        try:
            loss, gnorm = train_step(model, opt, ids, mask, tg, lr, cfg.micro_batch)
        except NumericError as e:
            report.diverged = True
            report.divergence = {"step": step, "reason": str(e)}
            break
        report.curves.append({"step": step, "loss": loss, "grad_norm": gnorm, "lr": lr, "stage": n})
        report.steps_run = step
        if len(report.curves) > cfg.divergence_window:
            past = report.curves[-1 - cfg.divergence_window]["loss"]
            if loss > cfg.divergence_factor * past:
                report.diverged = True
                report.divergence = {"step": step, "reason": f"loss {loss:.4g} > {cfg.divergence_factor}x {past:.4g}"}
                break
        since_eval += 1
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = evaluate(model, n, cfg.eval_size, cfg.eval_batch)
            report.evals.append({"step": step, "stage": n, "accuracy": acc})
            cur = curriculum_step(cur, acc, steps=since_eval)
            since_eval = 0
            if log:
                log(f"step {step} stage {n} loss {loss:.4f} acc {acc:.3f}")
    report.solved = list(cur.solved)
    report.n_max = cur.n_max
    report.wall_time = time.perf_counter() - t0
    return report


# -- distillation demo -------------------------------------------------------------------------------
def kd_demo(block: BlockConfig, T: int = 3, steps: int = 20, *, seed: int = 0, seq_len: int = 16,
            batch: int = 4, lr: float = 3e-3, kd: KdConfig | None = None) -> list[dict]:
    """Distil a separately seeded frozen teacher into a student on random tokens.

    Returns one row per step with the loss and the per-loop weights in use.
    """
    kd = kd or KdConfig(top_k=min(8, block.vocab_size))
    teacher = LoopedModel(block, LoopSchedule(T), seed=seed + 1)
    student = LoopedModel(block, LoopSchedule(T), seed=seed)
    rng = np.random.default_rng(seed)
    opt = OptimState()
    rows = []
    for step in range(1, steps + 1):
        ids = rng.integers(0, block.vocab_size, size=(batch, seq_len))
        with tn.no_grad():
            t_logits, _ = teacher(ids, loop_logits=True)
        s_logits, _ = student(ids, loop_logits=True)
        w = kd_weight_schedule(step, steps, T, kd.warm_frac)
        loss = kd_loss(t_logits, s_logits, kd, weights=w)
        student.zero_grad()
        tn.backward(loss)
        gn = adamw_step(student.parameters(), None, opt, lr)
        rows.append({"step": step, "kd_loss": float(loss.data), "grad_norm": gn,
                     "weights": " ".join(f"{x:.4f}" for x in w)})
    return rows
