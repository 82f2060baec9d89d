"""Self-check suites behind ``lt2 verify``; each returns pass/fail counts."""
from __future__ import annotations

import math
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from . import analysis as an
from . import mixers as mx
from . import tensor as tn
from .model import BlockConfig, LoopedModel, LoopSchedule, act_halt, loop_forward
from .patterns import power_slash_pattern, window_pattern
from .scan import BACKEND, kernels, linear_scan
from .trainer import KdConfig, kd_loss, kd_weight_schedule


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)

    def check(self, ok: bool, what: str) -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(what)


def suite_scan_oracle(rng) -> SuiteResult:
    r = SuiteResult("scan_oracle")
    for kind in mx.LINEAR_KINDS:
        for trial in range(3):
            L = int(rng.integers(1, 24))
            H = int(rng.choice([1, 2]))
            dh = int(rng.choice([2, 4]))
            p = mx.init_mixer_params(kind, H * dh, H, rng)
            h = rng.normal(size=(L, H * dh))
            err = float(np.abs(mx.mixer_forward_sequence(kind, p, h).data - mx.unrolled_oracle(kind, p, h)).max())
            r.check(err <= 1e-10, f"{kind.value} L={L} H={H} dh={dh}: max error {err:.3g}")
    return r


def suite_gradients(rng) -> SuiteResult:
    r = SuiteResult("gradcheck")
    q, k, u, v = (tn.Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True) for _ in range(4))
    k.data /= np.linalg.norm(k.data, axis=-1, keepdims=True)
    beta = tn.Tensor(rng.uniform(0, 2, size=(2, 5)), requires_grad=True)
    alpha = tn.Tensor(rng.uniform(0.5, 1, size=(2, 5, 3)), requires_grad=True)
    for backend in {BACKEND, "numpy"}:
        errs = tn.gradcheck(lambda: tn.reduce_sum(linear_scan(q, k, beta, alpha, u, v, backend=backend) ** 2),
                            [q, k, beta, alpha, u, v])
        r.check(max(errs) <= 1e-6, f"scan ({backend}) relative error {max(errs):.3g}")
    cfg = BlockConfig(n_layers=2, d_model=8, n_heads=2, mixers=["gdn", "full"], vocab_size=7)
    m = LoopedModel(cfg, LoopSchedule(2), seed=int(rng.integers(1 << 30)))
    for t in m.parameters():
        t.data += rng.normal(0, 0.05, t.shape)
    ids = rng.integers(0, 7, size=(1, 5))

    def f():
        logits, _ = m(ids)
        return tn.mean(logits * logits)

    errs = tn.gradcheck(f, m.parameters(), max_entries=6, rng=rng)
    r.check(max(errs) <= 1e-4, f"looped model relative error {max(errs):.3g}")
    return r


def suite_receptive_field(rng) -> SuiteResult:
    r = SuiteResult("receptive_field")
    L = 32
    for w in (2, 4):
        masks = an.receptive_field_masks(window_pattern(L, w), 4)
        for T in range(1, 5):
            sizes = masks[T - 1].sum(axis=1)
            want = np.array([an.window_rf_size(i, w, T) for i in range(1, L + 1)])
            r.check(bool((sizes == want).all()), f"window w={w} T={T}")
    masks = an.receptive_field_masks(power_slash_pattern(64, 1), 5)
    reach = [an.contiguous_reach(np.nonzero(m[63])[0] + 1, 64) for m in masks]
    r.check(all(b >= min(63, 2 * a) for a, b in zip(reach, reach[1:])), f"powerslash reach {reach}")
    return r


def suite_householder(rng) -> SuiteResult:
    r = SuiteResult("householder")
    for d in (2, 3, 5):
        for i in range(1, d + 1):
            for j in range(1, d + 1):
                if i != j:
                    P = np.eye(d)
                    P[[i - 1, j - 1]] = P[[j - 1, i - 1]]
                    A = an.effective_transition([an.householder_for_transposition(i, j, d)])
                    r.check(np.abs(A - P).max() <= 1e-12, f"transposition ({i},{j}) d={d}")
    for d in (2, 4, 8, 16):
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        f = an.orthogonal_decompose(Q)
        err = float(np.abs(an.effective_transition(f, d) - Q).max())
        r.check(len(f) <= d and err <= 1e-8, f"decompose d={d}: {len(f)} factors, error {err:.3g}")
    return r


def suite_kd_act(rng) -> SuiteResult:
    r = SuiteResult("kd_act")
    z = [rng.normal(size=(4, 10)) for _ in range(3)]
    cfg = KdConfig(top_k=5)
    r.check(float(kd_loss(z, z, cfg).data) == 0.0, "kd_loss of identical logits")
    s = [rng.normal(size=(4, 10)) for _ in range(3)]
    a = float(kd_loss(z, s, cfg).data)
    b = float(kd_loss([x + 3.0 for x in z], [x - 1.0 for x in s], cfg).data)
    r.check(a >= 0 and abs(a - b) <= 1e-12, f"kd shift invariance {a} vs {b}")
    for step in range(0, 101, 7):
        w = kd_weight_schedule(step, 100, 4)
        r.check(abs(w.sum() - 1.0) <= 1e-12 and (w >= 0).all(), f"kd weights at step {step}")
    r.check(act_halt([0.995], 0.01) == 1, "act halts at 1")
    r.check(act_halt([0.5, 0.5], 0.01) == 2, "act halts at 2")
    r.check(act_halt([0.1] * 4, 0.01, 4) == 4, "act clamps")
    return r


def suite_gate(rng) -> SuiteResult:
    r = SuiteResult("loop_gate")
    cfg = BlockConfig(n_layers=2, d_model=8, n_heads=2, mixers=["gdn", "full"], vocab_size=7)
    m = LoopedModel(cfg, LoopSchedule(3), seed=1)
    ids = rng.integers(0, 7, size=(2, 6))
    with tn.no_grad():
        a, _ = loop_forward(m, ids, gate=True)
        b, _ = loop_forward(m, ids, gate=False)
    r.check(np.array_equal(a.data, b.data), "zero gate is bit-neutral")
    return r


def suite_backends(rng) -> SuiteResult:
    r = SuiteResult("backends")
    if BACKEND != "cython":
        r.check(True, "compiled kernel not built; numpy only")
        return r
    args = [np.ascontiguousarray(rng.normal(size=(3, 9, 4))) for _ in range(2)]
    beta = rng.uniform(0, 2, size=(3, 9))
    alpha = rng.uniform(0, 1, size=(3, 9, 4))
    u, v = rng.normal(size=(3, 9, 4)), rng.normal(size=(3, 9, 5))
    dy = rng.normal(size=(3, 9, 5))
    (fc, bc), (fn, bn) = kernels("cython"), kernels("numpy")
    r.check(np.allclose(fc(*args, beta, alpha, u, v, True), fn(*args, beta, alpha, u, v, True), atol=1e-12), "forward")
    gc = bc(*args, beta, alpha, u, v, dy, True)
    gn = bn(*args, beta, alpha, u, v, dy, True)
    r.check(all(np.allclose(x, y, atol=1e-11) for x, y in zip(gc, gn)), "backward")
    return r


SUITES = (suite_scan_oracle, suite_gradients, suite_receptive_field, suite_householder,
          suite_kd_act, suite_gate, suite_backends)


def run_verify(seed: int = 0, inject_fault: str | None = None) -> dict:
    """Run every suite; a raised exception counts as one failure of that suite."""
    saved = set(mx._FAULTS)
    if inject_fault:
        mx._FAULTS.add(mx.MixerKind.parse(inject_fault))
    results = []
    try:
        for fn in SUITES:
            rng = np.random.default_rng(seed)
            name = fn.__name__.removeprefix("suite_")
            try:
                res = fn(rng)
            except Exception as e:  # reported, not raised
                res = SuiteResult(name, 0, 1, [f"{type(e).__name__}: {e}"])
            results.append(res)
    finally:
        mx._FAULTS.clear()
        mx._FAULTS.update(saved)
    return {"ok": all(s.failed == 0 for s in results), "backend": BACKEND,
            "suites": [asdict(s) for s in results],
            "failed_suites": [s.name for s in results if s.failed]}
