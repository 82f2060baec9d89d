from __future__ import annotations

import csv
import io
import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lt2 import cli
from lt2.cli import RunConfig
from lt2.errors import ConfigError
from lt2.mixers import MixerKind


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def write_cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


TINY = {"model": {"block": {"n_layers": 2, "d_model": 8, "n_heads": 2, "mixers": ["full", "window"],
                            "vocab_size": 30, "window": 3},
                  "schedule": {"T": 3}}}


configs = st.builds(
    lambda n, heads, mix, T, seed, lr, act: {
        "model": {"block": {"n_layers": n, "d_model": 4 * heads, "n_heads": heads,
                            "mixers": [mix] * n, "vocab_size": 30},
                  "schedule": {"T": T}, "act": act},
        "optim": {"peak_lr": lr}, "seed": seed},
    st.integers(1, 4), st.integers(1, 4), st.sampled_from([k.value for k in MixerKind]),
    st.integers(1, 6), st.integers(0, 2**31), st.floats(1e-6, 1.0), st.booleans())


@given(configs)
def test_config_round_trip(data):
    c = RunConfig.from_dict(data)
    assert RunConfig.from_dict(json.loads(c.dumps())) == c
    assert json.loads(RunConfig.from_dict(json.loads(c.dumps())).dumps()) == json.loads(c.dumps())


def test_config_errors_carry_field_path(tmp_path):
    with pytest.raises(ConfigError, match="model.block.mixers"):
        RunConfig.from_dict({"model": {"block": {"n_layers": 3, "mixers": ["gdn"]}}})
    with pytest.raises(ConfigError, match="optim.batch_size"):
        RunConfig.from_dict({"optim": {"batch_size": "32"}})
    with pytest.raises(ConfigError, match="task.colour"):
        RunConfig.from_dict({"task": {"colour": 1}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_invalid_config_exits_2(tmp_path, capsys):
    p = write_cfg(tmp_path, {"model": {"block": {"n_layers": 2, "mixers": ["gdn", "lstm"]}}})
    code, _, err = run(["train", "--config", p, "--steps", "0"], capsys)
    assert code == 2 and "model.block.mixers[1]" in err


def test_verify_clean_and_faulty(capsys):
    code, out, _ = run(["verify"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["ok"] and all(s["passed"] > 0 for s in rep["suites"])
    code, out, _ = run(["verify", "--inject-fault", "gdn"], capsys)
    rep = json.loads(out)
    assert code == 1 and rep["failed_suites"] == ["scan_oracle"]


def test_cost_rows_and_linearity(capsys):
    _, out, _ = run(["cost", "--kinds", "full,gdn,window", "--L", "1024,2048,4096", "--T", "2"], capsys)
    r2 = rows(out)
    assert len(r2) == 9
    _, out, _ = run(["cost", "--kinds", "full,gdn,window", "--L", "1024,2048,4096", "--T", "4"], capsys)
    r4 = rows(out)
    for a, b in zip(r2, r4):
        assert int(b["total_flops"]) == 2 * int(a["total_flops"])
        assert int(b["total_cache"]) == 2 * int(a["total_cache"])
    full = next(r for r in r4 if r["kind"] == "full" and r["L"] == "4096")
    lin = next(r for r in r4 if r["kind"] == "gdn" and r["L"] == "4096")
    assert int(full["train_flops_per_layer"]) * 128 * 128 == int(lin["train_flops_per_layer"]) * 4096 * 2048


def test_cost_json_format(capsys):
    _, out, _ = run(["cost", "--format", "json", "--kinds", "la", "--L", "8"], capsys)
    assert json.loads(out)[0]["kind"] == "la"


def test_analyze_rf_matches_closed_form(capsys):
    _, out, _ = run(["analyze-rf", "--w", "2", "--T-max", "8", "--L", "32"], capsys)
    r = rows(out)
    assert len(r) == 8 * 32
    for x in r:
        assert int(x["size"]) == min(int(x["i"]), int(x["T"]) * (2 - 1) + 1) == int(x["closed_form"])


def test_gen_tasks_jsonl(tmp_path, capsys):
    code, out, _ = run(["gen-tasks", "--m", "8", "--n", "4", "--count", "3", "--out", str(tmp_path)], capsys)
    lines = (tmp_path / "tasks.jsonl").read_text().splitlines()
    assert code == 0 and len(lines) == 3 and json.loads(lines[0])["n"] == 4


def test_train_zero_steps(tmp_path, capsys):
    code, _, _ = run(["train", "--config", write_cfg(tmp_path, TINY), "--steps", "0", "--out", str(tmp_path / "o")],
                     capsys)
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert code == 0 and rep["curves"] == [] and rep["steps_run"] == 0
    assert (tmp_path / "o" / "curves.csv").read_text().strip() == "step,loss,grad_norm,lr,stage"


def test_train_few_steps_with_checkpoint(tmp_path, capsys):
    data = dict(TINY, optim={"batch_size": 2, "eval_every": 2, "eval_size": 4, "warmup_steps": 1})
    code, _, _ = run(["train", "--config", write_cfg(tmp_path, data), "--steps", "2", "--checkpoint",
                      "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    assert (tmp_path / "o" / "model.bin").exists() and (tmp_path / "o" / "model.json").exists()
    assert len(rows((tmp_path / "o" / "curves.csv").read_text())) == 2


def test_diagnose_rows_per_head(tmp_path, capsys):
    _, out, _ = run(["diagnose", "--config", write_cfg(tmp_path, dict(TINY, diagnostics={"seq_len": 10}))], capsys)
    r = rows(out)
    per_head = Counter(x["head"] for x in r)
    assert per_head == {"0": 6, "1": 6, "mean": 6}  # T=3, N=2
    assert [(x["loop"], x["layer"]) for x in r if x["head"] == "0"] == [
        (str(t), str(n)) for t in (1, 2, 3) for n in (1, 2)]


def test_diagnose_is_deterministic(tmp_path, capsys):
    p = write_cfg(tmp_path, TINY)
    _, a, _ = run(["diagnose", "--config", p, "--seed", "7"], capsys)
    _, b, _ = run(["diagnose", "--config", p, "--seed", "7"], capsys)
    assert a == b


def test_kd_demo(tmp_path, capsys):
    code, out, _ = run(["kd-demo", "--config", write_cfg(tmp_path, TINY), "--steps", "3"], capsys)
    assert code == 0 and len(rows(out)) == 3


def test_outputs_stay_under_out_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run(["cost", "--kinds", "gdn", "--L", "8", "--out", "o"], capsys)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o"]


@pytest.mark.parametrize("name", ["state_recall_t4", "state_recall_t1", "hybrid_small"])
def test_shipped_configs_load(name):
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.json"
    cfg = RunConfig.load(path)
    assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg
