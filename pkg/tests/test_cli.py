import csv
import json
from pathlib import Path

import pytest

from paramalign import checkpoint
from paramalign.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TINY = str(CONFIGS / "tiny.yaml")


def subset(state, prefix):
    return checkpoint.dumps({k: v for k, v in state.items() if k.startswith(prefix)})


def test_flops_csv(tmp_path):
    out = tmp_path / "f.csv"
    assert main(["flops", "--L", "32", "256", "576", "2890", "8737", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5
    assert len({r["flops_vlora_train"] for r in rows}) == 1
    assert len({r["flops_vlora_infer"] for r in rows}) == 1
    assert abs(float(rows[2]["ratio_train"]) - 0.0835) < 5e-4


def test_flops_default_L_to_stdout(capsys):
    assert main(["flops"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("L,C,flops_baseline")
    assert len(lines) == 6


def test_flops_table1(capsys):
    assert main(["flops", "--table1"]) == 0
    out = capsys.readouterr().out
    for printed in ("827", "3754", "8027", "619"):
        assert printed in out
    assert "8027.8" in out and "620.6" in out


def test_flops_empty_L_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["flops", "--L"])
    assert e.value.code == 2


def test_flops_unwritable_path(tmp_path, capsys):
    assert main(["flops", "--out", str(tmp_path / "missing" / "f.csv")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 5 and "[FAIL]" not in out


def test_verify_fault_fails(capsys):
    assert main(["verify", "--fault", "flip_ws"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] zero-init identity" in out


def test_verify_float64_tightens_gradcheck(capsys):
    assert main(["verify", "--float64"]) == 0
    assert "tol 1e-06" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("llm:\n  hidden: 4\n")
    assert main(["flops", "--config", str(p)]) == 2
    assert main(["flops", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_invalid_stage_and_kinds():
    for argv in (["--stage", "sft"], ["--ablate-kinds", "qv"], ["--rank", "0"]):
        with pytest.raises(SystemExit) as e:
            main(["train", "--config", TINY, "--out", "x"] + argv)
        assert e.value.code == 2


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", TINY, "--out", str(out), "--seed", "3"]) == 0
    for name in ("config.yaml", "init.ckpt", "model.ckpt", "metrics.jsonl", "summary.json"):
        assert (out / name).exists(), name
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 20
    init, final = checkpoint.load(out / "init.ckpt"), checkpoint.load(out / "model.ckpt")
    assert subset(init, "llm.") == subset(final, "llm.")
    assert subset(init, "vision.") == subset(final, "vision.")
    assert subset(init, "pwg.") != subset(final, "pwg.")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.ckpt")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"ppl", "ppl_shuffled_images", "ppl_zero_deltas"} <= set(report)


def test_finetune_changes_llm_not_vision(tmp_path):
    out = tmp_path / "ft"
    assert main(["train", "--config", TINY, "--out", str(out), "--stage", "finetune", "--steps", "3"]) == 0
    init, final = checkpoint.load(out / "init.ckpt"), checkpoint.load(out / "model.ckpt")
    assert subset(init, "llm.") != subset(final, "llm.")
    assert subset(init, "vision.") == subset(final, "vision.")


def test_blind_run_eval(tmp_path, capsys):
    out = tmp_path / "blind"
    assert main(["train", "--config", TINY, "--out", str(out), "--blind", "--steps", "3"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.ckpt")]) == 0
    assert "ppl_blind_trained" in json.loads(capsys.readouterr().out)


def test_ablate_kinds_qk(tmp_path):
    out = tmp_path / "qk"
    assert main(["train", "--config", TINY, "--out", str(out), "--ablate-kinds", "qk", "--steps", "2"]) == 0
    names = checkpoint.load(out / "model.ckpt")
    kinds = {n.split(".")[1] for n in names if n.startswith("pwg.")}
    assert kinds == {"q", "k"}


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("VLORA_SEED", "11")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", TINY, "--out", str(a), "--steps", "2"]) == 0
    monkeypatch.delenv("VLORA_SEED")
    assert main(["train", "--config", TINY, "--out", str(b), "--steps", "2", "--seed", "11"]) == 0
    assert (a / "init.ckpt").read_bytes() == (b / "init.ckpt").read_bytes()
    assert json.loads((a / "summary.json").read_text())["seed"] == 11


def test_bad_seed_env(monkeypatch, tmp_path):
    monkeypatch.setenv("VLORA_SEED", "abc")
    assert main(["train", "--config", TINY, "--out", str(tmp_path / "x"), "--steps", "1"]) == 2


def test_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--config", TINY]) == 2


def test_deterministic_runs(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", TINY, "--out", str(tmp_path / name), "--steps", "4"]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()
