from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from harenctc import cli
from harenctc import numkernel as nk


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--subjects", "4x4", "--frames", "32", "--segments", "2", "--dim", "16", "--out", out) == 0
    return out / "manifest.jsonl"


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_counts_and_determinism(tmp_path, capsys):
    assert run("synth", "--subjects", "8x8", "--frames", "200", "--out", tmp_path / "a") == 0
    assert str(tmp_path / "a" / "manifest.jsonl") in capsys.readouterr().out
    lines = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len({json.loads(l)["subject_id"] for l in lines}) == 16
    assert run("synth", "--subjects", "8x8", "--frames", "200", "--out", tmp_path / "b") == 0
    for name in ("manifest.jsonl", "markers.json", "features/D003_01.hrnf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_zero_density(tmp_path, capsys):
    assert run("synth", "--density", "0", "--out", tmp_path) == 1
    assert "density" in capsys.readouterr().err


def test_bad_subjects_flag():
    with pytest.raises(SystemExit):
        run("synth", "--subjects", "eight")


def test_gen_labels_cache_and_codebook(corpus, tmp_path):
    assert run("gen-labels", "--manifest", corpus, "--k", "10", "--out", tmp_path / "a") == 0
    cache = json.loads((tmp_path / "a" / "targets.json").read_text())
    assert cache["vocab_size"] == 21 and cache["k"] == 10
    assert cache["fit_population"] == "train"
    entry = cache["segments"][0]
    assert len(entry["raw_tokens"]) == entry["input_length"] == 32
    lo, hi = (1, 10) if entry["label"] == 0 else (11, 20)
    assert all(lo <= t <= hi for t in entry["tokens"])
    assert run("gen-labels", "--manifest", corpus, "--k", "10", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "codebook.bin").read_bytes() == (tmp_path / "b" / "codebook.bin").read_bytes()


def test_gen_labels_rejects_k_above_frames(corpus, tmp_path, capsys):
    assert run("gen-labels", "--manifest", corpus, "--k", "100000", "--out", tmp_path) == 1
    assert "k=100000" in capsys.readouterr().err


def test_crossval_outputs_and_config_echo(corpus, tmp_path):
    out = tmp_path / "cv"
    assert run("crossval", "--manifest", corpus, "--folds", "2", "--epochs", "2", "--out", out) == 0
    for name in ("report.txt", "summary.json", "confusion.csv", "roc.csv", "history.csv", "config.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenario"] == "generalization"
    assert len(summary["report"]["per_fold"]) == 2
    assert set(summary["report"]["mean"]) == {"macro_f1", "macro_recall", "macro_precision"}
    assert _read_csv(out / "confusion.csv")[0] == ["true", "pred_0", "pred_1"]
    assert len(_read_csv(out / "history.csv")) == 1 + 2 * 2
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["train"]["folds"] == 2 and echoed["model"]["dim"] == 16
    # the echoed config replays the run
    assert run("crossval", "--config", out / "config.json", "--out", tmp_path / "replay") == 0
    assert (tmp_path / "replay" / "summary.json").read_bytes() == (out / "summary.json").read_bytes()


def test_ablation_flags(corpus, tmp_path):
    assert run("crossval", "--manifest", corpus, "--folds", "2", "--epochs", "1", "--ablation", "no-ctc", "--out", tmp_path / "a") == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert all(v is None for h in summary["history"] for v in h["epoch_ctc"])
    assert run("crossval", "--manifest", corpus, "--folds", "2", "--epochs", "5", "--ablation", "no-haren", "--out", tmp_path / "b") == 0
    echoed = json.loads((tmp_path / "b" / "config.json").read_text())
    assert echoed["model"]["architecture"] == "single-layer"
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert any(v is not None for h in summary["history"] for v in h["epoch_ctc"])


def test_config_precedence_and_unknown_keys(corpus, tmp_path, monkeypatch, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"manifest": str(corpus), "train": {"epochs": 1, "folds": 3}, "out": str(tmp_path / "file_out")}))
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
    assert run("crossval", "--config", cfg_file, "--folds", "2") == 0
    echoed = json.loads((tmp_path / "env_out" / "config.json").read_text())
    assert echoed["train"] == {**echoed["train"], "epochs": 1, "folds": 2}
    assert run("crossval", "--config", cfg_file, "--out", tmp_path / "flag_out") == 0
    assert json.loads((tmp_path / "flag_out" / "config.json").read_text())["train"]["folds"] == 3
    cfg_file.write_text(json.dumps({"train": {"epoch": 3}}))
    assert run("crossval", "--config", cfg_file) == 1
    assert "train.epoch" in capsys.readouterr().err


def test_train_then_eval(corpus, tmp_path):
    assert run("train", "--manifest", corpus, "--epochs", "2", "--out", tmp_path / "t") == 0
    summary = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert summary["scenario"] == "upper-bound"
    assert summary["report"]["best_epoch"] in (1, 2)
    assert (tmp_path / "t" / "params.npz").exists() and (tmp_path / "t" / "codebook.bin").exists()
    assert run("eval", "--manifest", corpus, "--params", tmp_path / "t" / "params.npz", "--out", tmp_path / "e") == 0
    ev = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert ev["report"]["macro_f1"] == summary["report"]["macro_f1"]


def test_precision_32_run(corpus, tmp_path):
    assert run("crossval", "--manifest", corpus, "--folds", "2", "--epochs", "1", "--precision", "32", "--out", tmp_path) == 0
    assert nk.get_dtype() == np.float64


def test_layer_sweep_rows_and_determinism(corpus, tmp_path):
    for name in ("a", "b"):
        assert run("layer-sweep", "--manifest", corpus, "--folds", "2", "--epochs", "1", "--out", tmp_path / name) == 0
    rows = _read_csv(tmp_path / "a" / "layer_sweep.csv")
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert (tmp_path / "a" / "layer_sweep.csv").read_bytes() == (tmp_path / "b" / "layer_sweep.csv").read_bytes()


def test_analyze_report(corpus, tmp_path):
    assert run("gen-labels", "--manifest", corpus, "--k", "10", "--out", tmp_path / "labels") == 0
    targets = tmp_path / "labels" / "targets.json"
    assert run("analyze", "--targets", targets, "--out", tmp_path / "an") == 0
    rows = _read_csv(tmp_path / "an" / "centroid_usage.csv")
    assert rows[0] == ["id", "diff", "chi2", "p", "flag"] and len(rows) == 11
    cache = json.loads(targets.read_text())
    cache["segments"] = [s for s in cache["segments"] if s["label"] == 0]
    targets.write_text(json.dumps(cache))
    assert run("analyze", "--targets", targets, "--out", tmp_path / "an2") == 1


def test_gradcheck_passes(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "ctc_logits" in out and "w_q" in out and "assign" in out
    rows = _read_csv(tmp_path / "gradcheck.csv")
    assert all(r[3] == "True" for r in rows[1:])


def test_gradcheck_detects_corrupted_adjoint(tmp_path, monkeypatch, capsys):
    def bad_silu(a):
        a = nk.as_tensor(a)
        s = 1.0 / (1.0 + np.exp(-a.data))
        return nk.record(a.data * s, (a,), lambda g: (g * s,), "silu")  # drops the a*s*(1-s) term

    monkeypatch.setattr(nk, "silu", bad_silu)
    assert run("gradcheck", "--out", tmp_path) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "ffn_w1" in out.split("failed for:")[1]
