import json

import pytest

from hintlm.cli import EXIT_DATA, EXIT_MODEL, EXIT_OK, EXIT_REWRITER, EXIT_USAGE, main

SMALL = ["--d-llm", "16", "--llm-layers", "1", "--epochs", "2", "--batch-queries", "2"]


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--n-queries", "10", "--seed", "3"]) == EXIT_OK
    assert main(["split", "--workload", str(d / "workload.jsonl"), "--out", str(d / "split.json"),
                 "--test-fraction", "0.3"]) == EXIT_OK
    return d


def test_missing_dsn_is_usage_error(monkeypatch, tmp_path, capsys):
    monkeypatch.delenv("HINTLM_DSN", raising=False)
    assert main(["collect", "--queries", str(tmp_path / "q.jsonl"), "--store", str(tmp_path / "s")]) == EXIT_USAGE
    assert "--dsn" in capsys.readouterr().err
    assert main(["no-such-command"]) == EXIT_USAGE


def test_offline_rewrite_without_cache(bundle, tmp_path):
    assert main(["rewrite", "--workload", str(bundle / "workload.jsonl"), "--cache", str(tmp_path / "c.jsonl"),
                 "--offline"]) == EXIT_REWRITER


def test_data_errors(bundle, tmp_path):
    assert main(["train", "--workload", str(tmp_path / "missing.jsonl"), "--stats", str(bundle / "stats.json"),
                 "--checkpoint", str(tmp_path / "m.pt")]) == EXIT_DATA
    empty = tmp_path / "split.json"
    empty.write_text(json.dumps({"format": "hintlm-split", "version": 1, "kind": "query", "assignments": {}}))
    assert main(["train", "--workload", str(bundle / "workload.jsonl"), "--stats", str(bundle / "stats.json"),
                 "--split", str(empty), "--checkpoint", str(tmp_path / "m.pt")] + SMALL) == EXIT_DATA


def test_bad_checkpoint_is_model_error(bundle, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["recommend", "--workload", str(bundle / "workload.jsonl"), "--stats", str(bundle / "stats.json"),
                 "--checkpoint", str(bad)]) == EXIT_MODEL


def test_train_recommend_evaluate(bundle, tmp_path):
    w, s, sp = str(bundle / "workload.jsonl"), str(bundle / "stats.json"), str(bundle / "split.json")
    ckpt, rep = str(tmp_path / "m.pt"), tmp_path / "train.json"
    assert main(["train", "--workload", w, "--stats", s, "--split", sp, "--checkpoint", ckpt,
                 "--report", str(rep)] + SMALL) == EXIT_OK
    report = json.loads(rep.read_text())
    assert report["stop_reason"] == "max_epochs" and len(report["loss_history"]) == 2

    sel = tmp_path / "sel.jsonl"
    assert main(["recommend", "--workload", w, "--stats", s, "--split", sp, "--part", "test",
                 "--checkpoint", ckpt, "--out", str(sel)]) == EXIT_OK
    rows = [json.loads(x) for x in sel.read_text().splitlines()]
    assert len(rows) == 3
    assert all(sum(r["scores"].values()) == 4 * 16 * 15 for r in rows)

    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--workload", w, "--selections", str(sel), "--report", str(ev),
                 "--table", str(tmp_path / "t.txt")]) == EXIT_OK
    doc = json.loads(ev.read_text())
    assert len(doc["queries"]) == 3
    assert doc["oracle_su"] >= doc["su"] - 1e-12
    assert doc["oracle_gmrl"] <= doc["gmrl"] + 1e-12
    assert "oracle" in (tmp_path / "t.txt").read_text()

    emb = tmp_path / "emb.jsonl"
    assert main(["dump-embeddings", "--workload", w, "--stats", s, "--checkpoint", ckpt, "--out", str(emb),
                 "--limit", "2"]) == EXIT_OK
    assert len(emb.read_text().splitlines()) == 2 * 16


def test_config_file_sets_defaults(bundle, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "d-llm": 16, "llm-layers": 1}}))
    rep = tmp_path / "r.json"
    assert main(["--config", str(cfg), "train", "--workload", str(bundle / "workload.jsonl"),
                 "--stats", str(bundle / "stats.json"), "--checkpoint", str(tmp_path / "m.pt"),
                 "--report", str(rep)]) == EXIT_OK
    assert len(json.loads(rep.read_text())["loss_history"]) == 1


def test_resume_continues_training(bundle, tmp_path):
    w, s = str(bundle / "workload.jsonl"), str(bundle / "stats.json")
    ckpt, rep = str(tmp_path / "m.pt"), tmp_path / "r.json"
    base = ["train", "--workload", w, "--stats", s, "--checkpoint", ckpt, "--report", str(rep),
            "--d-llm", "16", "--llm-layers", "1", "--keep-partial"]
    assert main(base + ["--epochs", "1"]) == EXIT_OK
    assert main(base + ["--epochs", "3", "--resume"]) == EXIT_OK
    resumed = json.loads(rep.read_text())["loss_history"]
    assert main(base + ["--epochs", "3"]) == EXIT_OK
    assert json.loads(rep.read_text())["loss_history"] == resumed
    assert [h["epoch"] for h in resumed] == [0, 1, 2]
