import json

import pytest

from sparsemask.cli import main
from sparsemask.pruner import import_architecture
from sparsemask.searchspace import import_gate_csv

TINY = {
    "task": {"kind": "multi_class_shapes", "image_size": 16, "num_classes": 3, "num_train": 16, "num_val": 8},
    "encoder": {"name": "tiny", "stages": [{"channels": 4, "stride": 2}, {"channels": 6, "stride": 4},
                                           {"channels": 8, "stride": 8}]},
    "decoder_channels": 4,
    "search": {"epochs": 2, "batch": 4, "sigma": 0.001},
    "train": {"epochs": 2, "batch": 4},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_search_writes_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "s"
    assert run("search", "--config", cfg_path, "--out", out) == 0
    digest = json.loads((out / "config.json").read_text())["config_digest"]
    assert (out / "gates.csv").read_text().startswith(f"# config_digest={digest}\n")
    assert (out / "metrics.csv").read_text().startswith(f"# config_digest={digest}\n")
    arch = import_architecture(out / "architecture.json")
    assert arch.meta["config_digest"] == digest
    assert len(import_gate_csv(out / "gates.csv")) == 12
    assert "kept" in capsys.readouterr().out


def test_search_is_deterministic(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert run("search", "--config", cfg_path, "--out", tmp_path / name, "--seed", 7) == 0
    for f in ("gates.csv", "architecture.json", "metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_changes_digest(cfg_path, tmp_path):
    run("search", "--config", cfg_path, "--out", tmp_path / "a", "--seed", 1)
    run("search", "--config", cfg_path, "--out", tmp_path / "b", "--seed", 2)
    da = json.loads((tmp_path / "a" / "config.json").read_text())["config_digest"]
    db = json.loads((tmp_path / "b" / "config.json").read_text())["config_digest"]
    assert da != db


def test_prune_train_eval_transfer(cfg_path, tmp_path, capsys):
    s = tmp_path / "s"
    assert run("search", "--config", cfg_path, "--out", s) == 0
    assert run("prune", "--config", cfg_path, "--gates", s / "gates.csv", "--sigma", 0.3, "--out", tmp_path / "p") == 0
    assert import_architecture(tmp_path / "p" / "architecture.json").meta["sigma"] == 0.3
    t = tmp_path / "t"
    assert run("train", "--config", cfg_path, "--arch", s / "architecture.json", "--out", t) == 0
    assert (t / "checkpoint.npz").exists()
    capsys.readouterr()
    assert run("eval", "--config", cfg_path, "--checkpoint", t / "checkpoint.npz") == 0
    scores = json.loads(capsys.readouterr().out)
    assert 0.0 <= scores["miou"] <= 1.0 and "config_digest" in scores
    target = tmp_path / "target.json"
    target.write_text(json.dumps({"name": "two", "stages": [{"channels": 5, "stride": 2},
                                                            {"channels": 7, "stride": 4}]}))
    assert run("transfer", "--config", cfg_path, "--arch", s / "architecture.json", "--target", target,
               "--out", tmp_path / "x") == 0
    out = capsys.readouterr().out
    assert "DROPPED" in out
    assert import_architecture(tmp_path / "x" / "architecture.json").encoder_spec.num_stages == 2


def test_train_without_arch_uses_full_fdn(cfg_path, tmp_path):
    assert run("train", "--config", cfg_path, "--out", tmp_path / "t", "--epochs", 1) == 0


def test_unmatchable_transfer_fails(cfg_path, tmp_path, capsys):
    s = tmp_path / "s"
    run("search", "--config", cfg_path, "--out", s)
    target = tmp_path / "target.json"
    target.write_text(json.dumps({"stages": [{"channels": 5, "stride": 64}, {"channels": 7, "stride": 128}]}))
    assert run("transfer", "--config", cfg_path, "--arch", s / "architecture.json", "--target", target) != 0
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"search": {"epochs": 1, "lamda": 0.1}}))
    assert run("search", "--config", p, "--out", tmp_path) == 2
    assert "lamda" in capsys.readouterr().err
    p.write_text("{")
    assert run("search", "--config", p, "--out", tmp_path) == 2


def test_corrupt_architecture_rejected(cfg_path, tmp_path, capsys):
    p = tmp_path / "arch.json"
    p.write_text(json.dumps({"encoder": {}, "stages": []}))
    assert run("train", "--config", cfg_path, "--arch", p, "--out", tmp_path) == 2
    assert "$." in capsys.readouterr().err


def test_thread_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSEMASK_THREADS", "2")
    assert run("search", "--config", cfg_path, "--out", tmp_path / "a") == 0
    monkeypatch.setenv("SPARSEMASK_THREADS", "1")
    assert run("search", "--config", cfg_path, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "gates.csv").read_bytes() == (tmp_path / "b" / "gates.csv").read_bytes()
    monkeypatch.setenv("SPARSEMASK_THREADS", "zero")
    assert run("verify") == 2


def test_verify_passes(capsys):
    assert run("verify") == 0
    out = capsys.readouterr().out
    rows = [ln for ln in out.splitlines() if ln.rstrip().endswith(("PASS", "FAIL"))]
    assert len(rows) >= 12 and all(r.endswith("PASS") for r in rows)
