import json
import os

import numpy as np
import pytest

from kvlatent.cli import ConfigError, load_config, main
from kvlatent.data import read_dataset


def write_config(tmp_path, payload):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    return str(path)


TINY = {
    "label": "clitest",
    "seed": 0,
    "model": {"layers": 2, "heads": 2, "kv_groups": 2, "head_dim": 8, "mlp_mult": 2, "max_seq_len": 128},
    "data": {"steps": 2, "train_n": 12, "val_n": 6, "test_n": 6, "max_len": 96},
    "train": {
        "m_latent": 3,
        "jacobi_iters": 1,
        "batch_size": 4,
        "epochs": 1,
        "max_steps": 2,
        "eval_every": 0,
        "eval_n": 4,
    },
}


def test_load_config_applies_overrides(tmp_path):
    cfg_path = write_config(tmp_path, TINY)
    train_cfg, data_cfg, model_cfg = load_config(cfg_path, ["alpha2=0", "lambda=0.5", "steps=3"])
    assert train_cfg.alpha2 == 0
    assert train_cfg.eviction_lambda == 0.5
    assert data_cfg.steps == 3
    assert model_cfg.layers == 2


def test_load_config_rejects_unknown_key(tmp_path):
    cfg_path = write_config(tmp_path, {**TINY, "train": {**TINY["train"], "bogus": 1}})
    with pytest.raises(ConfigError, match="bogus"):
        load_config(cfg_path, [])
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(write_config(tmp_path, TINY), ["nonsense=1"])


def test_load_config_rejects_invalid_values(tmp_path):
    cfg_path = write_config(tmp_path, TINY)
    with pytest.raises(ConfigError):
        load_config(cfg_path, ["eviction=none"])  # alpha2 stays 1.0 -> invalid


def test_dotted_override_and_seed(tmp_path):
    cfg_path = write_config(tmp_path, TINY)
    train_cfg, _, model_cfg = load_config(cfg_path, ["train.alpha1=3", "model.layers=3"], seed=9)
    assert train_cfg.alpha1 == 3
    assert model_cfg.layers == 3
    assert train_cfg.seed == 9


def test_gen_data_command(tmp_path):
    cfg_path = write_config(tmp_path, TINY)
    out = str(tmp_path / "data.jsonl")
    assert main(["gen-data", "--config", cfg_path, "--split", "val", "--out", out]) == 0
    examples = read_dataset(out)
    assert len(examples) == 6


def test_malformed_config_exit_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["kind"] == "config"


def test_runtime_failure_exit_code_1(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "missing.kvl")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert "missing.kvl" in err["error"]


def test_train_eval_decode_kvsim_report_pipeline(tmp_path, capsys):
    cfg_path = write_config(tmp_path, TINY)
    run_dir = str(tmp_path / "runs" / "clitest_s0")
    assert main(["train", "--config", cfg_path, "--out", run_dir]) == 0
    assert os.path.exists(os.path.join(run_dir, "config.json"))
    assert os.path.exists(os.path.join(run_dir, "metrics.csv"))

    ckpt = os.path.join(run_dir, "checkpoint_final.kvl")
    eval_out = str(tmp_path / "eval.json")
    assert main(["eval", "--checkpoint", ckpt, "--mode", "no-cot", "--split", "test", "--out", eval_out]) == 0
    summary = json.load(open(eval_out))
    assert summary["mode"] == "no-cot"
    assert 0.0 <= summary["accuracy"] <= 1.0

    grid_out = str(tmp_path / "grid.json")
    assert main(["decode-latent", "--checkpoint", ckpt, "--prompt", "3*4+5", "--k", "2", "--out", grid_out]) == 0
    grid = json.load(open(grid_out))
    assert len(grid["positions"]) == 3  # m_latent from the checkpoint config

    sim_out = str(tmp_path / "sim")
    assert main(["kv-sim", "--checkpoint", ckpt, "--target", "evicted", "--kind", "keys", "--out", sim_out]) == 0
    files = os.listdir(sim_out)
    assert any(f.endswith("_avg.csv") for f in files)

    report_out = str(tmp_path / "report")
    assert main(["report", "--runs", str(tmp_path / "runs"), "--out", report_out]) == 0
    manifest = json.load(open(os.path.join(report_out, "manifest.json")))
    assert manifest["runs"] == ["clitest_s0"]


def test_resolved_snapshot_reproduces_metrics(tmp_path):
    cfg_path = write_config(tmp_path, {**TINY, "model": {**TINY["model"], "precision": "f64"}})
    run_a = str(tmp_path / "a")
    assert main(["train", "--config", cfg_path, "--out", run_a]) == 0
    # re-run from the snapshot the first run wrote
    snapshot = json.load(open(os.path.join(run_a, "config.json")))
    snap_path = tmp_path / "snap.json"
    snap_path.write_text(
        json.dumps(
            {
                "label": snapshot["label"],
                "seed": snapshot["seed"],
                "model": snapshot["model"],
                "data": snapshot["data"],
                "train": snapshot["train"],
            }
        )
    )
    run_b = str(tmp_path / "b")
    assert main(["train", "--config", str(snap_path), "--out", run_b]) == 0
    a = open(os.path.join(run_a, "metrics.csv")).read()
    b = open(os.path.join(run_b, "metrics.csv")).read()
    assert a == b


def test_out_root_env_override(tmp_path, monkeypatch):
    cfg_path = write_config(tmp_path, {**TINY, "train": {**TINY["train"], "max_steps": 1}})
    root = str(tmp_path / "envroot")
    monkeypatch.setenv("KVLATENT_OUT_ROOT", root)
    assert main(["train", "--config", cfg_path]) == 0
    assert os.path.isdir(os.path.join(root, "clitest_s0"))


def test_sweep_lambda_grid(tmp_path):
    cfg_path = write_config(tmp_path, {**TINY, "train": {**TINY["train"], "max_steps": 1}})
    root = str(tmp_path / "sweep")
    assert main(["sweep", "--config", cfg_path, "--grid", "lambda=0,0.1,1", "--out", root]) == 0
    subdirs = [d for d in os.listdir(root) if d.startswith("clitest_")]
    assert len(subdirs) == 3
    assert os.path.exists(os.path.join(root, "report", "accuracy_table.csv"))
