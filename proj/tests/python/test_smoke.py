"""Smoke tests for the python module and the CLI binary."""

import json
import os
import subprocess

import pytest

import specdesk


def test_metrics_match_closed_forms():
    assert specdesk.acceptance_rate(3, 1) == pytest.approx(0.75)
    assert specdesk.block_efficiency(0.5, 3) == pytest.approx(1.875)
    assert specdesk.block_efficiency(1.0, 4) == pytest.approx(5.0)
    assert specdesk.block_efficiency(0.7, 5) == pytest.approx(
        specdesk.block_efficiency_series(0.7, 5), abs=1e-12
    )
    assert specdesk.speedup(5.0, 4, 0.25) == pytest.approx(2.5)
    sim = specdesk.simulate_block_efficiency(0.5, 3, 200_000, seed=1)
    assert sim == pytest.approx(1.875, abs=0.02)


def test_tokenizer_round_trip():
    tok = specdesk.Tokenizer.char_default()
    text = "12+7=19; the answer is 19"
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert tok.vocab_size > 2
    assert tok.eos_id != tok.pad_id


def make_config(vocab, layers=1, d=16, heads=2, context=24):
    cfg = specdesk.LMConfig()
    cfg.vocab_size = vocab
    cfg.context_len = context
    cfg.n_layers = layers
    cfg.d_model = d
    cfg.n_heads = heads
    cfg.d_ff = d * 2
    return cfg


def test_model_roundtrip_and_forward_shape(tmp_path):
    cfg = make_config(20)
    model = specdesk.init_model(cfg, seed=5)
    shape, data = model.forward([2, 3, 4])
    assert shape == [3, 20]
    assert len(data) == 60
    path = str(tmp_path / "m.ckpt")
    model.save(path)
    loaded = specdesk.load_model(path)
    shape2, data2 = loaded.forward([2, 3, 4])
    assert shape2 == shape
    assert data2 == data


def test_speculative_matches_greedy():
    target = specdesk.init_model(make_config(18, layers=2, d=24), seed=7)
    draft = specdesk.init_model(make_config(18), seed=8)
    prompt = [2, 5, 9]
    res = specdesk.speculative_generate(target, draft, prompt, gamma=3, max_new_tokens=12, eos=1)
    greedy = specdesk.generate_greedy(target, prompt, max_new_tokens=13, eos=1)
    n = min(len(res["tokens"]), len(greedy))
    assert res["tokens"][:n] == greedy[:n]
    assert res["accept"] + res["reject"] > 0
    assert sum(res["per_block_accepted"]) == res["accept"]


def micro_config(out_dir):
    cfg = json.loads(specdesk.default_config_json())
    cfg["task"].update({"n_train": 32, "n_val": 4, "n_test": 8, "steps": 2})
    cfg["target_model"].update({"context_len": 64, "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64})
    cfg["draft_model"].update({"context_len": 64, "n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32})
    for stage in ("target_train", "reference_train", "draft_train"):
        cfg[stage].update({"batch_size": 8, "epochs": 1, "lr": 1e-3})
    cfg["draft_train"].update({"filter_mode": "top", "filter_k": 0.4})
    cfg["sd"].update({"gamma": 3, "max_new_tokens": 16})
    cfg["eval_size"] = 4
    cfg["seeds"] = [1]
    cfg["out_dir"] = out_dir
    return cfg


def test_pipeline_runs_end_to_end(tmp_path):
    cfg = micro_config(str(tmp_path / "out"))
    record = json.loads(specdesk.run_pipeline(json.dumps(cfg), seed=1))
    assert 0.0 <= record["eval"]["alpha"] <= 1.0
    assert record["method"] == "selective"
    baseline = json.loads(specdesk.run_baseline(json.dumps(cfg), seed=1))
    assert baseline["target_stage"]["checkpoint"] == record["target_stage"]["checkpoint"]


@pytest.fixture
def cli():
    path = os.environ.get("SPECDESK_CLI")
    if not path or not os.path.exists(path):
        pytest.skip("SPECDESK_CLI not set")
    return path


def test_cli_help_and_errors(cli, tmp_path):
    ok = subprocess.run([cli, "--help"], capture_output=True, text=True)
    assert ok.returncode == 0
    assert "gen-data" in ok.stdout

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"not_a_key": 1}))
    bad = subprocess.run([cli, "finetune-target", "-c", str(bad_cfg)], capture_output=True, text=True)
    assert bad.returncode != 0
    assert "[finetune-target] error:" in bad.stderr


def test_cli_gen_data(cli, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = micro_config(str(tmp_path / "out"))
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "data.jsonl"
    run = subprocess.run(
        [cli, "gen-data", "-c", str(cfg_path), "--dataset-out", str(out), "--split", "train"],
        capture_output=True,
        text=True,
    )
    assert run.returncode == 0, run.stderr
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 32
    first = json.loads(lines[0])
    assert "prompt" in first and "completion" in first


def test_cli_respects_out_env(cli, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = micro_config(str(tmp_path / "ignored"))
    cfg_path.write_text(json.dumps(cfg))
    env = dict(os.environ, SPECDESK_OUT=str(tmp_path / "envout"))
    run = subprocess.run(
        [cli, "finetune-target", "-c", str(cfg_path), "--seed", "1"],
        capture_output=True,
        text=True,
        env=env,
    )
    assert run.returncode == 0, run.stderr
    assert (tmp_path / "envout" / "cache").exists()
