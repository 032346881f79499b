import csv
import json

import numpy as np
import pytest

from depthup import checkpoint as C
from depthup import config as config_io
from depthup import surgery as S
from depthup.cli import main
from depthup.config import ConfigError, ExperimentConfig
from depthup.model import EBRANCHFORMER, Model, ModelConfig

TINY = {
    "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "ffn_hidden": 32, "vocab_text": 32, "cgmlp_hidden": 16, "max_seq_len": 64},
    "data": {
        "text": {"vocab_text": 32, "min_len": 4, "max_len": 8},
        "asr_text": {"vocab_text": 32, "min_len": 2, "max_len": 4},
        "codebook": {"vocab_text": 32, "vocab_speech": 24},
        "n_text_train": 64,
        "n_text_eval": 8,
        "n_asr_train": 64,
        "n_asr_eval": 8,
    },
    "pretrain": {"total_steps": 20, "warmup_steps": 2, "batch_size": 8, "max_context": 64},
    "surgery": {"m": 2, "v_speech": 24},
    "adapt": {"total_steps": 10, "warmup_steps": 2, "batch_size": 8, "max_context": 64, "checkpoint_every": 5, "eval_every": 5},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def pretrained(tmp_path, tiny_config):
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


# --- checkpoint format ------------------------------------------------------------------


def _upscaled(kind=EBRANCHFORMER):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, ffn_hidden=12, vocab_text=11, max_seq_len=16, cgmlp_hidden=8)
    base = Model.init(cfg, seed=0)
    grown, _ = S.expand_vocabulary(base, 5, seed=1)
    return S.upscale(grown, S.compute_placement(2, 2, "interleaved", kind), seed=2)


def test_round_trip_is_byte_identical(tmp_path):
    model, manifest = _upscaled()
    opt = {"step": 3, "m": {n: np.full(model.named_parameters()[n].shape, 0.5, np.float32) for n in manifest.trainable_names()}}
    opt["v"] = {n: a * 2 for n, a in opt["m"].items()}
    raw = C.to_bytes(C.Checkpoint(model, manifest, opt, {"stage": "test", "x": [1, 2]}))
    again = C.from_bytes(raw)
    assert C.to_bytes(again) == raw
    ids = np.array([[1, 12, 14, 3]])
    assert again.model(ids).data.tobytes() == model(ids).data.tobytes()
    assert again.manifest == manifest
    assert again.meta == {"stage": "test", "x": [1, 2]}
    assert again.optimizer["step"] == 3


def test_lora_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, ffn_hidden=12, vocab_text=11, max_seq_len=16, cgmlp_hidden=8)
    model, manifest = S.apply_lora(Model.init(cfg, seed=0), S.LoRAConfig(2, alpha=3.0), seed=1)
    path = tmp_path / "lora.ckpt"
    digest = C.save(path, C.Checkpoint(model, manifest))
    loaded = C.load(path)
    assert loaded.model.layers[0].lora_scale == 1.5
    assert C.save(tmp_path / "again.ckpt", loaded) == digest


def test_digest_detects_any_flipped_byte(tmp_path):
    model, manifest = _upscaled()
    raw = bytearray(C.to_bytes(C.Checkpoint(model, manifest)))
    rng = np.random.default_rng(0)
    for pos in rng.integers(8, len(raw), 25):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(C.CheckpointError):
            C.from_bytes(bytes(bad))
    with pytest.raises(C.CheckpointError, match="not a depthup"):
        C.from_bytes(b"garbage" + bytes(raw))
    with pytest.raises(C.CheckpointError):
        C.from_bytes(bytes(raw[:-5]))


def test_missing_checkpoint_is_checkpoint_error(tmp_path):
    with pytest.raises(C.CheckpointError, match="cannot read"):
        C.load(tmp_path / "nope.ckpt")


# --- config -----------------------------------------------------------------------------


def test_default_config_round_trip():
    cfg = ExperimentConfig()
    assert config_io.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize(
    "raw,path",
    [
        ({"modle": {}}, "modle"),
        ({"model": {"d_modle": 3}}, "model.d_modle"),
        ({"adapt": {"betas": [0.9, 0.95], "lr": 1}}, "adapt.lr"),
        ({"data": {"codebook": {"noise": 2.0}}}, "data.codebook"),
        ({"lora": {"rank": 0}}, "lora.rank"),
        ({"model": {"vocab_speech": 5}}, "model.vocab_speech"),
        ({"model": {"vocab_text": 64}}, "data.text.vocab_text"),
    ],
)
def test_config_errors_name_the_key(raw, path):
    with pytest.raises(ConfigError) as info:
        config_io.from_dict(raw)
    assert info.value.path == path


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config_io.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        config_io.load(bad)


# --- CLI --------------------------------------------------------------------------------


def test_cli_missing_config_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "not found" in capsys.readouterr().err


def test_cli_unknown_key_reports_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"surgery": {"strategy": "interleaved", "mm": 2}}))
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "surgery.mm" in capsys.readouterr().err


def test_cli_config_emits_every_default(tmp_path):
    out = tmp_path / "default.json"
    assert main(["config", "--out", str(out)]) == 0
    raw = json.loads(out.read_text())
    assert raw["adapt"]["betas"] == [0.9, 0.95]
    assert config_io.from_dict(raw) == ExperimentConfig()


def test_cli_pretrain_is_reproducible(tmp_path, tiny_config, pretrained):
    other = tmp_path / "pre2"
    assert main(["pretrain", "--config", str(tiny_config), "--out", str(other)]) == 0
    assert C.digest(pretrained / "base.ckpt") == C.digest(other / "base.ckpt")
    assert (pretrained / "base.ckpt").read_bytes() == (other / "base.ckpt").read_bytes()
    log_lines = (pretrained / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 20 and {"step", "loss", "lr"} <= set(json.loads(log_lines[0]))


def test_cli_upscale_errors(tmp_path, tiny_config, pretrained):
    base = str(pretrained / "base.ckpt")
    assert main(["upscale", "--config", str(tiny_config), "--base", base, "--out", str(tmp_path / "u"), "--m", "5"]) == 2
    assert main(["upscale", "--config", str(tiny_config), "--base", base, "--out", str(tmp_path / "u"), "--strategy", "sandwich", "--m", "1"]) == 2
    assert main(["upscale", "--config", str(tiny_config), "--base", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "u")]) == 4
    assert not (tmp_path / "u").exists()


def test_cli_upscale_counts(tmp_path, tiny_config, pretrained, capsys):
    base = str(pretrained / "base.ckpt")
    counts = {}
    for kind in ("standard", "ebranchformer"):
        out = tmp_path / kind
        assert main(["upscale", "--config", str(tiny_config), "--base", base, "--out", str(out), "--kind", kind]) == 0
        manifest = S.FreezeManifest.from_dict(json.loads((out / "manifest.json").read_text()))
        counts[kind] = S.count_trainable(manifest)
        ckpt = C.load(out / "adapted.ckpt")
        assert len(ckpt.model.layers) == 6
        assert ckpt.meta["preservation_max_abs_diff"] <= 1e-5
    cfg = config_io.from_dict(TINY).model
    assert counts["standard"] == S.depth_trainable_count(cfg, 2, "standard", 24)
    assert counts["ebranchformer"] - counts["standard"] == S.depth_trainable_count(cfg, 2, EBRANCHFORMER) - S.depth_trainable_count(cfg, 2, "standard")
    assert "trainable" in capsys.readouterr().out


def test_cli_adapt_and_compare(tmp_path, tiny_config, pretrained):
    base = str(pretrained / "base.ckpt")
    up = tmp_path / "up"
    assert main(["upscale", "--config", str(tiny_config), "--base", base, "--out", str(up)]) == 0
    runs = {}
    for mode, ckpt in (("depth", up / "adapted.ckpt"), ("full_ft", pretrained / "base.ckpt"), ("lora", pretrained / "base.ckpt")):
        out = tmp_path / mode
        assert main(["adapt", "--config", str(tiny_config), "--checkpoint", str(ckpt), "--mode", mode, "--out", str(out)]) == 0
        runs[mode] = out
        report = json.loads((out / "eval.json").read_text())
        log_records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        hooked = [r for r in log_records if "recovery_exact" in r]
        assert [r["step"] for r in hooked] == [5, 10]
        if mode == "full_ft":
            assert report["recovery_exact"] is False
            assert not any(r["recovery_exact"] for r in hooked)
        else:
            assert report["recovery_exact"] is True
            assert all(r["recovery_exact"] for r in hooked)
            assert report["delta_ppl_dropped"] == 0.0
    depth_n = json.loads((runs["depth"] / "eval.json").read_text())["trainable_count"]
    lora_n = json.loads((runs["lora"] / "eval.json").read_text())["trainable_count"]
    cfg = config_io.from_dict(TINY).model
    rank = S.match_lora_rank(cfg, depth_n, v_new=24)
    assert lora_n == S.lora_trainable_count(cfg, rank, v_new=24)
    assert all(abs(S.lora_trainable_count(cfg, r, v_new=24) - depth_n) >= abs(lora_n - depth_n) for r in range(1, 20))

    # depth mode on a checkpoint without added layers is a usage error
    assert main(["adapt", "--config", str(tiny_config), "--checkpoint", base, "--mode", "depth", "--out", str(tmp_path / "bad")]) == 2

    table = tmp_path / "table.csv"
    assert main(["compare", *map(str, runs.values()), "--out", str(table)]) == 0
    rows = list(csv.DictReader(table.open()))
    assert [r["method"] for r in rows] == ["depth", "full_ft", "lora"]
    assert all(all(r[c] != "" for c in r if c not in ("strategy", "kind")) for r in rows)

    # re-evaluating a run reproduces its report
    before = json.loads((runs["depth"] / "eval.json").read_text())
    assert main(["eval", "--run", str(runs["depth"])]) == 0
    after = json.loads((runs["depth"] / "eval.json").read_text())
    assert after["speech_token_error_rate"] == before["speech_token_error_rate"]
    assert after["text_ppl_adapted_kept"] == before["text_ppl_adapted_kept"]

    # an unevaluated run marks the comparison incomplete
    (tmp_path / "empty_run").mkdir()
    assert main(["compare", str(runs["depth"]), str(tmp_path / "empty_run")]) == 1


def test_cli_compare_needs_runs():
    assert main(["compare"]) == 2
