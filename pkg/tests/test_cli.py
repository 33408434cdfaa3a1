import json
import os

import numpy as np
import pytest

from tokenloom import checkpoint, cli, data, pipeline
from tokenloom.config import (
    FinetuneConfig,
    ModelConfig,
    PretrainConfig,
    RunConfig,
    VqConfig,
    run_config_to_dict,
)


@pytest.fixture(scope="module")
def mini_config_path(tmp_path_factory):
    """Very small but complete pipeline config, written as a JSON file."""
    tmp = tmp_path_factory.mktemp("cfg")
    cfg = RunConfig(
        vq=VqConfig(
            codebook_size=32, latent_dim=4, image_hw=(16, 16), downsample=4,
            channels=(8, 12), seed=0,
        ),
        model=ModelConfig(
            vocab_size=256 + 32 + 5, d_model=16, n_layers=1, n_heads=2, d_ff=32,
            max_seq_len=48, seed=0,
        ),
        pretrain=PretrainConfig(steps=30, batch_size=4, seed=0),
        finetune=FinetuneConfig(steps=12, batch_size=4, seed=0),
        vq_steps=25,
        vq_batch_size=8,
    )
    path = tmp / "run.json"
    path.write_text(json.dumps(run_config_to_dict(cfg)))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, mini_config_path):
    """Corpus + trained mini checkpoints shared across CLI tests."""
    tmp = tmp_path_factory.mktemp("ws")
    data_dir = tmp / "data"
    assert cli.main([
        "synth", "--count", "48", "--seed", "3", "--out", str(data_dir),
        "--config", mini_config_path,
    ]) == 0
    manifest = str(data_dir / "manifest.jsonl")
    vq_ckpt = str(tmp / "vq.ckpt")
    assert cli.main([
        "train-vq", "--data", manifest, "--out", vq_ckpt,
        "--config", mini_config_path, "--log-every", "0",
    ]) == 0
    lm_ckpt = str(tmp / "lm.ckpt")
    assert cli.main([
        "train-lm", "--data", manifest, "--vq", vq_ckpt, "--out", lm_ckpt,
        "--config", mini_config_path, "--log-every", "0",
    ]) == 0
    return {"dir": tmp, "manifest": manifest, "vq": vq_ckpt, "lm": lm_ckpt}


class TestSynth:
    def test_writes_corpus_and_manifest(self, workspace):
        records = data.read_manifest(workspace["manifest"])
        assert len(records) == 48

    def test_missing_out_is_usage_error(self, capsys):
        assert cli.main(["synth", "--count", "4"]) == 2
        err = capsys.readouterr().err.strip()
        record = json.loads(err)
        assert record["code"] == "usage"

    def test_unknown_flag_single_line_json(self, capsys):
        assert cli.main(["synth", "--count", "4", "--bogus"]) == 2
        err = capsys.readouterr().err.strip()
        assert "\n" not in err
        assert json.loads(err)["code"] == "usage"


class TestTrainAndCheckpoints:
    def test_vq_checkpoint_sections(self, workspace):
        header, tensors = checkpoint.load(workspace["vq"])
        assert header["stage"] == "vq"
        assert any(k.startswith("vq.encoder.") for k in tensors)
        assert "vq.codebook" in tensors

    def test_lm_checkpoint_bundles_vq(self, workspace):
        _, tensors = checkpoint.load(workspace["lm"])
        assert any(k.startswith("lm.layer0.") for k in tensors)
        assert "vq.codebook" in tensors

    def test_train_lm_rejects_vq_only_ckpt_for_finetune(self, workspace, capsys):
        out = str(workspace["dir"] / "nope.ckpt")
        code = cli.main([
            "finetune-head", "--base", workspace["vq"], "--data", workspace["manifest"],
            "--out", out,
        ])
        assert code == 1
        record = json.loads(capsys.readouterr().err.strip())
        assert record["code"] == "missing_section"
        assert "lm." in record["message"] or record["context"].get("section") == "lm."


class TestFinetuneCli:
    def test_prints_trainable_parameters(self, workspace, capsys):
        out = str(workspace["dir"] / "tuned.ckpt")
        code = cli.main([
            "finetune-head", "--base", workspace["lm"], "--data", workspace["manifest"],
            "--out", out, "--log-every", "0",
        ])
        captured = capsys.readouterr().out
        assert code == 0
        # K=32, d_model=16 -> 32*17 = 544
        assert "trainable parameters: 544" in captured
        assert os.path.exists(out)
        assert os.path.exists(out + ".report.txt")
        report = open(out + ".report.txt", encoding="utf-8").read()
        assert "max_frozen_drift: 0" in report

    def test_reference_scale_format(self):
        # the formatted count for K=256, d_model=64 reads 16,640
        layout_count = 256 * 65
        assert f"{layout_count:,}" == "16,640"


class TestGenerateCli:
    def test_generates_report_dir(self, workspace, capsys):
        tuned = str(workspace["dir"] / "tuned2.ckpt")
        assert cli.main([
            "finetune-head", "--base", workspace["lm"], "--data", workspace["manifest"],
            "--out", tuned, "--log-every", "0",
        ]) == 0
        capsys.readouterr()
        out_dir = str(workspace["dir"] / "gen")
        code = cli.main([
            "generate", "--ckpt", tuned, "--prompt", "a red circle", "--force-image",
            "--seed", "3", "--out", out_dir,
        ])
        assert code == 0
        assert os.path.exists(os.path.join(out_dir, "report.md"))
        assert os.path.exists(os.path.join(out_dir, "generation.txt"))
        images = os.listdir(os.path.join(out_dir, "images"))
        assert len(images) >= 1
        gen_manifest = open(os.path.join(out_dir, "generation.txt"), encoding="utf-8").read()
        assert "seed: 3" in gen_manifest
        assert "prompt: 'a red circle'" in gen_manifest

    def test_same_seed_same_bytes(self, workspace):
        tuned = str(workspace["dir"] / "tuned2.ckpt")
        out_a = str(workspace["dir"] / "gen_a")
        out_b = str(workspace["dir"] / "gen_b")
        for out in (out_a, out_b):
            assert cli.main([
                "generate", "--ckpt", tuned, "--prompt", "a blue square",
                "--force-image", "--seed", "11", "--out", out,
            ]) == 0
        rep_a = open(os.path.join(out_a, "report.md"), "rb").read()
        rep_b = open(os.path.join(out_b, "report.md"), "rb").read()
        assert rep_a == rep_b
        img_a = open(os.path.join(out_a, "images", "img_000.ppm"), "rb").read()
        img_b = open(os.path.join(out_b, "images", "img_000.ppm"), "rb").read()
        assert img_a == img_b


class TestEvalCli:
    def test_eval_prints_metrics(self, workspace, capsys):
        code = cli.main([
            "eval", "--ckpt", workspace["lm"], "--data", workspace["manifest"],
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "recon_psnr_db:" in out
        assert "image_token_ce:" in out


class TestTokenizeCli:
    def test_tokenize_writes_jsonl(self, workspace):
        out = str(workspace["dir"] / "tokens.jsonl")
        assert cli.main([
            "tokenize", "--ckpt", workspace["vq"], "--data", workspace["manifest"],
            "--out", out,
        ]) == 0
        lines = open(out, encoding="utf-8").read().strip().splitlines()
        assert len(lines) == 48
        first = json.loads(lines[0])
        assert len(first["tokens"]) == 16  # (16/4)^2


class TestErrors:
    def test_missing_checkpoint_single_line(self, capsys):
        code = cli.main(["generate", "--ckpt", "/nonexistent.ckpt", "--out", "/tmp/x"])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert "\n" not in err
        record = json.loads(err)
        assert record["code"] == "checkpoint"

    def test_bad_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = cli.main(["synth", "--count", "1", "--out", str(tmp_path), "--config", str(bad)])
        assert code == 1
        assert json.loads(capsys.readouterr().err.strip())["code"] == "config"
