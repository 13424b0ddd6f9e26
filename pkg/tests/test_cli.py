"""CLI contract: exit codes, subcommand wiring, config file handling."""

import json

import numpy as np
import pytest

from spa.checkpoint import load_checkpoint, save_model
from spa.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from spa.model import ModelConfig, SpaModel
from spa.tokenizer import VOCAB_SIZE


@pytest.fixture
def full_ckpt(tmp_path):
    cfg = ModelConfig(
        n_layers=1, d_model=16, n_heads=2, d_ff=32,
        vocab_size=VOCAB_SIZE, max_seq_len=48, side_reduction=8,
    )
    model = SpaModel.create(cfg, seed=1)
    rng = np.random.default_rng(5)
    model.gate["w"].data[:] = rng.standard_normal((cfg.d_model, 2)) * 0.5
    model.base.freeze()
    path = tmp_path / "full.ckpt"
    save_model(model, path, kind="full")
    return path


class TestUsage:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "make-corpus" in capsys.readouterr().out

    def test_no_command_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["bench-latency", "--warp-speed"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_flag_names_it(self, capsys):
        assert main(["pretrain", "--out", "x.ckpt"]) == EXIT_USAGE
        assert "--corpus" in capsys.readouterr().err

    def test_nonexistent_corpus_dir_names_flag(self, capsys, tmp_path):
        code = main(["pretrain", "--corpus", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "x.ckpt")])
        assert code == EXIT_USAGE
        assert "--corpus" in capsys.readouterr().err


class TestMakeCorpus:
    def test_writes_both_corpora_and_meta(self, tmp_path, capsys):
        out = tmp_path / "corpora"
        assert main(["make-corpus", "--seed", "3", "--tier", "small",
                     "--out", str(out)]) == EXIT_OK
        assert (out / "base" / "0000.txt").exists()
        assert (out / "personal" / "0000.txt").exists()
        meta = json.loads((out / "meta.json").read_text())
        assert meta["tier"] == "small"

    def test_deterministic_given_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["make-corpus", "--seed", "3", "--out", str(a)])
        main(["make-corpus", "--seed", "3", "--out", str(b)])
        assert (a / "base" / "0000.txt").read_text() == (b / "base" / "0000.txt").read_text()


class TestBenchLatency:
    def test_table_format(self, capsys):
        assert main(["bench-latency", "--layers", "32", "--usage", "0.62"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "lora" in out and "spa" in out

    def test_csv_and_profile(self, tmp_path, capsys):
        profile = tmp_path / "p.profile"
        profile.write_text("tau = 0.002\nt_data = 0.0042\nt_pretrained = 0.0658\n")
        code = main(["bench-latency", "--profile", str(profile), "--layers", "32",
                     "--usage", "0.62", "--format", "csv"])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        lst = [l for l in lines if l.startswith("lst,")][0]
        assert "0.31" in lst

    def test_bad_arch_cost_is_usage_error(self):
        assert main(["bench-latency", "--arch-cost", "lora=fast"]) == EXIT_USAGE

    def test_missing_profile_file_is_usage_error(self, tmp_path):
        assert main(["bench-latency", "--profile", str(tmp_path / "nope")]) == EXIT_USAGE


class TestDecodeAndEval:
    def test_decode_local_runs(self, full_ckpt, capsys):
        code = main(["decode-local", "--checkpoint", str(full_ckpt),
                     "--prompt", "the quiet", "--max-new", "6"])
        assert code == EXIT_OK
        assert "M=" in capsys.readouterr().err

    def test_decode_local_beam(self, full_ckpt, capsys):
        code = main(["decode-local", "--checkpoint", str(full_ckpt),
                     "--prompt", "a", "--beam", "2", "--max-new", "3",
                     "--policy", "always-side"])
        assert code == EXIT_OK

    def test_eval_prints_perplexity(self, full_ckpt, tmp_path, capsys):
        corpus = tmp_path / "docs"
        corpus.mkdir()
        for i in range(6):
            (corpus / f"{i}.txt").write_text(f"the quiet river {i}")
        code = main(["eval", "--checkpoint", str(full_ckpt), "--corpus", str(corpus),
                     "--policy", "base-only"])
        assert code == EXIT_OK
        assert "perplexity=" in capsys.readouterr().out

    def test_eval_device_only_policy(self, full_ckpt, tmp_path, capsys):
        corpus = tmp_path / "docs"
        corpus.mkdir()
        for i in range(6):
            (corpus / f"{i}.txt").write_text(f"a bright signal {i}")
        code = main(["eval", "--checkpoint", str(full_ckpt), "--corpus", str(corpus),
                     "--policy", "device-only"])
        assert code == EXIT_OK
        assert "perplexity=" in capsys.readouterr().out

    def test_generate_device_only_needs_no_server(self, full_ckpt, tmp_path, capsys):
        side = tmp_path / "side.ckpt"
        model = load_checkpoint(full_ckpt).build_model()
        save_model(model, side, kind="side")
        code = main(["generate", "--side-checkpoint", str(side), "--prompt", "hi",
                     "--policy", "device-only", "--max-new", "4"])
        assert code == EXIT_OK

    def test_generate_without_connect_is_usage_error(self, full_ckpt, tmp_path):
        side = tmp_path / "side.ckpt"
        model = load_checkpoint(full_ckpt).build_model()
        save_model(model, side, kind="side")
        assert main(["generate", "--side-checkpoint", str(side),
                     "--prompt", "hi"]) == EXIT_USAGE

    def test_corrupt_checkpoint_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"SPA1" + b"\x00" * 64)
        code = main(["decode-local", "--checkpoint", str(bad), "--prompt", "x"])
        assert code == EXIT_RUNTIME


class TestGradCheckCommand:
    def test_passes_and_prints_per_check_lines(self, capsys):
        assert main(["grad-check", "--trials", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "matmul[0]" in out and "side+gate loss[0]" in out
        assert "all checks passed" in out

    def test_impossible_tolerance_fails_with_exit_3(self, capsys):
        assert main(["grad-check", "--trials", "1", "--tol", "1e-18"]) == EXIT_CHECK_FAILED


class TestConfigFile:
    def test_config_overrides_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "spa.cfg"
        cfg.write_text("[latency]\nprofile = " + str(tmp_path / "p.profile") + "\n")
        (tmp_path / "p.profile").write_text("tau = 0.001\nt_data = 0.001\nt_pretrained = 0\n")
        code = main(["--config", str(cfg), "bench-latency", "--layers", "2",
                     "--usage", "0.5", "--tokens", "50", "--format", "csv"])
        assert code == EXIT_OK
        lst = [l for l in capsys.readouterr().out.splitlines() if l.startswith("lst,")][0]
        assert "0.1" in lst  # 50 * 1 * 0.002

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "spa.cfg"
        cfg.write_text("[train]\nwarp = 9\n")
        assert main(["--config", str(cfg), "bench-latency"]) == EXIT_USAGE

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "spa.cfg"
        cfg.write_text("[propulsion]\nx = 1\n")
        assert main(["--config", str(cfg), "bench-latency"]) == EXIT_USAGE

    def test_env_var_fallback(self, tmp_path, monkeypatch, capsys):
        cfg = tmp_path / "spa.cfg"
        cfg.write_text("[train]\nepochs = 1\n")
        monkeypatch.setenv("SPA_CONFIG", str(cfg))
        assert main(["bench-latency", "--layers", "4", "--usage", "0.5"]) == EXIT_OK
        monkeypatch.setenv("SPA_CONFIG", str(tmp_path / "missing.cfg"))
        assert main(["bench-latency"]) == EXIT_USAGE
