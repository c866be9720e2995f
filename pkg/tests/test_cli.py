import json
import os

import numpy as np
import pytest

from conftest import toy_config, toy_tensors
from d2prune.checkpoint import TokenCorpus, save_corpus
from d2prune.cli import main


@pytest.fixture
def workdir(tmp_path):
    from d2prune.checkpoint import save_model

    cfg = toy_config()
    save_model(str(tmp_path / "model"), cfg, toy_tensors(cfg, seed=0))
    rng = np.random.default_rng(0)
    ids = rng.integers(0, cfg.vocab_size, size=4096).astype(np.uint32)
    save_corpus(str(tmp_path / "corpus.d2ptok"), TokenCorpus(ids))
    return tmp_path


def run(args):
    return main([str(a) for a in args])


def calibrate(workdir, out="calib", samples=16, seq_len=48, seed=0):
    code = run(["calibrate", "--model", workdir / "model", "--corpus",
                workdir / "corpus.d2ptok", "--samples", samples,
                "--seq-len", seq_len, "--seed", seed, "--out", workdir / out])
    assert code == 0
    return workdir / out


class TestErrors:
    def test_unknown_flag_exit_1(self, workdir, capsys):
        assert run(["eval", "--model", workdir / "model", "--bogus"]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_model_exit_1(self, tmp_path, capsys):
        assert run(["inspect", "--model", tmp_path / "nope"]) == 1
        err = capsys.readouterr().err
        assert "config.json" in err

    def test_bad_sparsity_exit_1(self, workdir, capsys):
        calib = calibrate(workdir)
        code = run(["prune", "--model", workdir / "model", "--calib", calib,
                    "--sparsity", 1.5, "--out", workdir / "out"])
        assert code == 1
        assert "sparsity" in capsys.readouterr().err

    def test_bad_block_range_exit_1(self, workdir, capsys):
        calib = calibrate(workdir)
        code = run(["prune", "--model", workdir / "model", "--calib", calib,
                    "--sparsity", 0.25, "--blocks", "0:9", "--out", workdir / "out"])
        assert code == 1
        assert "blocks" in capsys.readouterr().err


class TestCommands:
    def test_inspect_json(self, workdir):
        out = workdir / "inspect.json"
        assert run(["inspect", "--model", workdir / "model",
                    "--corpus", workdir / "corpus.d2ptok", "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["schema"] == "d2p/1"
        assert report["plan"] == "no plan applied"
        assert "mean_abs_activation" in report

    def test_calibrate_and_divergence(self, workdir):
        calib = calibrate(workdir)
        out = workdir / "div.json"
        dot = workdir / "div.dot"
        assert run(["divergence", "--model", workdir / "model", "--calib", calib,
                    "--tau", 0.5, "--out", out, "--dot", dot]) == 0
        payload = json.loads(out.read_text())
        assert payload["schema"] == "d2p/1"
        assert set(payload["blocks"]) == {"blocks.0.attn", "blocks.1.attn"}
        m = np.array(payload["blocks"]["blocks.0.attn"]["matrix"])
        assert m.shape == (4, 4)
        assert "graph" in dot.read_text()

    def test_sparsity_zero_byte_identical_tensors(self, workdir):
        calib = calibrate(workdir)
        out = workdir / "pruned0"
        assert run(["prune", "--model", workdir / "model", "--calib", calib,
                    "--sparsity", 0.0, "--out", out]) == 0
        src = (workdir / "model" / "tensors.bin").read_bytes()
        dst = (out / "tensors.bin").read_bytes()
        assert src == dst

    def test_random_metric_deterministic(self, workdir):
        calib = calibrate(workdir)
        for name in ("a", "b"):
            assert run(["prune", "--model", workdir / "model", "--calib", calib,
                        "--sparsity", 0.25, "--metric", "random", "--seed", 7,
                        "--out", workdir / name]) == 0
        for fname in ("plan.json", "tensors.bin"):
            assert (workdir / "a" / fname).read_bytes() == (workdir / "b" / fname).read_bytes()

    def test_prune_recover_eval_flow(self, workdir):
        calib = calibrate(workdir, samples=24, seq_len=48)
        out = workdir / "pruned"
        assert run(["prune", "--model", workdir / "model", "--calib", calib,
                    "--sparsity", 0.25, "--recover", "--out", out]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "prune_with_recovery"
        assert abs(manifest["sparsity"]["prunable_ratio"] - 0.25) <= 0.005
        plan = json.loads((out / "plan.json").read_text())
        assert plan["blocks.0.attn"]["granularity"] == "head"
        assert plan["blocks.0.attn"]["provenance"]["calibration_digest"]
        ppl_out = workdir / "ppl.json"
        assert run(["eval", "--model", out, "--corpus", workdir / "corpus.d2ptok",
                    "--chunk-len", 48, "--out", ppl_out]) == 0
        report = json.loads(ppl_out.read_text())
        assert report["perplexity"] >= 1.0
        # inspect on the pruned checkpoint sees the plan
        assert run(["inspect", "--model", out, "--out", workdir / "i.json"]) == 0
        assert json.loads((workdir / "i.json").read_text())["plan"] != "no plan applied"

    def test_input_checkpoint_not_mutated(self, workdir):
        before = (workdir / "model" / "tensors.bin").read_bytes()
        calib = calibrate(workdir)
        run(["prune", "--model", workdir / "model", "--calib", calib,
             "--sparsity", 0.5, "--out", workdir / "p"])
        assert (workdir / "model" / "tensors.bin").read_bytes() == before

    def test_self_gen_calibrate(self, workdir):
        out = workdir / "selfgen"
        assert run(["calibrate", "--model", workdir / "model", "--self-gen",
                    "--samples", 2, "--seq-len", 12, "--out", out]) == 0
        from d2prune.calib import load_calibration

        batch = load_calibration(str(out), vocab_size=97)
        assert batch.tokens.shape == (2, 12)

    def test_threads_env(self, workdir, monkeypatch):
        monkeypatch.setenv("D2P_THREADS", "1")
        assert run(["inspect", "--model", workdir / "model"]) == 0
        assert os.environ["OPENBLAS_NUM_THREADS"] == "1"
