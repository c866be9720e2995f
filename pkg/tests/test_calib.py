import numpy as np
import pytest

from conftest import toy_graph
from d2prune.calib import (
    CalibrationSpec,
    build_batches,
    load_calibration,
    save_calibration,
)
from d2prune.checkpoint import TokenCorpus


def corpus_of(n, vocab=97, seed=0):
    rng = np.random.default_rng(seed)
    return TokenCorpus(rng.integers(0, vocab, size=n).astype(np.uint32), vocab)


class TestCorpusMode:
    def test_exact_length_corpus_forced_window(self):
        corpus = corpus_of(32)
        spec = CalibrationSpec(n_samples=1, seq_len=32, seed=5)
        batch = build_batches(spec, corpus=corpus)
        assert batch.tokens.shape == (1, 32)
        assert np.array_equal(batch.tokens[0], corpus.token_ids.astype(np.int64))
        assert batch.offsets == [0]

    def test_deterministic_under_seed(self):
        corpus = corpus_of(4096)
        spec = CalibrationSpec(n_samples=8, seq_len=64, seed=11)
        a = build_batches(spec, corpus=corpus)
        b = build_batches(spec, corpus=corpus)
        assert np.array_equal(a.tokens, b.tokens)
        assert a.digest == b.digest
        c = build_batches(CalibrationSpec(n_samples=8, seq_len=64, seed=12), corpus=corpus)
        assert not np.array_equal(a.tokens, c.tokens)

    def test_offsets_aligned_and_valid_ids(self):
        corpus = corpus_of(2048, vocab=50)
        spec = CalibrationSpec(n_samples=16, seq_len=64, seed=0)
        batch = build_batches(spec, corpus=corpus)
        assert all(o % 64 == 0 for o in batch.offsets)
        assert batch.tokens.max() < 50 and batch.tokens.min() >= 0

    def test_too_short_corpus(self):
        with pytest.raises(ValueError, match="too short"):
            build_batches(CalibrationSpec(n_samples=1, seq_len=64), corpus=corpus_of(10))

    def test_disjoint_recovery_batch(self):
        corpus = corpus_of(64 * 24)
        spec = CalibrationSpec(n_samples=8, seq_len=64, seed=3)
        main = build_batches(spec, corpus=corpus)
        extra = build_batches(
            CalibrationSpec(n_samples=8, seq_len=64, seed=4),
            corpus=corpus,
            exclude_offsets=tuple(main.offsets),
        )
        assert not set(main.offsets) & set(extra.offsets)


class TestSelfGeneration:
    def test_shapes_and_vocab(self):
        graph = toy_graph(seed=0, n_layers=1)
        spec = CalibrationSpec(n_samples=3, seq_len=12, seed=0, source="self_generation")
        batch = build_batches(spec, graph=graph)
        assert batch.tokens.shape == (3, 12)
        assert batch.tokens.max() < graph.config.vocab_size
        # default prompt is the end-of-text convention (last vocab id)
        assert (batch.tokens[:, 0] == graph.config.vocab_size - 1).all()

    def test_deterministic(self):
        graph = toy_graph(seed=0, n_layers=1)
        spec = CalibrationSpec(n_samples=2, seq_len=10, seed=7, source="self_generation")
        a = build_batches(spec, graph=graph)
        b = build_batches(spec, graph=graph)
        assert np.array_equal(a.tokens, b.tokens)

    def test_requires_graph(self):
        spec = CalibrationSpec(n_samples=1, seq_len=8, source="self_generation")
        with pytest.raises(ValueError, match="graph"):
            build_batches(spec)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        corpus = corpus_of(2048)
        spec = CalibrationSpec(n_samples=4, seq_len=32, seed=2)
        batch = build_batches(spec, corpus=corpus)
        save_calibration(str(tmp_path / "c"), batch)
        back = load_calibration(str(tmp_path / "c"), vocab_size=97)
        assert np.array_equal(back.tokens, batch.tokens)
        assert back.digest == batch.digest
        assert back.spec == spec

    def test_tamper_detection(self, tmp_path):
        corpus = corpus_of(2048)
        batch = build_batches(CalibrationSpec(4, 32, 2), corpus=corpus)
        save_calibration(str(tmp_path / "c"), batch)
        tok_file = tmp_path / "c" / "tokens.d2ptok"
        raw = bytearray(tok_file.read_bytes())
        raw[12] ^= 1
        tok_file.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="digest"):
            load_calibration(str(tmp_path / "c"), vocab_size=97)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CalibrationSpec(n_samples=0)
        with pytest.raises(ValueError):
            CalibrationSpec(seq_len=1)
