import json
import os

import numpy as np
import pytest

from d2p_exporter import export_corpus
from d2p_exporter.interchange import CORPUS_MAGIC


def read_corpus(path):
    raw = open(path, "rb").read()
    assert raw[:8] == CORPUS_MAGIC
    return np.frombuffer(raw[8:], dtype="<u4")


class TestExportCorpus:
    def test_empty_text_rejected(self, tiny_tokenizer_dir, tmp_path):
        src = tmp_path / "empty.txt"
        src.write_text("   \n  ")
        with pytest.raises(ValueError, match="empty"):
            export_corpus(str(src), "file", tiny_tokenizer_dir, str(tmp_path / "c.d2ptok"))

    def test_round_trip_decode(self, tiny_tokenizer_dir, tmp_path):
        from transformers import AutoTokenizer

        src = tmp_path / "text.txt"
        src.write_text("hello hello")
        out = str(tmp_path / "c.d2ptok")
        manifest = export_corpus(str(src), "file", tiny_tokenizer_dir, out)
        ids = read_corpus(out)
        assert manifest["tokens"] == len(ids)
        tokenizer = AutoTokenizer.from_pretrained(tiny_tokenizer_dir)
        assert tokenizer.decode(ids.tolist()) == "hello hello"

    def test_all_ids_below_vocab(self, tiny_tokenizer_dir, tmp_path):
        src = tmp_path / "text.txt"
        src.write_text("this is a tiny corpus with hello world tokens " * 20)
        out = str(tmp_path / "c.d2ptok")
        manifest = export_corpus(str(src), "file", tiny_tokenizer_dir, out)
        ids = read_corpus(out)
        assert int(ids.max()) < manifest["vocab_size"]

    def test_manifest_records_provenance(self, tiny_tokenizer_dir, tmp_path):
        src = tmp_path / "text.txt"
        src.write_text("hello world")
        out = str(tmp_path / "c.d2ptok")
        export_corpus(str(src), "file", tiny_tokenizer_dir, out)
        manifest = json.load(open(out + ".json"))
        assert manifest["schema"] == "d2p/1"
        assert manifest["source"].endswith("text.txt")
        assert manifest["tokenizer"] == tiny_tokenizer_dir

    def test_unknown_dataset_name(self, tiny_tokenizer_dir, tmp_path):
        with pytest.raises(ValueError, match="unknown corpus source"):
            export_corpus("bogus-dataset", "test", tiny_tokenizer_dir,
                          str(tmp_path / "c.d2ptok"))
