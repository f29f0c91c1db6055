"""Corpus ingestion and activation capture."""

import numpy as np
import pytest

from actsparse.data import capture_block_inputs, detokenize, ingest_corpus, tokenize_bytes
from actsparse.model import LAYER_NAMES, block_forward


class TestTokenize:
    def test_round_trip(self):
        data = bytes(range(256))
        np.testing.assert_array_equal(tokenize_bytes(data), np.arange(256))
        assert detokenize(tokenize_bytes(data)) == data

    def test_ids_in_vocab(self):
        ids = tokenize_bytes(b"hello world")
        assert ids.min() >= 0 and ids.max() < 256


class TestIngest:
    def test_window_count_arithmetic(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(bytes(1024))
        cs = ingest_corpus([f], max_sequences=4, seq_len=256, seed=0)
        assert len(cs.sequences) == 4
        assert cs.token_count == 1024

    def test_same_seed_identical(self, corpus_dir):
        a = ingest_corpus([corpus_dir], max_sequences=5, seq_len=32, seed=3)
        b = ingest_corpus([corpus_dir], max_sequences=5, seq_len=32, seed=3)
        assert a.manifest == b.manifest
        for sa, sb in zip(a.sequences, b.sequences):
            np.testing.assert_array_equal(sa, sb)

    def test_different_seed_differs(self, corpus_dir):
        a = ingest_corpus([corpus_dir], max_sequences=5, seq_len=32, seed=3)
        b = ingest_corpus([corpus_dir], max_sequences=5, seq_len=32, seed=4)
        assert a.manifest != b.manifest

    def test_empty_directory_errors(self, tmp_path):
        with pytest.raises(ValueError, match="no readable input files"):
            ingest_corpus([tmp_path / "nothing"], max_sequences=1, seq_len=8, seed=0)

    def test_too_short_file_errors(self, tmp_path):
        f = tmp_path / "short.txt"
        f.write_text("ab")
        with pytest.raises(ValueError, match="no window"):
            ingest_corpus([f], max_sequences=1, seq_len=64, seed=0)

    def test_fewer_windows_than_requested_warns(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(bytes(64))
        with pytest.warns(UserWarning):
            cs = ingest_corpus([f], max_sequences=10, seq_len=32, seed=0)
        assert len(cs.sequences) == 2

    def test_windows_do_not_overlap(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(bytes(range(256)) * 4)
        cs = ingest_corpus([f], max_sequences=4, seq_len=128, seed=1)
        offsets = sorted(m["offset"] for m in cs.manifest)
        assert all(b - a >= 128 for a, b in zip(offsets, offsets[1:]))


class TestCapture:
    def test_block0_inputs_are_embeddings(self, small_model, small_calib, small_caches):
        ids = small_calib.as_batch()
        want = small_model.embedding[ids[0]].astype(np.float32)
        np.testing.assert_allclose(small_caches[0].seq_inputs[0], want, atol=1e-6)

    def test_token_count(self, small_calib, small_caches):
        assert small_caches[0].token_count == small_calib.token_count

    def test_replay_reproduces_cached_outputs(self, small_model, small_config, small_caches):
        for b, cache in enumerate(small_caches):
            x3, dense_out = cache.stacked()
            y = block_forward(small_model.blocks[b], x3, small_config)
            np.testing.assert_allclose(y, dense_out, atol=1e-5)

    def test_layer_inputs_cover_all_projections(self, small_caches, small_calib):
        tokens = small_calib.token_count
        for cache in small_caches:
            assert set(cache.layer_inputs) == set(LAYER_NAMES)
            for name in LAYER_NAMES:
                assert cache.layer_inputs[name].shape[0] == tokens

    def test_dense_logits_shape(self, small_capture, small_calib, small_config):
        _, logits = small_capture
        ids = small_calib.as_batch()
        assert logits.shape == (ids.shape[0], ids.shape[1], small_config.vocab_size)
