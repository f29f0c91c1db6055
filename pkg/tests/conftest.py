"""Shared fixtures: deterministic corpus files, small and full-size models,
and cached calibration activations reused across test modules."""

import numpy as np
import pytest

from actsparse.data import capture_block_inputs, ingest_corpus
from actsparse.model import ModelConfig, init_toy_model

WORDS = (
    "the quick brown fox jumps over a lazy dog while counting tokens and "
    "bytes in calibration text streams model sparse dense weight channel "
    "block layer budget search greedy"
).split()


def make_corpus_text(n_words: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    return " ".join(rng.choice(WORDS) for _ in range(n_words))


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    (d / "a.txt").write_text(make_corpus_text(20000, 7))
    (d / "b.txt").write_text(make_corpus_text(20000, 11))
    return d


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_blocks=4, d_model=64, n_heads=4, d_ff=96, max_seq=128)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_toy_model(small_config, seed=0)


@pytest.fixture(scope="session")
def small_calib(corpus_dir):
    return ingest_corpus([corpus_dir], max_sequences=4, seq_len=48, seed=0)


@pytest.fixture(scope="session")
def small_capture(small_model, small_calib):
    return capture_block_inputs(small_model, small_calib)


@pytest.fixture(scope="session")
def small_caches(small_capture):
    return small_capture[0]


@pytest.fixture(scope="session")
def toy_model():
    return init_toy_model(ModelConfig(), seed=0)


@pytest.fixture(scope="session")
def toy_calib(corpus_dir):
    return ingest_corpus([corpus_dir], max_sequences=4, seq_len=64, seed=0)


@pytest.fixture(scope="session")
def toy_capture(toy_model, toy_calib):
    return capture_block_inputs(toy_model, toy_calib)


@pytest.fixture(scope="session")
def toy_caches(toy_capture):
    return toy_capture[0]


@pytest.fixture(scope="session")
def heldout(corpus_dir):
    return ingest_corpus([corpus_dir], max_sequences=4, seq_len=128, seed=99).sequences
