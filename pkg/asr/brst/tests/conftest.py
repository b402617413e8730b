from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from brst.config import ModelConfig, ToyCorpusSpec, load_model_config
from brst.corpus import generate_toy_corpus, load_utterances, read_manifest
from brst.model import ModelParams, Vocabulary, build_model


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough for finite differences: d=8, one block set, 4 emitting units."""

    payload = {
        "d_model": 8,
        "heads": 2,
        "ff_dim": 16,
        "num_encoder_blocks": 1,
        "num_decoder_blocks": 1,
        "encoder_repeats": 2,
        "decoder_repeats": 1,
        "vocab_size": 7,
        "input_dim": 80,
        "subsampling": 4,
        "dropout_rate": 0.0,
        "dtype": "float64",
    }
    payload.update(overrides)
    return load_model_config(**payload)


def random_features(num_frames: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((num_frames, 80))


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@pytest.fixture
def tiny_params() -> ModelParams:
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def tiny_adapter_params() -> ModelParams:
    return build_model(tiny_config(adapters_encoder=True, adapters_decoder=True, decoder_repeats=2), seed=0)


@pytest.fixture
def toy_manifest(tmp_path: Path) -> Path:
    spec = ToyCorpusSpec(num_utterances=6, vocab_size=4, seed=3, min_tokens=2, max_tokens=3)
    return generate_toy_corpus(spec, tmp_path / "corpus")


@pytest.fixture
def toy_vocab(toy_manifest: Path) -> Vocabulary:
    return Vocabulary.synthetic(4)


@pytest.fixture
def toy_utterances(toy_manifest: Path, toy_vocab: Vocabulary):
    return load_utterances(read_manifest(toy_manifest), toy_vocab, cmvn=True)
