import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from stylebook_vc.corpus import CorpusSpec, generate_corpus, split_corpus
from stylebook_vc.harness import RunConfig, TrainingConfig, train
from stylebook_vc.model import ModelConfig, ConversionModel


TINY_MODEL = ModelConfig(
    num_units=12,
    content_dim=16,
    content_layers=1,
    content_heads=2,
    content_ff_dim=32,
    query_count=6,
    query_dim=16,
    style_dim=8,
    dual_attention_heads=2,
    dual_attention_dim=16,
    mel_hidden=12,
    style_hidden=12,
    unet_base_dim=8,
    unet_levels=2,
    time_dim=8,
    mel_dim=12,
)

TINY_CORPUS = CorpusSpec(
    num_phone_classes=4, num_speakers=3, content_dim=10, mel_dim=12, seed=11
)


def tiny_run_config(**training_overrides) -> RunConfig:
    fields = dict(
        batch_size=4,
        segment_frames=24,
        num_steps=30,
        checkpoint_interval=15,
        kmeans_iters=8,
        train_fraction=0.7,
        seed=0,
    )
    fields.update(training_overrides)
    training = TrainingConfig(**fields)
    return RunConfig(
        corpus=TINY_CORPUS,
        model=TINY_MODEL,
        training=training,
        utterances_per_speaker=4,
        frames_per_utterance=32,
    )


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_CORPUS, 4, 32)


@pytest.fixture(scope="session")
def tiny_model():
    return ConversionModel(TINY_MODEL, torch.Generator().manual_seed(0))


@pytest.fixture(scope="session")
def tiny_trained(tiny_corpus):
    """A briefly trained tiny model for pipeline round-trip tests."""
    config = tiny_run_config(num_steps=40)
    train_part, eval_part = split_corpus(tiny_corpus, config.training.train_fraction)
    result = train(config, train_part)
    return {
        "config": config,
        "model": result.model,
        "codebook": result.codebook,
        "history": result.history,
        "train_part": train_part,
        "eval_part": eval_part,
    }


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default training run backing the end-to-end criteria.

    Expensive (tens of minutes on CPU); built once per session, only when a
    test actually needs it.
    """
    config = RunConfig()
    corpus = generate_corpus(config.corpus, config.utterances_per_speaker, config.frames_per_utterance)
    train_part, eval_part = split_corpus(corpus, config.training.train_fraction)
    out_dir = tmp_path_factory.mktemp("default_run")
    started = time.perf_counter()
    result = train(config, train_part, out_dir=out_dir)
    train_seconds = time.perf_counter() - started
    return {
        "config": config,
        "model": result.model,
        "codebook": result.codebook,
        "history": result.history,
        "train_part": train_part,
        "eval_part": eval_part,
        "train_seconds": train_seconds,
        "checkpoint_path": result.checkpoint_path,
    }
