import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from corpus import make_corpus_dir  # noqa: E402

from moelab.config import Experiment, ModelConfig, RoutingConfig, TrainConfig  # noqa: E402
from moelab.data import ByteTokenizer, prepare  # noqa: E402

torch.set_num_threads(2)


def tiny_experiment(n_layers=2, d_model=16, n_heads=2, vocab=256, ctx=16,
                    dropout=0.0, routing=RoutingConfig(n_experts=4, top_k=2),
                    seed=1234, **train_kw) -> Experiment:
    """Small fully specified experiment for unit tests."""
    train_defaults = dict(learning_rate=1e-3, min_learning_rate=1e-4,
                          weight_decay=0.1, iterations=100, batch_size=4,
                          grad_accumulation_steps=1, sequence_length=ctx,
                          warmup_iterations=5, seed=seed, eval_window=10,
                          eval_interval=10)
    train_defaults.update(train_kw)
    return Experiment(
        model=ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                          vocab_size=vocab, context_length=ctx, dropout=dropout),
        routing=dataclasses.replace(routing) if routing is not None else None,
        train=TrainConfig(**train_defaults),
    )


def routing_variant(**kw) -> RoutingConfig:
    return dataclasses.replace(RoutingConfig(n_experts=4, top_k=2), **kw)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    return make_corpus_dir(tmp_path_factory.mktemp("corpus"),
                           docs_per_language=4, doc_bytes=4096, seed=7)


@pytest.fixture(scope="session")
def shards(corpus_dir):
    """Small labeled train/val shard pair shared across tests."""
    return prepare(corpus_dir, ByteTokenizer(), split_fraction=0.9, labeled=True)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(99))
