from pathlib import Path

import numpy as np
import pytest
import torch

from app.data.toy import generate_toy_dataset
from app.schemas.schemas import (
    DiscriminatorConfig,
    EffectChainSpec,
    EffectProbabilities,
    GeneratorConfig,
    MetricConfig,
    MultiMelConfig,
    RunConfig,
    StftConfig,
    ToySpec,
    TrainConfig,
)

TOY_SAMPLE_RATE = 8000


def tiny_generator_config(**overrides) -> GeneratorConfig:
    params = dict(
        n_blocks=1,
        base_dims=4,
        dualpath_layers=1,
        dualpath_heads=2,
        rope_repeats=1,
        rope_heads=2,
        rope_time_depth=1,
        rope_freq_depth=1,
        dropout=0.0,
        stft=StftConfig(n_fft=64, hop_length=16),
        channels=2,
    )
    params.update(overrides)
    return GeneratorConfig(**params)


def tiny_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(stft_windows=[256, 128], channels=[4, 8])


def tiny_mms_config() -> MultiMelConfig:
    return MultiMelConfig(windows=[256, 128], mel_bins=[16, 8])


def tiny_metric_config() -> MetricConfig:
    return MetricConfig(windows=[256, 128], mel_bins=[16, 8], cap_db=100.0)


def tiny_run_config(**train_overrides) -> RunConfig:
    train = dict(
        target_stem="vocals",
        chunk_seconds=0.25,
        batch_size=1,
        total_steps=3,
        checkpoint_every=1000,
        log_every=1,
        seed=0,
        effects=EffectChainSpec(probabilities=EffectProbabilities.disabled()),
    )
    train.update(train_overrides)
    return RunConfig(
        train=TrainConfig(**train),
        generator=tiny_generator_config(),
        discriminator=tiny_discriminator_config(),
        mms=tiny_mms_config(),
        metrics=tiny_metric_config(),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def gen_cfg() -> GeneratorConfig:
    return tiny_generator_config()


@pytest.fixture
def run_cfg() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(
        ToySpec(n_songs=2, duration=1.0, sample_rate=TOY_SAMPLE_RATE, channels=2, seed=0),
        root,
    )
    return root
