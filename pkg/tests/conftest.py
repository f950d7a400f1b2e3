"""Pytest configuration and fixtures."""

import os

import numpy as np
import pytest
import torch

from pytsr.config import (
    CnuConfig,
    CorpusConfig,
    EmbedderConfig,
    ExperimentConfig,
    ExtractorConfig,
    MfccConfig,
    MixtureEmbedderConfig,
    RnntConfig,
    TrainingConfig,
)
from pytsr.corpus import NoiseBank, build_manifest, render_record
from pytsr.system import TargetSpeakerSystem


def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line("markers", "unit: Unit tests (fast, no training)")
    config.addinivalue_line("markers", "integration: Integration tests (train tiny models)")
    config.addinivalue_line("markers", "slow: Slow running tests")


@pytest.fixture(scope="session")
def test_config():
    """Test configuration fixture."""
    return {
        "enable_integration": os.getenv("PYTSR_ENABLE_INTEGRATION", "false").lower() == "true",
        "integration_epochs": int(os.getenv("PYTSR_INTEGRATION_EPOCHS", "1")),
    }


@pytest.fixture
def tiny_config():
    """Experiment config small enough to build and run in milliseconds."""
    return ExperimentConfig(
        seed=3,
        features=MfccConfig(mel_bins=20, mfcc_dim=13),
        corpus=CorpusConfig(
            vocabulary="abcd",
            min_tokens=2,
            max_tokens=3,
            enrollment_tokens=8,
            num_train_speakers=4,
            num_dev_speakers=3,
            num_test_speakers=3,
            num_rirs=2,
            snr_choices_db=[12.0, 24.0],
        ),
        embedder=EmbedderConfig(embedding_dim=8, channels=8, min_enrollment_s=0.5),
        extractor=ExtractorConfig(
            encoder_filters=8, encoder_kernel=16, bottleneck=8, hidden=8, repeats=1, blocks=2
        ),
        mixture_embedder=MixtureEmbedderConfig(channels=8),
        cnu=CnuConfig(channels=8, kernel=3, hidden=4),
        rnnt=RnntConfig(
            hidden_size=8,
            encoder_layers=1,
            decoder_layers=1,
            dropout=0.0,
            embed_dim=4,
            joint_dim=8,
            wrapper_channels=6,
            max_symbols_per_step=3,
            beam_size=2,
        ),
        training=TrainingConfig(
            batch_size=2, max_epochs=1, early_stop_patience=1, steps_per_epoch=1, dev_size=2
        ),
    )


@pytest.fixture
def tiny_system(tiny_config):
    """Untrained float64 system built from the tiny config."""
    return TargetSpeakerSystem(tiny_config).double()


@pytest.fixture
def train_manifest(tiny_config):
    """Six training records."""
    return build_manifest("train", 6, tiny_config.seed, tiny_config.corpus)


@pytest.fixture
def test_manifest(tiny_config):
    """Four test records."""
    return build_manifest("test", 4, tiny_config.seed, tiny_config.corpus)


@pytest.fixture
def rendered(tiny_config, tiny_system, train_manifest):
    """First training record rendered in memory."""
    noise_bank = NoiseBank(tiny_config.corpus.noise_kinds, tiny_config.stft.sample_rate)
    return render_record(
        train_manifest[0],
        tiny_config.corpus,
        tiny_config.stft,
        tiny_system.label_index,
        noise_bank,
    )


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def white_noise(rng):
    """Half a second of white noise as a float64 tensor."""
    return torch.from_numpy(rng.standard_normal(8000))


@pytest.fixture(autouse=True)
def seed_torch():
    """Seed the global torch stream for every test."""
    torch.manual_seed(0)
