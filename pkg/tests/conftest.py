"""
Configuration and fixtures for pytest.
"""

import os

import pytest

from dataio import SyntheticConfig, generate_synthetic
from run_config import RunConfig
from tensor_core import make_rng


def pytest_collection_modifyitems(config, items):
    """
    Skip slow tests unless MPTHCL_RUN_SLOW=1.
    The acceptance training runs take minutes on one core.
    """
    if os.environ.get("MPTHCL_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow test; set MPTHCL_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return make_rng(1234, "gradcheck")


@pytest.fixture
def tiny_synthetic():
    """Synthetic config with odd feature widths so modality mix-ups fail loudly."""
    return SyntheticConfig(
        n_conversations=6, min_length=3, max_length=5, num_classes=3, num_speakers=2, d_t=6, d_a=5, d_v=4, seed=3
    )


@pytest.fixture
def tiny_dataset(tiny_synthetic):
    """Six short conversations matching toy_config."""
    return generate_synthetic(tiny_synthetic)


@pytest.fixture
def toy_config():
    """Small model over custom:6,5,4,3 features."""
    return RunConfig(
        profile="custom:6,5,4,3",
        d=8,
        heads=2,
        mpt_layers=2,
        dropout=0.0,
        epochs=2,
        batch_size=2,
        lr=1e-3,
        tau=0.5,
        seed=11,
    ).validate()


@pytest.fixture
def random_matrix(rng):
    """Factory for seeded random matrices."""

    def make(*shape):
        return rng.standard_normal(shape)

    return make


@pytest.fixture
def no_env(monkeypatch):
    """Clear the environment variables the CLI reads."""
    for name in ("MPTHCL_LOG_LEVEL", "MPTHCL_OUTPUT_DIR", "MPTHCL_TRACE_CONSOLE"):
        monkeypatch.delenv(name, raising=False)
    yield
