import numpy as np
import pytest

from meshsplat.synthetic import generate_sequence


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """6 frames at 32x32: enough to exercise the whole pipeline quickly."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    generate_sequence(root, seed=11, frames=6, resolution=32)
    return root


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 frames at 64x64 for the mid-weight pipeline tests."""
    root = tmp_path_factory.mktemp("data") / "small"
    generate_sequence(root, seed=13, frames=8, resolution=64)
    return root
