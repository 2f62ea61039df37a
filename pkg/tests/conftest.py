import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four identities, three images each per modality, default image size."""
    from cmalign.data import SyntheticConfig, generate_synthetic_dataset, load_directory_dataset

    root = tmp_path_factory.mktemp("tiny") / "ds"
    generate_synthetic_dataset(root, SyntheticConfig(n_identities=4, images_per_identity=3, seed=7))
    return load_directory_dataset(root)
