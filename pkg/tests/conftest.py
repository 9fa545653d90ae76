import numpy as np
import pytest

from kdaug.dataio import SyntheticConfig, holdout_split, make_synthetic, normalize


@pytest.fixture(scope="session")
def tiny_split():
    recs = make_synthetic(SyntheticConfig(n_classes=3, n_subjects=4, channels=3, T=64, windows_per_class=4, seed=1))
    return normalize(holdout_split(recs, 64, 64, ["s003"]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
