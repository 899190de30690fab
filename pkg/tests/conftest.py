import numpy as np
import pytest

from slidekit.stain_norm import fit_target
from slidekit.synth_slides import reference_patch


@pytest.fixture(scope="session")
def canonical_target():
    return fit_target(reference_patch())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
