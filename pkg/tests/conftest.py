import numpy as np
import pytest

from resa import BOS, ModelConfig, generate_weights


@pytest.fixture(scope="session")
def ref_weights():
    return generate_weights(ModelConfig())


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_prompt(rng, length):
    return [BOS] + [int(t) for t in rng.integers(0, 256, length - 1)]
