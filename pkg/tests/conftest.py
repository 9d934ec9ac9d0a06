import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from util_digits import build_digits_dataset


@pytest.fixture(scope="session")
def digits_paths(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    return build_digits_dataset(str(out))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
