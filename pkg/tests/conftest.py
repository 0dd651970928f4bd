import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _finite_checks():
    # every covered forward/backward asserts finiteness during tests
    from frostnet.tensor import set_finite_checks
    set_finite_checks(True)
    yield
    set_finite_checks(False)
