import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from ctxprobe.fixture import make_fixture_checkpoint, make_fixture_vocab

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def vocab():
    return make_fixture_vocab()


@pytest.fixture(scope="session")
def tiny_ckpt():
    # seed pinned to match the frozen reference fixtures
    return make_fixture_checkpoint(seed=1)


@pytest.fixture(scope="session")
def reference_fixture():
    return np.load(FIXTURES / "reference_tiny.npz")
