from __future__ import annotations

import numpy as np
import pytest

import synthfix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def e2e_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    return synthfix.build_e2e_fixture(root)
