# since we are in another directory, we need to add the parent directory to the path

import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from app.models.data import Dataset
from app.models.fp8 import Fp8Format
from app.services.data_partition import synth_classification, synth_quadratic


@pytest.fixture
def e4m3() -> Fp8Format:
    return Fp8Format(exp_bits=4, man_bits=3)


@pytest.fixture
def e3m4() -> Fp8Format:
    return Fp8Format(exp_bits=3, man_bits=4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def blobs() -> Dataset:
    return synth_classification(classes=3, dims=4, n=300, separation=4.0, seed=7)


@pytest.fixture
def small_quadratic():
    return synth_quadratic(clients=4, dim=3, heterogeneity=0.1, seed=3, rows_per_client=20)
