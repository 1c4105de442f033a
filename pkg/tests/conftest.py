import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from fedsim.synth import make_corpus, write_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small but learnable 10-class corpus shared by the fast tests."""
    return make_corpus(seed=7, n_train=600, n_val=300)


@pytest.fixture(scope="session")
def corpus_files(tmp_path_factory):
    """The tiny corpus written once as IDX files, for file-driven runs."""
    out = tmp_path_factory.mktemp("corpus")
    return write_corpus(str(out), seed=7, n_train=600, n_val=300)


def updates_factory(rng, k=5, d=16, max_samples=8):
    """Random flat updates with integer sample counts."""
    from fedsim.nn_core import ParamVector, Update

    spec = (("w", (d,)),)
    return [
        Update(i, ParamVector(rng.normal(size=d), spec), int(rng.integers(1, max_samples + 1)))
        for i in range(k)
    ]
