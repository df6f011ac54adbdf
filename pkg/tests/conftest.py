"""Shared fixtures.  Env pinning must precede any numpy import."""

import os

# Single-threaded BLAS before numpy initializes: reduction order then never
# depends on machine core count, which is what the byte-identity tests need.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
os.environ.setdefault("REDI_THREADS", "1")

import pytest

from redi.dataset import SynthSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24 train / 4+4 test stripes corpus; enough to exercise every stage."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    spec = SynthSpec(seed=7, image_size=64, n_train=24, n_test_normal=4, n_test_anomalous=4)
    return generate_synthetic(spec, root)
