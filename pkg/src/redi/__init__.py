"""Recover-then-discriminate anomaly detection for grayscale textures.

The pipeline recovers a normal-looking version of the input from edge
descriptors plus a prompt image, then scores anomalies by comparing frozen
backbone features of the input against features of the recovery.
"""

import os

# BLAS threading is pinned before numpy loads so that repeated runs (and
# runs under different REDI_THREADS settings) produce bit-identical floats.
# Outer parallelism is handled explicitly via REDI_THREADS.
for _var in (
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
