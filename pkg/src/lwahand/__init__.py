"""Lightweight attention operators and a coarse-to-fine two-hand mesh pipeline.

Importing the package with ``LWA_DETERMINISTIC=1`` (the default) pins BLAS to a
single thread so that repeated runs produce byte-identical outputs.
"""

import os

if os.environ.get("LWA_DETERMINISTIC", "1") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
