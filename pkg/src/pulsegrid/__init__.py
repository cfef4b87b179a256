"""Heart-rate estimation from facial color signals with a small CNN."""

import os

__version__ = "0.1.0"

# must run before numpy loads its BLAS
_threads = os.environ.get("PULSEGRID_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
