"""Numerical laboratory for curvature flows of graphs in warped-product spaces."""

import os

__version__ = "0.1.0"

# CURVFLOW_THREADS caps the BLAS/OpenMP pools; it must be set before numpy loads
_threads = os.environ.get("CURVFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
