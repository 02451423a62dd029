"""Map-based visual-inertial localization: Schmidt-EKF filter, FEJ, and analysis harness."""

import os as _os

# Filter linear algebra is all small-matrix work; BLAS thread pools only add
# scheduling noise (and wreck the update-complexity timing). Must be set before
# numpy first loads its BLAS, which is the case for the CLI entry points.
_os.environ.setdefault("OMP_NUM_THREADS", "1")
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
