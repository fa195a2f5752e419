"""Targeted adversarial attacks on small digit classifiers and CTC sequence
recognizers, built on an in-package reverse-mode tape engine."""

import os as _os

# The GEMMs in this package are small; multi-threaded BLAS loses to its own
# synchronization.  Respected only when numpy has not been imported yet;
# bench workers re-apply the limit at runtime.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
