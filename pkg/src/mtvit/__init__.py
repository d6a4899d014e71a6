"""Multi-task post-training for a toy vision-transformer backbone."""

import os as _os

# The model's matrices are small; BLAS thread fan-out costs more than it
# saves. Must be set before numpy loads; override via MTVIT_BLAS_THREADS.
_os.environ.setdefault("OPENBLAS_NUM_THREADS",
                       _os.environ.get("MTVIT_BLAS_THREADS", "1"))
_os.environ.setdefault("OMP_NUM_THREADS", _os.environ.get("MTVIT_BLAS_THREADS", "1"))

__version__ = "0.1.0"

from .tensor import Tensor, backward, finite_diff_check, no_grad, seeded_init  # noqa: F401
