"""``python -m aquakv`` entry point.

The thread-count override must land before numpy initializes its BLAS
thread pool, so it is applied here ahead of any engine import.
"""

import os
import sys


def _apply_thread_override() -> None:
    n = os.environ.get("AQUAKV_THREADS")
    if not n:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, n)


_apply_thread_override()

from .cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
