"""Backend selection for the recursion kernels.

The compiled extension is used when it imports; setting
``PMLHSMM_PURE_PYTHON=1`` forces the numpy implementation.
"""

import os

from . import _kernels_py

if os.environ.get("PMLHSMM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

forward = _impl.forward
backward_grad = _impl.backward_grad
viterbi = _impl.viterbi
