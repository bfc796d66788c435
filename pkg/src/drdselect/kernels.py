"""Kernel dispatch: the compiled extension when available, numpy otherwise.

Set ``DRDSELECT_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_compiled = None
if os.environ.get("DRDSELECT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _compiled = None


def component_terms(x, means, precisions, log_consts, backend: str | None = None):
    """Dispatch to the selected backend; see ``_kernels_py.component_terms``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    precisions = np.ascontiguousarray(precisions, dtype=np.float64)
    log_consts = np.ascontiguousarray(log_consts, dtype=np.float64)
    use = backend or BACKEND
    if use == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled.component_terms(x, means, precisions, log_consts)
    return _kernels_py.component_terms(x, means, precisions, log_consts)
