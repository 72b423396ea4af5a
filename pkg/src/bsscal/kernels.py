"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``BSSCAL_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the equivalence tests).
"""
import os

from . import _fallback

BACKEND = "python"

if not os.environ.get("BSSCAL_PURE_PYTHON"):
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _fallback
    else:
        BACKEND = "cython"
else:
    _impl = _fallback

main_basis = _impl.main_basis
product_columns = _impl.product_columns
# row_quadform expects a lower-triangular Linv (the compiled loop skips the
# upper triangle)
row_quadform = _impl.row_quadform

__all__ = ["BACKEND", "main_basis", "product_columns", "row_quadform"]
