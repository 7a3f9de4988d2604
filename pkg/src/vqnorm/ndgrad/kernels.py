"""Backend selection for the convolution gather/scatter kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. Setting ``VQNORM_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("VQNORM_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
out_extent = _kernels_py.out_extent
