"""Hot-loop kernels: the compiled extension when available, numpy otherwise.

Set ``IMPLICIT3D_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IMPLICIT3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
sample_pdf = _impl.sample_pdf
marching_cubes = _impl.marching_cubes
