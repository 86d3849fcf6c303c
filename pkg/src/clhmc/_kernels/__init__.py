"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``CLHMC_PURE_PYTHON=1``
to force the numpy versions. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels

if os.environ.get("CLHMC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

laplacian5 = _impl.laplacian5
arakawa = _impl.arakawa
mixture_prior = _impl.mixture_prior

__all__ = ["BACKEND", "laplacian5", "arakawa", "mixture_prior"]
