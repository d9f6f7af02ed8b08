"""Kernel backend selection.

The compiled extension is used when it imports; ``CAMLAB_BACKEND=python``
forces the numpy fallback.
"""
import os

from . import _pykernels

if os.environ.get("CAMLAB_BACKEND", "").lower() == "python":
    kernels = _pykernels
    NAME = "python"
else:
    try:
        from . import _ckernels as kernels
        NAME = "compiled"
    except ImportError:
        kernels = _pykernels
        NAME = "python"
