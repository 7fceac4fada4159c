"""Hot-loop kernels with compiled/pure-Python implementations.

The compiled Cython extension is preferred when importable; set
``OBVI_KERNELS=python`` to force the fallback or ``OBVI_KERNELS=native`` to
require the extension (raising if it is missing).
"""

import os

from . import _reference

_choice = os.environ.get("OBVI_KERNELS", "auto").lower()
if _choice not in ("auto", "native", "python"):
    raise ValueError(f"OBVI_KERNELS must be auto|native|python, got {_choice!r}")

_impl = None
if _choice in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "native":
            raise ImportError(
                "OBVI_KERNELS=native but the compiled extension is not built; "
                "run `python setup.py build_ext --inplace` or reinstall"
            )
        _impl = None
if _impl is None:
    _impl = _reference

IMPLEMENTATION = _impl.IMPLEMENTATION
reprojection_batch = _impl.reprojection_batch
quat_to_rot_batch = _impl.quat_to_rot_batch

reference = _reference
