"""Backend selection for the convolution hot loops.

The compiled Cython module is used when it was built and imports cleanly;
otherwise the numpy implementation is used. Set ``MTMANIP_KERNELS=python``
to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
im2col = _fallback.im2col
col2im = _fallback.col2im

if os.environ.get("MTMANIP_KERNELS", "").lower() != "python":
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        im2col = _kernels.im2col
        col2im = _kernels.col2im
        BACKEND = "compiled"


def get_backend(name: str):
    """Return ``(im2col, col2im)`` for ``"python"`` or ``"compiled"``."""
    if name == "python":
        return _fallback.im2col, _fallback.col2im
    if name == "compiled":
        from . import _kernels  # type: ignore[attr-defined]
        return _kernels.im2col, _kernels.col2im
    raise ValueError(f"unknown kernel backend {name!r}")
