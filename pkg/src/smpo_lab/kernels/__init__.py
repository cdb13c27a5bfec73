"""Dense-network kernels with a compiled fast path.

The Cython build is used when importable; set ``SMPO_LAB_PURE=1`` to force
the numpy implementation. ``BACKEND`` names whichever was selected.
"""

import os

from . import _mlp_py

TANH = _mlp_py.TANH
SILU = _mlp_py.SILU

try:
    if os.environ.get("SMPO_LAB_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _mlp as _impl  # type: ignore[attr-defined]
    BACKEND = "cython"
except ImportError:
    _impl = _mlp_py
    BACKEND = "python"

mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _mlp_py
    if name == "cython":
        from . import _mlp  # type: ignore[attr-defined]
        return _mlp
    raise ValueError(f"unknown backend {name!r}")
