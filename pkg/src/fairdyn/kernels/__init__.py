"""Kernel backend selection: compiled extension with NumPy fallback.

The replay inner loop of the LSVI agent dominates training time at the
headline scale, so it is implemented twice: a Cython extension using BLAS
directly, and a NumPy reference. Selection happens at import time; the
FAIRDYN_KERNELS environment variable forces a backend:

    auto      (default) compiled if importable, else reference
    compiled  require the extension, ImportError otherwise
    reference always use the NumPy fallback

Both backends are exercised for exact parity in the test suite.
"""

from __future__ import annotations

import os

from fairdyn.kernels import reference as _reference

_choice = os.environ.get("FAIRDYN_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "reference"):
    raise ImportError(
        f"FAIRDYN_KERNELS must be auto, compiled, or reference; got {_choice!r}"
    )

reference = _reference
compiled = None
_backend = _reference
_backend_name = "reference"
if _choice in ("auto", "compiled"):
    try:
        from fairdyn.kernels import _core as _compiled
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "FAIRDYN_KERNELS=compiled but the fairdyn.kernels._core extension "
                "is not built; reinstall with a C toolchain available"
            ) from None
    else:
        compiled = _compiled
        _backend = _compiled
        _backend_name = "compiled"

locus_values = _backend.locus_values
batch_state_values = _backend.batch_state_values
rank_one_update = _backend.rank_one_update


def backend_name() -> str:
    """Which kernel backend was selected at import time."""
    return _backend_name


__all__ = [
    "locus_values",
    "batch_state_values",
    "rank_one_update",
    "backend_name",
    "compiled",
    "reference",
]
