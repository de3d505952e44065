"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_fallback``.  Set ``DIVIL_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if os.environ.get("DIVIL_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = BACKENDS[BACKEND]
softmax_rows_inplace = _impl.softmax_rows_inplace
distance_logits_inplace = _impl.distance_logits_inplace
distance_softmax_inplace = _impl.distance_softmax_inplace


def get_backend(name):
    """Kernel module for ``name`` (``"python"`` or ``"cython"``)."""
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
